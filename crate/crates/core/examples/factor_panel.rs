//! Three-country panel with a common infection-rate level: simulate, fit
//! the loadings and compare the filtered common factor to the truth.

use tvp_sird::factor::{factor_filter_path, FactorParams};
use tvp_sird::inference::{mle_init, rwmh_within_gibbs, FactorTarget, McmcConfig};
use tvp_sird::model::RateTriple;
use tvp_sird::score::{FilterOptions, StaticParams};
use tvp_sird::sim::{simulate_panel, FactorSimSpec, SimSpec};

fn country(beta: f64, gamma: f64, nu: f64) -> tvp_sird::Result<StaticParams> {
    let mut p = StaticParams::constant(&RateTriple::new(beta, gamma, nu)?)?;
    p.alpha = [0.05, 0.2, 0.1];
    Ok(p)
}

fn main() -> tvp_sird::Result<()> {
    let loadings = vec![1.0, 0.8, 1.2];
    let mut countries = vec![
        country(0.15, 0.1, 0.004)?,
        country(0.13, 0.09, 0.005)?,
        country(0.16, 0.11, 0.003)?,
    ];
    let common_l0 = countries[0].theta_l0[0];
    for (c, tau) in countries.iter_mut().zip(&loadings) {
        c.theta_l0[0] -= tau * common_l0;
    }
    let params = FactorParams {
        countries,
        loadings,
        alpha_common: 0.3,
        common_l0,
    };
    let spec = SimSpec {
        phi: StaticParams::constant(&RateTriple::new(0.15, 0.1, 0.004)?)?,
        days: 250,
        population: 1e8,
        i0: 2e4,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: false,
        rho: None,
        dow_log_effects: None,
        missing_rc_from: None,
        factor: Some(FactorSimSpec {
            params,
            names: vec!["north".into(), "south".into(), "east".into()],
            populations: vec![1e8, 6e7, 8e7],
            i0: vec![2e4, 1.5e4, 1e4],
        }),
    };
    let sim = simulate_panel(&spec, 21)?;
    let options = FilterOptions { seasonal: false };
    let target = FactorTarget::new(&sim.panel, options)?;
    let mle = mle_init(&target)?;
    let post = rwmh_within_gibbs(
        &target,
        &mle,
        &McmcConfig {
            n_iter: 6000,
            burn_in: 3000,
            seed: 4,
            ..McmcConfig::default()
        },
    )?;
    let med = post.median();
    for (name, v) in post.names.iter().zip(&med) {
        if name.starts_with("tau_") || name == "alpha_common" {
            println!("{name:>14}: {v:.3}");
        }
    }
    let fitted = factor_filter_path(&sim.panel, &target.params(&med), options)?;
    for t in (0..fitted.common.len()).step_by(50) {
        println!(
            "day {t:>3}: common level {:+.3}  true {:+.3}",
            fitted.common[t], sim.common_level[t]
        );
    }
    Ok(())
}
