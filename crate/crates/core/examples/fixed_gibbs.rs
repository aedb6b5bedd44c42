//! Conjugate fixed-parameter model: exact Gamma posteriors and direct draws.

use tvp_sird::fixed::gibbs_fixed;
use tvp_sird::inference::hpdi;
use tvp_sird::model::RateTriple;
use tvp_sird::score::StaticParams;
use tvp_sird::sim::{simulate, SimSpec};

fn main() -> tvp_sird::Result<()> {
    let truth = RateTriple::new(0.1, 0.07, 0.004)?;
    let spec = SimSpec {
        phi: StaticParams::constant(&truth)?,
        days: 120,
        population: 1e7,
        i0: 5e3,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: false,
        rho: None,
        dow_log_effects: None,
        missing_rc_from: None,
        factor: None,
    };
    let series = simulate(&spec, 3)?.series;
    let fit = gibbs_fixed(&series, 5000, 11)?;
    let p = &fit.posterior;
    for (name, post, true_value, pick) in [
        ("beta", p.beta, truth.beta, 0),
        ("gamma", p.gamma, truth.gamma, 1),
        ("nu", p.nu, truth.nu, 2),
    ] {
        let xs: Vec<f64> = fit
            .draws
            .iter()
            .map(|r| [r.beta, r.gamma, r.nu][pick])
            .collect();
        let (lo, hi) = hpdi(&xs, 0.95)?;
        println!(
            "{name:>5}: truth {true_value:.5}  posterior mean {:.5}  median {:.5}  95% HPDI [{lo:.5}, {hi:.5}]",
            post.mean(),
            post.median()
        );
    }
    println!("R0 at the medians: {:.3}", fit.posterior.medians().r0());
    Ok(())
}
