//! Mixed-frequency fit: daily cases and recoveries, weekly deaths with an
//! excess-mortality correction, and a positivity-driven inflation of the
//! reported counts.

use tvp_sird::inference::{
    mle_init, rwmh_within_gibbs, McmcConfig, MfInputs, ModelVariant, SingleTarget, Target,
};
use tvp_sird::mixed::{mf_filter_path, DeathAllocation, MfOptions};
use tvp_sird::model::RateTriple;
use tvp_sird::score::{FilterOptions, StaticParams};
use tvp_sird::sim::{simulate, RhoPath, SimSpec};

fn main() -> tvp_sird::Result<()> {
    let mut phi = StaticParams::constant(&RateTriple::new(0.14, 0.1, 0.004)?)?;
    phi.alpha = [0.3, 0.2, 0.1];
    phi.k = Some(2.0);
    let spec = SimSpec {
        phi,
        days: 400,
        population: 1e8,
        i0: 2e4,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: false,
        rho: Some(RhoPath::Sinusoid {
            mean: 0.12,
            amplitude: 0.06,
            period: 90.0,
        }),
        dow_log_effects: None,
        missing_rc_from: None,
        factor: None,
    };
    let sim = simulate(&spec, 62)?;
    let (testing, weekly) = (sim.testing.as_ref().unwrap(), sim.weekly.as_ref().unwrap());
    println!(
        "{} days, {} weekly releases",
        sim.series.n_obs(),
        weekly.release_days().len()
    );

    let mf = MfInputs {
        testing,
        weekly,
        deaths: DeathAllocation::default(),
    };
    let target = SingleTarget::new(
        &sim.series,
        ModelVariant::Mf,
        FilterOptions { seasonal: false },
        Some(mf),
    )?;
    let x0 = target.start()?;
    let p0 = target.params(&x0);
    match mf_filter_path(
        &sim.series,
        testing,
        weekly,
        &p0,
        MfOptions {
            seasonal: false,
            deaths: mf.deaths,
        },
    ) {
        Ok(f) => println!("start loglik {:.1}", f.loglik),
        Err(e) => println!("start: {e}"),
    }
    let mle = mle_init(&target)?;
    println!("mode loglik {:.1}", mle.loglik);
    let post = rwmh_within_gibbs(
        &target,
        &mle,
        &McmcConfig {
            n_iter: 6000,
            burn_in: 3000,
            seed: 1,
            ..Default::default()
        },
    )?;
    let med = post.median();
    for (name, v) in post.names.iter().zip(&med) {
        println!("{name:>16} {v:.4}");
    }
    Ok(())
}
