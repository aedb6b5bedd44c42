//! Mode-finding and adaptive random-walk Metropolis-within-Gibbs for the
//! seasonal TVP model, with posterior bands for the reproduction number.

use tvp_sird::inference::{
    effective_sample_size, hpdi, mle_init, rwmh_within_gibbs, McmcConfig, ModelVariant,
    SingleTarget,
};
use tvp_sird::model::RateTriple;
use tvp_sird::score::{filter_path_with, FilterOptions, StaticParams};
use tvp_sird::sim::{simulate, SimSpec};

fn main() -> tvp_sird::Result<()> {
    let mut phi = StaticParams::constant(&RateTriple::new(0.14, 0.1, 0.004)?)?;
    phi.alpha = [0.3, 0.2, 0.1];
    phi.psi[0] = [0.06, 0.02, 0.0];
    let spec = SimSpec {
        phi,
        days: 160,
        population: 2e7,
        i0: 5e3,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: true,
        rho: None,
        dow_log_effects: None,
        missing_rc_from: None,
        factor: None,
    };
    let sim = simulate(&spec, 8)?;
    let options = FilterOptions { seasonal: true };
    let target = SingleTarget::new(&sim.series, ModelVariant::Tvp, options, None)?;
    let mle = mle_init(&target)?;
    println!(
        "mode log-likelihood {:.2} after {} iterations",
        mle.loglik, mle.iterations
    );

    let config = McmcConfig {
        n_iter: 30_000,
        burn_in: 10_000,
        seed: 2,
        target_acceptance: Some(0.25),
        ..McmcConfig::default()
    };
    let post = rwmh_within_gibbs(&target, &mle, &config)?;
    for (b, a) in post.block_names.iter().zip(&post.acc_rates_adapted) {
        println!("block {b:<14} acceptance {a:.2}");
    }
    for (j, name) in post.names.iter().enumerate().take(6) {
        let col = post.column(j);
        println!(
            "{name:>16}: median {:.4}  ESS {:.0}",
            post.median()[j],
            effective_sample_size(&col)
        );
    }

    let n = sim.series.population();
    let last = sim.series.n_obs() - 1;
    let er_last: Vec<f64> = post
        .subsample(200)
        .into_iter()
        .map(|x| {
            filter_path_with(&sim.series, &target.params(x), options)
                .map(|f| f.effective_reproduction(n)[last])
        })
        .collect::<tvp_sird::Result<_>>()?;
    let (lo, hi) = hpdi(&er_last, 0.95)?;
    println!("eR on the last day: 95% HPDI [{lo:.3}, {hi:.3}]");
    Ok(())
}
