//! Simulate a seasonal TVP-SIRD epidemic and run the score filter at the
//! true parameters.

use tvp_sird::model::RateTriple;
use tvp_sird::score::{filter_path, StaticParams};
use tvp_sird::sim::{simulate, SimSpec};

fn main() -> tvp_sird::Result<()> {
    let mut phi = StaticParams::constant(&RateTriple::new(0.15, 0.1, 0.004)?)?;
    phi.alpha = [0.3, 0.2, 0.1];
    phi.psi[0] = [0.08, 0.03, 0.0];
    phi.psi_star[0] = [0.03, 0.0, 0.01];
    let spec = SimSpec {
        phi: phi.clone(),
        days: 200,
        population: 5e7,
        i0: 1e4,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: true,
        rho: None,
        dow_log_effects: None,
        missing_rc_from: None,
        factor: None,
    };
    let sim = simulate(&spec, 1)?;
    let out = filter_path(&sim.series, &phi)?;
    let er = out.effective_reproduction(sim.series.population());
    println!("log-likelihood at the truth: {:.2}", out.loglik);
    println!("{:>10} {:>10} {:>10} {:>8}", "day", "beta", "true", "eR");
    for t in (0..sim.series.n_obs()).step_by(20) {
        println!(
            "{:>10} {:>10.5} {:>10.5} {:>8.3}",
            sim.series.dates()[t + 1],
            out.rates[t].beta,
            sim.true_rates[t].beta,
            er[t]
        );
    }
    Ok(())
}
