//! Rolling-window fixed models with and without day-of-week effects.

use tvp_sird::fixed::{fit_rolling, WindowConfig};
use tvp_sird::model::RateTriple;
use tvp_sird::score::StaticParams;
use tvp_sird::sim::{simulate, SimSpec};

fn main() -> tvp_sird::Result<()> {
    let dow = [0.1, 0.05, 0.0, 0.0, -0.05, -0.2, -0.3];
    let spec = SimSpec {
        phi: StaticParams::constant(&RateTriple::new(0.09, 0.07, 0.003)?)?,
        days: 150,
        population: 1e8,
        i0: 2e4,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(),
        seasonal: false,
        rho: None,
        dow_log_effects: Some(dow),
        missing_rc_from: None,
        factor: None,
    };
    let series = simulate(&spec, 5)?.series;
    let t_end = series.n_obs();
    for with_dow in [false, true] {
        let fit = fit_rolling(&series, &WindowConfig::new(60, with_dow)?, t_end)?;
        let m = fit.posterior.medians();
        println!(
            "window {:?} dow={with_dow}: beta {:.5} gamma {:.5} nu {:.5}",
            fit.days, m.beta, m.gamma, m.nu
        );
        if let Some(effects) = fit.dow {
            let mean = dow.iter().sum::<f64>() / 7.0;
            for (k, (e, t)) in effects.iter().zip(&dow).enumerate() {
                println!(
                    "  weekday {k}: estimated {e:+.3}  true (centred) {:+.3}",
                    t - mean
                );
            }
        }
    }
    Ok(())
}
