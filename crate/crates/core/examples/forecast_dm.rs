//! Predictive simulation from a TVP fit and from a rolling fixed model over
//! a range of origins, then RMSFE and a Diebold-Mariano comparison.

use tvp_sird::fixed::{fit_rolling, WindowConfig};
use tvp_sird::forecast::{dm_test, relative_rmsfe, rmsfe, simulate_forecast, Origin};
use tvp_sird::inference::{mle_from, mle_init, ModelVariant, SingleTarget};
use tvp_sird::model::RateTriple;
use tvp_sird::score::{filter_path_with, FilterOptions, StaticParams};
use tvp_sird::sim::{simulate, SimSpec};

fn main() -> tvp_sird::Result<()> {
    let mut phi = StaticParams::constant(&RateTriple::new(0.14, 0.1, 0.004)?)?;
    phi.alpha = [0.3, 0.2, 0.1];
    let spec = SimSpec {
        phi,
        days: 180,
        population: 1e8,
        i0: 1e4,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: false,
        rho: None,
        dow_log_effects: None,
        missing_rc_from: None,
        factor: None,
    };
    let full = simulate(&spec, 12)?.series;
    let options = FilterOptions { seasonal: false };
    let (mut tvp, mut rw, mut actual) = (Vec::new(), Vec::new(), Vec::new());
    let mut warm: Option<Vec<f64>> = None;
    for t in 100..full.n_obs() {
        let vintage = full.truncate(t)?;
        let target = SingleTarget::new(&vintage, ModelVariant::Tvp, options, None)?;
        let mle = match &warm {
            Some(x) => mle_from(&target, x)?,
            None => mle_init(&target)?,
        };
        let p = target.params(&mle.x);
        let out = filter_path_with(&vintage, &p, options)?;
        let set = simulate_forecast(
            &[Origin::from_filter(&vintage, &p, options, &out)],
            1,
            200,
            t as u64,
        )?;
        tvp.push(set.point(0, 1));
        warm = Some(mle.x);

        let fit = fit_rolling(&vintage, &WindowConfig::new(60, false)?, t)?;
        let set = simulate_forecast(
            &[Origin::constant(&vintage, &fit.posterior.medians(), None)?],
            1,
            200,
            t as u64,
        )?;
        rw.push(set.point(0, 1));
        actual.push(full.delta_c()[t]);
    }
    let (a, b) = (rmsfe(&tvp, &actual)?, rmsfe(&rw, &actual)?);
    let loss = |f: &[f64]| {
        f.iter()
            .zip(&actual)
            .map(|(x, y)| (x - y) * (x - y))
            .collect::<Vec<f64>>()
    };
    let dm = dm_test(&loss(&tvp), &loss(&rw), 1)?;
    println!("{} one-day-ahead forecasts of new cases", actual.len());
    println!(
        "RMSFE tvp {a:.1}  rw-60 {b:.1}  ratio {:.3}",
        relative_rmsfe(a, b)
    );
    println!(
        "DM statistic {:.2}, p-value {:.4}",
        dm.statistic, dm.p_value
    );
    Ok(())
}
