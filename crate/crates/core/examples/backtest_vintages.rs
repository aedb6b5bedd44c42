//! Recursive real-time backtest over a directory of data vintages.

use tvp_sird::forecast::{recursive_backtest, BacktestConfig, BacktestModel};
use tvp_sird::io::{load_vintages, write_eval, write_series_csv, LoadOptions};
use tvp_sird::model::RateTriple;
use tvp_sird::score::StaticParams;
use tvp_sird::sim::{simulate, SimSpec};

fn main() -> tvp_sird::Result<()> {
    let mut phi = StaticParams::constant(&RateTriple::new(0.14, 0.1, 0.004)?)?;
    phi.alpha = [0.3, 0.2, 0.1];
    phi.psi[0] = [0.05, 0.0, 0.0];
    let spec = SimSpec {
        phi,
        days: 170,
        population: 1e8,
        i0: 1e4,
        start_date: chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: true,
        rho: None,
        dow_log_effects: Some([0.05, 0.05, 0.0, 0.0, 0.0, -0.1, -0.15]),
        missing_rc_from: None,
        factor: None,
    };
    let full = simulate(&spec, 30)?.series;

    let dir = std::env::temp_dir().join("tvp_sird_vintages");
    std::fs::create_dir_all(&dir).map_err(|e| tvp_sird::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for t in (120..=full.n_obs()).step_by(5) {
        let v = full.truncate(t)?;
        write_series_csv(
            &dir.join(format!("{}.csv", v.dates().last().unwrap())),
            &v,
            None,
            None,
        )?;
    }
    let options = LoadOptions {
        population: None,
        start_threshold: 0.0,
    };
    let mut vintages: Vec<_> = load_vintages(&dir, &options)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let latest = vintages.pop().expect("at least two vintages");
    println!(
        "{} forecast origins, realizations from the {} vintage",
        vintages.len(),
        latest.dates().last().unwrap()
    );

    let models: Vec<BacktestModel> = ["rw-30", "rw-30-dow", "rw-60", "tvp"]
        .iter()
        .map(|m| BacktestModel::parse(m))
        .collect::<Result<_, _>>()?;
    let config = BacktestConfig {
        horizons: vec![1, 7],
        posterior_draws: 20,
        reps: 20,
        benchmark: "rw-60".into(),
        ..BacktestConfig::default()
    };
    let (records, table, failures) = recursive_backtest(&vintages, &latest, &models, &config)?;
    println!("{} forecast errors, {failures} failed fits", records.len());
    println!(
        "{:<10} {:<9} {:>2} {:>10} {:>7} {:>7}",
        "model", "series", "h", "rmsfe", "ratio", "dm p"
    );
    for r in &table {
        println!(
            "{:<10} {:<9} {:>2} {:>10.2} {:>7} {:>7}",
            r.model,
            r.series,
            r.horizon,
            r.rmsfe,
            r.rrmsfe.map_or("-".into(), |v| format!("{v:.3}")),
            r.dm_p.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    write_eval(&dir.join("eval.csv"), &table)?;
    Ok(())
}
