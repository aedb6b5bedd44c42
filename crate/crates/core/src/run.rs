//! Run configuration and the commands behind the binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::factor::{factor_filter_path, FactorRecursion, Panel};
use crate::fixed::{fit_rolling, gibbs_fixed, WindowConfig};
use crate::forecast::{
    evaluate, factor_origin, recursive_backtest, simulate_factor_forecast, simulate_forecast,
    BacktestConfig, BacktestModel, ForecastSet, Origin, VARIABLES,
};
use crate::inference::{
    effective_sample_size, hpdi, mle_init, rwmh_within_gibbs, FactorTarget, McmcConfig, MfInputs,
    MleResult, ModelVariant, PosteriorDraws, SingleTarget, Target,
};
use crate::io::{
    load_csv, load_panel, load_vintages, read_records, write_eval, write_json, write_records,
    write_rows, write_series_csv, LoadDiagnostics, LoadOptions, LoadedData,
    DEFAULT_START_THRESHOLD,
};
use crate::mixed::{mf_filter_path, DeathAllocation, MfOptions};
use crate::model::{CompartmentSeries, RateTriple};
use crate::score::{filter_path_with, FilterDiagnostics, FilterOptions};
use crate::sim::{rng_from_seed, simulate, simulate_panel, SimSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Fp,
    #[default]
    Tvp,
    TvpBeta,
    Mf,
    Factor,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(ModelKind::Fp),
            "tvp" => Ok(ModelKind::Tvp),
            "tvp-beta" => Ok(ModelKind::TvpBeta),
            "mf" => Ok(ModelKind::Mf),
            "factor" => Ok(ModelKind::Factor),
            _ => Err(Error::config(format!(
                "unknown model {s:?}; expected fp, tvp, tvp-beta, mf or factor"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Fp => "fp",
            ModelKind::Tvp => "tvp",
            ModelKind::TvpBeta => "tvp-beta",
            ModelKind::Mf => "mf",
            ModelKind::Factor => "factor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Forecast,
    Backtest,
    Evaluate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Forecast => "forecast",
            Command::Backtest => "backtest",
            Command::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryInput {
    pub name: String,
    pub data: PathBuf,
    #[serde(default)]
    pub population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub horizon: usize,
    /// Trajectories per posterior draw.
    pub reps: usize,
    /// Posterior draws used as forecast origins.
    pub draws: usize,
    pub level: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            horizon: 14,
            reps: 20,
            draws: 100,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSection {
    /// Directory of `YYYY-MM-DD.csv` snapshots.
    pub vintages_dir: PathBuf,
    /// Model labels such as `rw-60`, `rw-30-dow`, `tvp`, `tvp-beta`.
    pub models: Vec<String>,
    /// Realizations; the latest snapshot when unset.
    #[serde(default)]
    pub final_data: Option<PathBuf>,
    #[serde(default)]
    pub config: BacktestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSection {
    /// Forecast panel with columns `date, horizon, model, series, forecast,
    /// actual`.
    pub input: PathBuf,
    pub benchmark: String,
}

fn default_threshold() -> f64 {
    DEFAULT_START_THRESHOLD
}

fn default_true() -> bool {
    true
}

fn default_paths() -> usize {
    200
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Contents of the JSON configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub countries: Vec<CountryInput>,
    #[serde(default)]
    pub population: Option<f64>,
    #[serde(default = "default_threshold")]
    pub start_threshold: f64,
    #[serde(default = "default_true")]
    pub seasonal: bool,
    #[serde(default)]
    pub mcmc: McmcConfig,
    /// Posterior draws filtered for the interval bands of `params.csv`.
    #[serde(default = "default_paths")]
    pub posterior_paths: usize,
    #[serde(default)]
    pub forecast: Option<ForecastConfig>,
    #[serde(default)]
    pub deaths: DeathAllocation,
    /// Trailing window of the fixed model; the whole sample when unset.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub dow: bool,
    #[serde(default)]
    pub simulate: Option<SimSpec>,
    #[serde(default)]
    pub backtest: Option<BacktestSection>,
    #[serde(default)]
    pub evaluate: Option<EvaluateSection>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    /// Reads a config file. Relative input paths are taken relative to the
    /// file's directory; `out` is left as written.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            fix(d);
        }
        for c in &mut cfg.countries {
            fix(&mut c.data);
        }
        if let Some(b) = cfg.backtest.as_mut() {
            fix(&mut b.vintages_dir);
            if let Some(f) = b.final_data.as_mut() {
                fix(f);
            }
        }
        if let Some(e) = cfg.evaluate.as_mut() {
            fix(&mut e.input);
        }
        Ok(cfg)
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            population: self.population,
            start_threshold: self.start_threshold,
        }
    }

    /// Checks that the inputs needed by `command` are present.
    pub fn validate(&self, command: Command) -> Result<()> {
        let exists = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::config(format!("{} does not exist", p.display())))
            }
        };
        match command {
            Command::Simulate => {
                let spec = self
                    .simulate
                    .as_ref()
                    .ok_or_else(|| Error::config("simulate needs a simulate section"))?;
                spec.validate()
            }
            Command::Fit | Command::Forecast => {
                if self.model == ModelKind::Factor {
                    if self.countries.len() < 2 {
                        return Err(Error::config(
                            "the factor model needs at least two countries",
                        ));
                    }
                    for c in &self.countries {
                        exists(&c.data)?;
                    }
                } else {
                    exists(
                        self.data
                            .as_deref()
                            .ok_or_else(|| Error::config("data path is required"))?,
                    )?;
                }
                if self.model != ModelKind::Fp {
                    self.mcmc.validate()?;
                }
                if let Some(w) = self.window {
                    WindowConfig::new(w, self.dow)?;
                }
                if let Some(f) = &self.forecast {
                    if f.horizon == 0
                        || f.reps == 0
                        || f.draws == 0
                        || !(f.level > 0.0 && f.level < 1.0)
                    {
                        return Err(Error::config(
                            "forecast needs positive horizon, reps, draws and a level in (0, 1)",
                        ));
                    }
                }
                if self.posterior_paths == 0 {
                    return Err(Error::config("posterior_paths must be positive"));
                }
                Ok(())
            }
            Command::Backtest => {
                let b = self
                    .backtest
                    .as_ref()
                    .ok_or_else(|| Error::config("backtest needs a backtest section"))?;
                exists(&b.vintages_dir)?;
                if let Some(f) = &b.final_data {
                    exists(f)?;
                }
                if b.models.is_empty() {
                    return Err(Error::config("backtest needs at least one model"));
                }
                for m in &b.models {
                    BacktestModel::parse(m)?;
                }
                if let Some(m) = &b.config.mcmc {
                    m.validate()?;
                }
                Ok(())
            }
            Command::Evaluate => {
                let e = self
                    .evaluate
                    .as_ref()
                    .ok_or_else(|| Error::config("evaluate needs an evaluate section"))?;
                exists(&e.input)
            }
        }
    }
}

/// Command-line overrides of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub out: Option<PathBuf>,
}

/// Result of a successful command: the JSON summary.
pub type Summary = Map<String, Value>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn diagnostics_value(d: &FilterDiagnostics) -> Value {
    json!({
        "clamped": d.clamped,
        "gamma_nu_violations": d.gamma_nu_violations,
        "imputed_recoveries": d.imputed_recoveries,
    })
}

fn load_value(d: &LoadDiagnostics) -> Value {
    json!({
        "floored_rows": d.floored_rows,
        "skipped_rows": d.skipped_rows,
        "weekly_excess_floored": d.weekly_excess_floored,
    })
}

/// Runs one command, writing its artifacts into `config.out`.
pub fn run(command: Command, config: &RunConfig) -> Result<Summary> {
    config.validate(command)?;
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let mut summary = Summary::new();
    summary.insert("command".into(), json!(command.name()));
    summary.insert("status".into(), json!("ok"));
    summary.insert("config".into(), to_value(config));
    match command {
        Command::Simulate => run_simulate(config, &mut summary)?,
        Command::Fit => run_fit(config, false, &mut summary)?,
        Command::Forecast => run_fit(config, true, &mut summary)?,
        Command::Backtest => run_backtest(config, &mut summary)?,
        Command::Evaluate => run_evaluate(config, &mut summary)?,
    }
    Ok(summary)
}

/// Entry point of the binary: loads the config, applies overrides, runs
/// the command and writes `summary.json` (also on failure) plus
/// `timing.json`. Returns the process exit code.
pub fn execute(command: Command, config_path: Option<&Path>, overrides: &Overrides) -> i32 {
    let started = Instant::now();
    let loaded = match config_path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    };
    let out_dir = overrides
        .out
        .clone()
        .or_else(|| loaded.as_ref().ok().map(|c| c.out.clone()))
        .unwrap_or_else(default_out);
    let result = loaded.and_then(|mut cfg| {
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(m) = overrides.model {
            cfg.model = m;
        }
        cfg.out = out_dir.clone();
        run(command, &cfg)
    });
    let (summary, code) = match result {
        Ok(s) => (s, 0),
        Err(e) => {
            eprintln!("error: {e}");
            let mut s = Summary::new();
            s.insert("command".into(), json!(command.name()));
            s.insert("status".into(), json!("error"));
            s.insert(
                "error".into(),
                json!({ "kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() }),
            );
            (s, e.exit_code())
        }
    };
    if std::fs::create_dir_all(&out_dir).is_ok() {
        let timing =
            json!({ "command": command.name(), "seconds": started.elapsed().as_secs_f64() });
        let written = write_json(&out_dir.join("summary.json"), &summary)
            .and_then(|_| write_json(&out_dir.join("timing.json"), &timing));
        if let Err(e) = written {
            eprintln!("error: {e}");
            return if code == 0 { e.exit_code() } else { code };
        }
    }
    code
}

// ---------------------------------------------------------------- simulate

pub const TRUTH_HEADER: [&str; 4] = ["date", "beta", "gamma", "nu"];
pub const PANEL_TRUTH_HEADER: [&str; 6] = ["country", "date", "beta", "gamma", "nu", "common"];

fn run_simulate(config: &RunConfig, summary: &mut Summary) -> Result<()> {
    let spec = config.simulate.as_ref().expect("validated");
    let out = &config.out;
    if spec.factor.is_some() {
        let sim = simulate_panel(spec, config.seed)?;
        let mut rows = Vec::new();
        let mut files = Vec::new();
        for (c, series) in sim.panel.countries().iter().enumerate() {
            let name = &sim.panel.names()[c];
            let file = format!("data_{name}.csv");
            write_series_csv(&out.join(&file), series, None, None)?;
            files.push(file);
            for (t, r) in sim.true_rates[c].iter().enumerate() {
                rows.push(vec![
                    name.clone(),
                    series.dates()[t + 1].to_string(),
                    fmt(r.beta),
                    fmt(r.gamma),
                    fmt(r.nu),
                    fmt(sim.common_level[t]),
                ]);
            }
        }
        write_rows(&out.join("truth.csv"), &PANEL_TRUTH_HEADER, &rows)?;
        summary.insert("files".into(), json!(files));
        summary.insert("days".into(), json!(sim.panel.n_obs()));
        summary.insert("extinct".into(), json!(sim.extinct));
        return Ok(());
    }
    let sim = simulate(spec, config.seed)?;
    let excess = sim.weekly.as_ref().map(|w| {
        let mut e = vec![None; sim.series.n_obs()];
        for (k, &day) in w.release_days().iter().enumerate() {
            e[day - 1] = Some(w.excess()[k]);
        }
        e
    });
    write_series_csv(
        &out.join("data.csv"),
        &sim.series,
        sim.testing.as_ref(),
        excess.as_deref(),
    )?;
    let rows: Vec<Vec<String>> = sim
        .true_rates
        .iter()
        .enumerate()
        .map(|(t, r)| {
            vec![
                sim.series.dates()[t + 1].to_string(),
                fmt(r.beta),
                fmt(r.gamma),
                fmt(r.nu),
            ]
        })
        .collect();
    write_rows(&out.join("truth.csv"), &TRUTH_HEADER, &rows)?;
    summary.insert("files".into(), json!(["data.csv"]));
    summary.insert("days".into(), json!(sim.series.n_obs()));
    summary.insert("extinct".into(), json!(sim.extinct));
    Ok(())
}

// --------------------------------------------------------------------- fit

/// Per-day quantities of one parameter vector.
#[derive(Debug, Clone, Default)]
struct DayPaths {
    s_prev_over_n: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    nu: Vec<f64>,
    er: Vec<f64>,
    extra: Vec<f64>,
}

impl DayPaths {
    fn from_rates(rates: &[RateTriple], s_path: &[f64], n: f64) -> Self {
        let mut p = DayPaths::default();
        for (r, s) in rates.iter().zip(s_path) {
            p.s_prev_over_n.push(s / n);
            p.beta.push(r.beta);
            p.gamma.push(r.gamma);
            p.nu.push(r.nu);
            p.er.push(r.beta * (s / n) / (r.gamma + r.nu));
        }
        p
    }

    fn columns(&self) -> [&Vec<f64>; 5] {
        [&self.beta, &self.gamma, &self.nu, &self.er, &self.extra]
    }
}

pub const PARAMS_HEADER: [&str; 14] = [
    "date",
    "s_prev_over_n",
    "beta",
    "beta_lo",
    "beta_hi",
    "gamma",
    "gamma_lo",
    "gamma_hi",
    "nu",
    "nu_lo",
    "nu_hi",
    "eR",
    "eR_lo",
    "eR_hi",
];

pub const FORECAST_HEADER: [&str; 7] = ["date", "horizon", "series", "median", "mean", "lo", "hi"];

/// Rows of `params.csv`; `extra` names the optional fifth column block.
fn params_rows(
    dates: &[chrono::NaiveDate],
    point: &DayPaths,
    draws: &[DayPaths],
    level: f64,
    with_extra: bool,
    prefix: Option<&str>,
) -> Result<Vec<Vec<String>>> {
    let n_cols = if with_extra { 5 } else { 4 };
    let mut rows = Vec::with_capacity(point.beta.len());
    for t in 0..point.beta.len() {
        let mut row = Vec::with_capacity(18);
        if let Some(p) = prefix {
            row.push(p.to_string());
        }
        row.push(dates[t + 1].to_string());
        row.push(fmt(point.s_prev_over_n[t]));
        for j in 0..n_cols {
            let sample: Vec<f64> = draws.iter().map(|d| d.columns()[j][t]).collect();
            let (lo, hi) = hpdi(&sample, level)?;
            row.push(fmt(point.columns()[j][t]));
            row.push(fmt(lo));
            row.push(fmt(hi));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn params_header(prefix: bool, extra: Option<&str>) -> Vec<String> {
    let mut h: Vec<String> = Vec::new();
    if prefix {
        h.push("country".into());
    }
    h.extend(PARAMS_HEADER.iter().map(|s| s.to_string()));
    if let Some(e) = extra {
        h.extend([e.to_string(), format!("{e}_lo"), format!("{e}_hi")]);
    }
    h
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_rows(path, &refs, rows)
}

fn write_posterior(
    path: &Path,
    names: &[String],
    draws: &[Vec<f64>],
    log_posts: Option<&[f64]>,
) -> Result<()> {
    let mut header = vec!["draw".to_string()];
    if log_posts.is_some() {
        header.push("log_post".into());
    }
    header.extend(names.iter().cloned());
    let rows: Vec<Vec<String>> = draws
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let mut r = vec![k.to_string()];
            if let Some(lp) = log_posts {
                r.push(fmt(lp[k]));
            }
            r.extend(d.iter().map(|v| fmt(*v)));
            r
        })
        .collect();
    write_table(path, &header, &rows)
}

fn forecast_rows(set: &ForecastSet, level: f64, prefix: Option<&str>) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for &h in &set.horizons {
        for (v, name) in VARIABLES.iter().enumerate() {
            let p = set.summary(v, h, level)?;
            let mut row = Vec::with_capacity(8);
            if let Some(c) = prefix {
                row.push(c.to_string());
            }
            row.extend([set.date(h).to_string(), h.to_string(), name.to_string()]);
            row.extend([fmt(p.median), fmt(p.mean), fmt(p.lo), fmt(p.hi)]);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn mcmc_summary(post: &PosteriorDraws, mle: &MleResult, summary: &mut Summary) {
    let mut acc = Map::new();
    let mut acc_adapted = Map::new();
    for (k, b) in post.block_names.iter().enumerate() {
        acc.insert(b.clone(), json!(post.acc_rates[k]));
        acc_adapted.insert(b.clone(), json!(post.acc_rates_adapted[k]));
    }
    let mut ess = Map::new();
    for (j, name) in post.names.iter().enumerate() {
        ess.insert(name.clone(), json!(effective_sample_size(&post.column(j))));
    }
    summary.insert("acceptance".into(), Value::Object(acc));
    summary.insert("acceptance_adapted".into(), Value::Object(acc_adapted));
    summary.insert("ess".into(), Value::Object(ess));
    summary.insert("retained_draws".into(), json!(post.len()));
    summary.insert(
        "mle".into(),
        json!({
            "loglik": mle.loglik,
            "iterations": mle.iterations,
            "converged": mle.converged,
            "hessian_fallback": mle.fallback,
        }),
    );
}

fn sample_posterior<T: Target>(
    target: &T,
    config: &RunConfig,
) -> Result<(MleResult, PosteriorDraws)> {
    let mle = mle_init(target)?;
    let post = rwmh_within_gibbs(
        target,
        &mle,
        &McmcConfig {
            seed: config.seed,
            ..config.mcmc.clone()
        },
    )?;
    if post.is_empty() {
        return Err(Error::config("the sampler retained no draws"));
    }
    Ok((mle, post))
}

fn forecast_config(config: &RunConfig) -> ForecastConfig {
    config.forecast.clone().unwrap_or_default()
}

const LEVEL: f64 = 0.95;

fn run_fit(config: &RunConfig, forecast: bool, summary: &mut Summary) -> Result<()> {
    summary.insert("model".into(), json!(config.model.to_string()));
    match config.model {
        ModelKind::Fp => fit_fp(config, forecast, summary),
        ModelKind::Tvp | ModelKind::TvpBeta | ModelKind::Mf => {
            fit_single(config, forecast, summary)
        }
        ModelKind::Factor => fit_factor(config, forecast, summary),
    }
}

fn fit_fp(config: &RunConfig, forecast: bool, summary: &mut Summary) -> Result<()> {
    let data = load_csv(
        config.data.as_deref().expect("validated"),
        &config.load_options(),
    )?;
    let series = &data.series;
    let n_draws = config
        .mcmc
        .n_iter
        .saturating_sub(config.mcmc.burn_in)
        .max(1);
    let (posterior, draws, dow, first_day) = match config.window {
        None => {
            let d = gibbs_fixed(series, n_draws, config.seed)?;
            (d.posterior, d.draws, None, 1)
        }
        Some(w) => {
            let fit = fit_rolling(series, &WindowConfig::new(w, config.dow)?, series.n_obs())?;
            let mut rng = rng_from_seed(config.seed);
            let draws = (0..n_draws)
                .map(|_| fit.posterior.sample(&mut rng))
                .collect();
            summary.insert("window_days".into(), json!([fit.days.0, fit.days.1]));
            summary.insert("dow_converged".into(), json!(fit.converged));
            summary.insert("dow_log_effects".into(), to_value(&fit.dow));
            (fit.posterior, draws, fit.dow, fit.days.0)
        }
    };
    let point = posterior.medians();
    let n = series.population();
    let days = series.n_obs();
    let s_prev = &series.s()[..days];
    let point_paths = DayPaths::from_rates(&vec![point; days], s_prev, n);
    let mut bands = Vec::with_capacity(3);
    for j in 0..3 {
        let sample: Vec<f64> = draws.iter().map(|r| [r.beta, r.gamma, r.nu][j]).collect();
        bands.push(hpdi(&sample, LEVEL)?);
    }
    let mut rows = Vec::with_capacity(days);
    for t in 0..days {
        let ratio = point_paths.s_prev_over_n[t];
        let mut row = vec![series.dates()[t + 1].to_string(), fmt(ratio)];
        for (j, (lo, hi)) in bands.iter().enumerate() {
            row.extend([fmt(point_paths.columns()[j][t]), fmt(*lo), fmt(*hi)]);
        }
        let er: Vec<f64> = draws
            .iter()
            .map(|r| r.beta * ratio / (r.gamma + r.nu))
            .collect();
        let (lo, hi) = hpdi(&er, LEVEL)?;
        row.extend([fmt(point_paths.er[t]), fmt(lo), fmt(hi)]);
        rows.push(row);
    }
    write_table(
        &config.out.join("params.csv"),
        &params_header(false, None),
        &rows,
    )?;
    let names = vec!["beta".to_string(), "gamma".into(), "nu".into()];
    let dv: Vec<Vec<f64>> = draws.iter().map(|r| vec![r.beta, r.gamma, r.nu]).collect();
    write_posterior(&config.out.join("posterior.csv"), &names, &dv, None)?;
    summary.insert(
        "gamma_posterior".into(),
        json!({
            "beta": [posterior.beta.shape, posterior.beta.rate],
            "gamma": [posterior.gamma.shape, posterior.gamma.rate],
            "nu": [posterior.nu.shape, posterior.nu.rate],
        }),
    );
    summary.insert("first_fitted_day".into(), json!(first_day));
    summary.insert("load".into(), load_value(&data.diagnostics));
    if forecast {
        let fc = forecast_config(config);
        let mut rng = rng_from_seed(config.seed.wrapping_add(1));
        let origins = (0..fc.draws)
            .map(|_| Origin::constant(series, &posterior.sample(&mut rng), dow))
            .collect::<Result<Vec<_>>>()?;
        let set = simulate_forecast(&origins, fc.horizon, fc.reps, config.seed.wrapping_add(2))?;
        write_forecast(config, &[(None, set)], fc.level, summary)?;
    }
    Ok(())
}

fn write_forecast(
    config: &RunConfig,
    sets: &[(Option<&str>, ForecastSet)],
    level: f64,
    summary: &mut Summary,
) -> Result<()> {
    let mut rows = Vec::new();
    let mut exhausted = 0;
    for (name, set) in sets {
        rows.extend(forecast_rows(set, level, *name)?);
        exhausted += set.exhausted;
    }
    let mut header: Vec<String> = Vec::new();
    if sets.first().is_some_and(|s| s.0.is_some()) {
        header.push("country".into());
    }
    header.extend(FORECAST_HEADER.iter().map(|s| s.to_string()));
    write_table(&config.out.join("forecast.csv"), &header, &rows)?;
    summary.insert("forecast_exhausted_days".into(), json!(exhausted));
    Ok(())
}

fn fit_single(config: &RunConfig, forecast: bool, summary: &mut Summary) -> Result<()> {
    let data: LoadedData = load_csv(
        config.data.as_deref().expect("validated"),
        &config.load_options(),
    )?;
    let series = &data.series;
    let options = FilterOptions {
        seasonal: config.seasonal,
    };
    let (variant, mf) = match config.model {
        ModelKind::Tvp => (ModelVariant::Tvp, None),
        ModelKind::TvpBeta => (ModelVariant::TvpBeta, None),
        _ => {
            let testing = data
                .testing
                .as_ref()
                .ok_or_else(|| Error::config("the mf model needs tests and positives columns"))?;
            let weekly = data
                .weekly
                .as_ref()
                .ok_or_else(|| Error::config("the mf model needs an excess_weekly column"))?;
            summary.insert(
                "carried_forward_rho".into(),
                json!(testing.carried_forward()),
            );
            (
                ModelVariant::Mf,
                Some(MfInputs {
                    testing,
                    weekly,
                    deaths: config.deaths,
                }),
            )
        }
    };
    let target = SingleTarget::new(series, variant, options, mf)?;
    let (mle, post) = sample_posterior(&target, config)?;
    let n = series.population();
    let mf_opts = MfOptions {
        seasonal: config.seasonal,
        deaths: config.deaths,
    };
    let paths = |x: &[f64]| -> Result<(DayPaths, Origin, FilterDiagnostics, f64)> {
        let phi = target.params(x);
        match &target.mf {
            None => {
                let out = filter_path_with(series, &phi, options)?;
                let p = DayPaths::from_rates(&out.rates, &out.s_path, n);
                Ok((
                    p,
                    Origin::from_filter(series, &phi, options, &out),
                    out.diagnostics,
                    out.loglik,
                ))
            }
            Some(m) => {
                let out = mf_filter_path(series, m.testing, m.weekly, &phi, mf_opts)?;
                let mut p = DayPaths::from_rates(&out.rates, &out.s_star, n);
                p.extra = out.inflation[1..].to_vec();
                Ok((
                    p,
                    Origin::from_mf(series, &phi, options, &out),
                    out.diagnostics,
                    out.loglik,
                ))
            }
        }
    };
    let median = post.median();
    let (point, _, diag, loglik) = paths(&median)?;
    let band_draws = post
        .subsample(config.posterior_paths)
        .into_iter()
        .map(|x| paths(x).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let is_mf = target.mf.is_some();
    let rows = params_rows(series.dates(), &point, &band_draws, LEVEL, is_mf, None)?;
    write_table(
        &config.out.join("params.csv"),
        &params_header(false, is_mf.then_some("inflation")),
        &rows,
    )?;
    write_posterior(
        &config.out.join("posterior.csv"),
        &post.names,
        &post.draws,
        Some(&post.log_posts),
    )?;
    mcmc_summary(&post, &mle, summary);
    summary.insert("loglik_at_median".into(), json!(loglik));
    summary.insert("posterior_median".into(), json!(median));
    summary.insert("diagnostics".into(), diagnostics_value(&diag));
    summary.insert("load".into(), load_value(&data.diagnostics));
    if forecast {
        let fc = forecast_config(config);
        let origins = post
            .subsample(fc.draws)
            .into_iter()
            .map(|x| paths(x).map(|p| p.1))
            .collect::<Result<Vec<_>>>()?;
        let set = simulate_forecast(&origins, fc.horizon, fc.reps, config.seed.wrapping_add(2))?;
        write_forecast(config, &[(None, set)], fc.level, summary)?;
    }
    Ok(())
}

fn fit_factor(config: &RunConfig, forecast: bool, summary: &mut Summary) -> Result<()> {
    let files: Vec<(String, PathBuf, Option<f64>)> = config
        .countries
        .iter()
        .map(|c| {
            (
                c.name.clone(),
                c.data.clone(),
                c.population.or(config.population),
            )
        })
        .collect();
    let (panel, load_diag): (Panel, Vec<LoadDiagnostics>) =
        load_panel(&files, config.start_threshold)?;
    let options = FilterOptions {
        seasonal: config.seasonal,
    };
    let target = FactorTarget::new(&panel, options)?;
    let (mle, post) = sample_posterior(&target, config)?;
    let pops = panel.populations();
    let paths = |x: &[f64]| -> Result<(
        Vec<DayPaths>,
        crate::factor::FactorFilterOutput,
        FactorRecursion,
    )> {
        let params = target.params(x);
        let out = factor_filter_path(&panel, &params, options)?;
        let mut per = Vec::with_capacity(panel.k());
        for (i, c) in out.countries.iter().enumerate() {
            let mut p = DayPaths::from_rates(&c.rates, &c.s_path, pops[i]);
            p.extra = out.common.clone();
            per.push(p);
        }
        Ok((per, out, FactorRecursion::new(params, options)))
    };
    let median = post.median();
    let (point, point_out, _) = paths(&median)?;
    let band_draws = post
        .subsample(config.posterior_paths)
        .into_iter()
        .map(|x| paths(x).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, name) in panel.names().iter().enumerate() {
        let draws_i: Vec<DayPaths> = band_draws.iter().map(|d| d[i].clone()).collect();
        rows.extend(params_rows(
            panel.dates(),
            &point[i],
            &draws_i,
            LEVEL,
            true,
            Some(name),
        )?);
    }
    write_table(
        &config.out.join("params.csv"),
        &params_header(true, Some("common")),
        &rows,
    )?;
    write_posterior(
        &config.out.join("posterior.csv"),
        &post.names,
        &post.draws,
        Some(&post.log_posts),
    )?;
    mcmc_summary(&post, &mle, summary);
    summary.insert("loglik_at_median".into(), json!(point_out.loglik));
    summary.insert("posterior_median".into(), json!(median));
    summary.insert("common_l0".into(), json!(target.common_l0));
    summary.insert(
        "diagnostics".into(),
        diagnostics_value(&point_out.diagnostics),
    );
    let mut ld = Map::new();
    for (name, d) in panel.names().iter().zip(&load_diag) {
        ld.insert(name.clone(), load_value(d));
    }
    summary.insert("load".into(), Value::Object(ld));
    if forecast {
        let fc = forecast_config(config);
        let origins = post
            .subsample(fc.draws)
            .into_iter()
            .map(|x| paths(x).map(|(_, out, rec)| factor_origin(rec, &out, pops.clone())))
            .collect::<Result<Vec<_>>>()?;
        let first = *panel.dates().last().expect("non-empty") + chrono::Duration::days(1);
        let sets = simulate_factor_forecast(
            &origins,
            first,
            fc.horizon,
            fc.reps,
            config.seed.wrapping_add(2),
        )?;
        let named: Vec<(Option<&str>, ForecastSet)> = panel
            .names()
            .iter()
            .map(|s| Some(s.as_str()))
            .zip(sets)
            .collect();
        write_forecast(config, &named, fc.level, summary)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- backtest

fn run_backtest(config: &RunConfig, summary: &mut Summary) -> Result<()> {
    let b = config.backtest.as_ref().expect("validated");
    let mut vintages = load_vintages(&b.vintages_dir, &config.load_options())?;
    let final_data: CompartmentSeries = match &b.final_data {
        Some(p) => load_csv(p, &config.load_options())?.series,
        None => {
            if vintages.len() < 2 {
                return Err(Error::data(
                    "a backtest needs at least two snapshots when final_data is unset",
                ));
            }
            vintages.pop().expect("non-empty").1
        }
    };
    let models = b
        .models
        .iter()
        .map(|m| BacktestModel::parse(m))
        .collect::<Result<Vec<_>>>()?;
    let bt = BacktestConfig {
        seed: config.seed,
        ..b.config.clone()
    };
    let series: Vec<CompartmentSeries> = vintages.iter().map(|v| v.1.clone()).collect();
    let (records, table, failures) = recursive_backtest(&series, &final_data, &models, &bt)?;
    write_records(&config.out.join("forecasts.csv"), &records)?;
    write_eval(&config.out.join("eval.csv"), &table)?;
    summary.insert(
        "vintages".into(),
        json!(vintages.iter().map(|v| v.0.to_string()).collect::<Vec<_>>()),
    );
    summary.insert("records".into(), json!(records.len()));
    summary.insert("failed_fits".into(), json!(failures));
    Ok(())
}

fn run_evaluate(config: &RunConfig, summary: &mut Summary) -> Result<()> {
    let e = config.evaluate.as_ref().expect("validated");
    let records = read_records(&e.input)?;
    let table = evaluate(&records, &e.benchmark)?;
    write_eval(&config.out.join("eval.csv"), &table)?;
    summary.insert("records".into(), json!(records.len()));
    summary.insert("rows".into(), json!(table.len()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names_round_trip() {
        for m in [
            ModelKind::Fp,
            ModelKind::Tvp,
            ModelKind::TvpBeta,
            ModelKind::Mf,
            ModelKind::Factor,
        ] {
            assert_eq!(m.to_string().parse::<ModelKind>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), json!(m.to_string()));
        }
        assert_eq!("sir".parse::<ModelKind>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn defaults_and_unknown_fields() {
        let c = RunConfig::default();
        assert_eq!(c.start_threshold, 1000.0);
        assert_eq!(c.model, ModelKind::Tvp);
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": "fp"}"#).is_err());
    }

    #[test]
    fn validation_reports_missing_inputs() {
        let c = RunConfig {
            model: ModelKind::Factor,
            ..RunConfig::default()
        };
        assert_eq!(c.validate(Command::Fit).unwrap_err().exit_code(), 2);
        let c = RunConfig {
            data: Some("/nonexistent/x.csv".into()),
            ..RunConfig::default()
        };
        assert!(c
            .validate(Command::Fit)
            .unwrap_err()
            .to_string()
            .contains("does not exist"));
        assert_eq!(
            RunConfig::default()
                .validate(Command::Simulate)
                .unwrap_err()
                .exit_code(),
            2
        );
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"data": "d.csv", "out": "o"}"#).unwrap();
        let c = RunConfig::from_file(&p).unwrap();
        assert_eq!(c.data.unwrap(), dir.path().join("d.csv"));
        assert_eq!(c.out, PathBuf::from("o"));
    }
}
