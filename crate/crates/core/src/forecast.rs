//! Predictive simulation, point and interval summaries, RMSFE and the
//! Diebold-Mariano test, and recursive backtests over data vintages.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::factor::{FactorFilterOutput, FactorRecursion, FactorState};
use crate::fixed::{fit_rolling, weekday_index, RollingFit, WindowConfig};
use crate::inference::{
    hpdi, median, mle_from, mle_init, rwmh_within_gibbs, McmcConfig, ModelVariant, SingleTarget,
    Target,
};
use crate::mixed::{MfFilterOutput, WEEK};
use crate::model::{poisson_means, CompartmentSeries, RateTriple};
use crate::score::{
    filter_path_with, log_link_score, logit_link_score, scaled_scores, DayObs, FilterDiagnostics,
    FilterOptions, FilterOutput, ScoreTriple, StaticParams, TvpRecursion, TvpState,
};
use crate::sim::draw_poisson;

/// Intensity used once the susceptible pool is exhausted.
pub const EXHAUSTED_INTENSITY: f64 = 1e-8;

/// Forecast variables, in emission order.
pub const VARIABLES: [&str; 3] = ["confirmed", "recovered", "deaths"];

/// Simulated future flows of one trajectory, one entry per horizon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathDraw {
    pub flows: [Vec<f64>; 3],
    /// Days on which the susceptible pool was exhausted.
    pub exhausted: usize,
}

/// Starting point of a single-country trajectory.
#[derive(Debug, Clone)]
pub struct Origin {
    pub recursion: TvpRecursion,
    pub state: TvpState,
    pub i: f64,
    pub s: f64,
    pub population: f64,
    /// Date of the first forecast day.
    pub first_date: NaiveDate,
    /// Day-of-week log effects, Monday..Sunday.
    pub dow: Option<[f64; 7]>,
    /// Weekly death bookkeeping of the mixed-frequency model.
    pub mf: Option<MfCarry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfCarry {
    /// `exp(kρ)` at the origin, held over the horizon.
    pub inflation: f64,
    /// Days since the last weekly release.
    pub phase: usize,
    pub exposure: f64,
    pub deaths: f64,
}

impl Origin {
    /// After a filtered single-country path.
    pub fn from_filter(
        series: &CompartmentSeries,
        phi: &StaticParams,
        options: FilterOptions,
        out: &FilterOutput,
    ) -> Self {
        Origin {
            recursion: TvpRecursion::new(phi.clone(), options),
            state: out.terminal,
            i: *out.i_path.last().expect("non-empty path"),
            s: *out.s_path.last().expect("non-empty path"),
            population: series.population(),
            first_date: next_date(series),
            dow: None,
            mf: None,
        }
    }

    /// Constant rates after the last observed day.
    pub fn constant(
        series: &CompartmentSeries,
        rates: &RateTriple,
        dow: Option<[f64; 7]>,
    ) -> Result<Self> {
        let phi = StaticParams::constant(rates)?;
        let recursion = TvpRecursion::new(phi, FilterOptions { seasonal: false });
        Ok(Origin {
            state: recursion.initial_state(),
            recursion,
            i: *series.i().last().expect("non-empty series"),
            s: *series.s().last().expect("non-empty series"),
            population: series.population(),
            first_date: next_date(series),
            dow,
            mf: None,
        })
    }

    /// After a mixed-frequency path. Positivity is held at its last value.
    pub fn from_mf(
        series: &CompartmentSeries,
        phi: &StaticParams,
        options: FilterOptions,
        out: &MfFilterOutput,
    ) -> Self {
        let t = series.n_obs();
        let phase = t % WEEK;
        let exposure = out.i_star[t - phase..t].iter().sum();
        let deaths = out.rates[t - phase..t]
            .iter()
            .zip(&out.i_star[t - phase..t])
            .map(|(r, i)| r.nu * i)
            .sum();
        Origin {
            recursion: TvpRecursion::new(crate::mixed::mf_params(phi), options),
            state: out.terminal,
            i: out.i_star[t],
            s: out.s_star[t],
            population: series.population(),
            first_date: next_date(series),
            dow: None,
            mf: Some(MfCarry {
                inflation: *out.inflation.last().expect("non-empty"),
                phase,
                exposure,
                deaths,
            }),
        }
    }
}

fn next_date(series: &CompartmentSeries) -> NaiveDate {
    *series.dates().last().expect("non-empty series") + chrono::Duration::days(1)
}

fn dow_mult(dow: &Option<[f64; 7]>, date: NaiveDate) -> f64 {
    dow.map(|d| d[weekday_index(date)].exp()).unwrap_or(1.0)
}

/// One joint trajectory: flows are drawn at the current means and the
/// scores of the simulated flows drive the parameters forward.
pub fn simulate_path<R: Rng + ?Sized>(
    origin: &Origin,
    h_max: usize,
    rng: &mut R,
) -> Result<PathDraw> {
    let mut state = origin.state;
    let mut diag = FilterDiagnostics::default();
    let (mut i, mut s) = (origin.i, origin.s);
    let n = origin.population;
    let mut out = PathDraw::default();
    let mut carry = origin.mf;
    for step in 0..h_max {
        let date = origin.first_date + chrono::Duration::days(step as i64);
        let rates = origin.recursion.rates(&state, &mut diag)?;
        let mut means = poisson_means(&rates, i, s, n);
        if s <= 0.0 {
            means.lambda1 = EXHAUSTED_INTENSITY;
            out.exhausted += 1;
        }
        let mult = dow_mult(&origin.dow, date);
        let c = draw_poisson(rng, means.lambda1 * mult).min(s.max(0.0));
        let mut r = draw_poisson(rng, means.lambda2 * mult);
        let mut d = draw_poisson(rng, means.lambda3 * mult);
        if i + c - r - d < 0.0 {
            d = d.min(i + c);
            r = i + c - d;
        }
        let score = match carry.as_mut() {
            None => scaled_scores(
                &DayObs {
                    delta_c: c,
                    delta_rc: Some(r),
                    delta_d: Some(d),
                },
                &means,
                &rates,
            )?,
            Some(m) => {
                m.exposure += i;
                m.deaths += d;
                m.phase += 1;
                let mut sc = ScoreTriple {
                    s_beta: if means.lambda1 > 0.0 {
                        log_link_score(c, means.lambda1)
                    } else {
                        0.0
                    },
                    s_gamma: if means.lambda2 > 0.0 {
                        logit_link_score(r, means.lambda2, rates.gamma)
                    } else {
                        0.0
                    },
                    s_nu: 0.0,
                };
                if m.phase == WEEK {
                    let lam = rates.nu * m.exposure;
                    if lam > 0.0 {
                        sc.s_nu = logit_link_score(m.deaths, lam, rates.nu);
                    }
                    m.phase = 0;
                    m.exposure = 0.0;
                    m.deaths = 0.0;
                }
                sc
            }
        };
        origin.recursion.advance(&mut state, &score);
        i += c - r - d;
        s -= c;
        // reported scale for the mixed-frequency model
        let deflate = carry.map(|m| 1.0 / m.inflation).unwrap_or(1.0);
        out.flows[0].push(c * deflate);
        out.flows[1].push(r * deflate);
        out.flows[2].push(d);
    }
    Ok(out)
}

/// Predictive draws per variable and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSet {
    pub first_date: NaiveDate,
    pub horizons: Vec<usize>,
    /// `draws[v][h - 1]` holds the samples of variable `v` at horizon `h`.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub exhausted: usize,
}

/// Summary of one variable at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    pub median: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ForecastSet {
    pub fn h_max(&self) -> usize {
        self.horizons.len()
    }

    pub fn date(&self, h: usize) -> NaiveDate {
        self.first_date + chrono::Duration::days(h as i64 - 1)
    }

    pub fn samples(&self, var: usize, h: usize) -> &[f64] {
        &self.draws[var][h - 1]
    }

    /// Median, mean and HPDI of the predictive draws.
    pub fn summary(&self, var: usize, h: usize, level: f64) -> Result<ForecastPoint> {
        let s = self.samples(var, h);
        let (lo, hi) = hpdi(s, level)?;
        Ok(ForecastPoint {
            median: median(s),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            lo,
            hi,
        })
    }

    pub fn point(&self, var: usize, h: usize) -> f64 {
        median(self.samples(var, h))
    }
}

fn draw_rng(seed: u64, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    rng
}

/// Trajectories from every origin (one per posterior draw), `reps` each.
/// Each origin has its own random stream, so the result does not depend on
/// scheduling.
pub fn simulate_forecast(
    origins: &[Origin],
    h_max: usize,
    reps: usize,
    seed: u64,
) -> Result<ForecastSet> {
    if origins.is_empty() || reps == 0 || h_max == 0 {
        return Err(Error::config(
            "forecasts need origins, replicates and a positive horizon",
        ));
    }
    let paths: Vec<Vec<PathDraw>> = origins
        .par_iter()
        .enumerate()
        .map(|(m, o)| {
            let mut rng = draw_rng(seed, m);
            (0..reps)
                .map(|_| simulate_path(o, h_max, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let total = origins.len() * reps;
    let mut draws = vec![vec![Vec::with_capacity(total); h_max]; 3];
    let mut exhausted = 0;
    for p in paths.iter().flatten() {
        exhausted += p.exhausted;
        for v in 0..3 {
            for h in 0..h_max {
                draws[v][h].push(p.flows[v][h]);
            }
        }
    }
    Ok(ForecastSet {
        first_date: origins[0].first_date,
        horizons: (1..=h_max).collect(),
        draws,
        exhausted,
    })
}

/// Joint panel trajectories, one forecast set per country.
pub fn simulate_factor_forecast(
    origins: &[(FactorRecursion, FactorState, Vec<f64>, Vec<f64>, Vec<f64>)],
    first_date: NaiveDate,
    h_max: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<ForecastSet>> {
    if origins.is_empty() || reps == 0 || h_max == 0 {
        return Err(Error::config(
            "forecasts need origins, replicates and a positive horizon",
        ));
    }
    let k = origins[0].2.len();
    let paths: Vec<Vec<Vec<PathDraw>>> = origins
        .par_iter()
        .enumerate()
        .map(|(m, (rec, state0, i0, s0, n))| {
            let mut rng = draw_rng(seed, m);
            (0..reps)
                .map(|_| {
                    let mut state = state0.clone();
                    let (mut i, mut s) = (i0.clone(), s0.clone());
                    let mut out = vec![PathDraw::default(); k];
                    let mut diag = FilterDiagnostics::default();
                    let mut scores = vec![ScoreTriple::default(); k];
                    let mut counts = vec![0.0; k];
                    let mut lam1 = vec![0.0; k];
                    for _ in 0..h_max {
                        for c in 0..k {
                            let rates = rec.rates(&state, c, &mut diag)?;
                            let mut means = poisson_means(&rates, i[c], s[c], n[c]);
                            if s[c] <= 0.0 {
                                means.lambda1 = EXHAUSTED_INTENSITY;
                                out[c].exhausted += 1;
                            }
                            let dc = draw_poisson(&mut rng, means.lambda1).min(s[c].max(0.0));
                            let mut r = draw_poisson(&mut rng, means.lambda2);
                            let mut d = draw_poisson(&mut rng, means.lambda3);
                            if i[c] + dc - r - d < 0.0 {
                                d = d.min(i[c] + dc);
                                r = i[c] + dc - d;
                            }
                            scores[c] = scaled_scores(
                                &DayObs {
                                    delta_c: dc,
                                    delta_rc: Some(r),
                                    delta_d: Some(d),
                                },
                                &means,
                                &rates,
                            )?;
                            counts[c] = dc;
                            lam1[c] = means.lambda1;
                            i[c] += dc - r - d;
                            s[c] -= dc;
                            out[c].flows[0].push(dc);
                            out[c].flows[1].push(r);
                            out[c].flows[2].push(d);
                        }
                        rec.advance(&mut state, &scores, &counts, &lam1)?;
                    }
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let total = origins.len() * reps;
    let mut sets = Vec::with_capacity(k);
    for c in 0..k {
        let mut draws = vec![vec![Vec::with_capacity(total); h_max]; 3];
        let mut exhausted = 0;
        for p in paths.iter().flatten() {
            exhausted += p[c].exhausted;
            for v in 0..3 {
                for h in 0..h_max {
                    draws[v][h].push(p[c].flows[v][h]);
                }
            }
        }
        sets.push(ForecastSet {
            first_date,
            horizons: (1..=h_max).collect(),
            draws,
            exhausted,
        });
    }
    Ok(sets)
}

/// Terminal panel state for a factor forecast origin.
pub fn factor_origin(
    rec: FactorRecursion,
    out: &FactorFilterOutput,
    populations: Vec<f64>,
) -> (FactorRecursion, FactorState, Vec<f64>, Vec<f64>, Vec<f64>) {
    let i = out
        .countries
        .iter()
        .map(|c| *c.i_path.last().expect("non-empty"))
        .collect();
    let s = out
        .countries
        .iter()
        .map(|c| *c.s_path.last().expect("non-empty"))
        .collect();
    (rec, out.terminal.clone(), i, s, populations)
}

pub fn rmsfe(forecasts: &[f64], realized: &[f64]) -> Result<f64> {
    if forecasts.is_empty() || forecasts.len() != realized.len() {
        return Err(Error::domain("RMSFE needs aligned, non-empty series"));
    }
    let mse = forecasts
        .iter()
        .zip(realized)
        .map(|(f, y)| (f - y).powi(2))
        .sum::<f64>()
        / forecasts.len() as f64;
    Ok(mse.sqrt())
}

pub fn relative_rmsfe(candidate: f64, benchmark: f64) -> f64 {
    candidate / benchmark
}

/// Small-sample factor `sqrt((T + 1 − 2h + h(h−1)/T) / T)`.
pub fn harvey_factor(t: usize, h: usize) -> f64 {
    let (t, h) = (t as f64, h as f64);
    ((t + 1.0 - 2.0 * h + h * (h - 1.0) / t) / t).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Diebold-Mariano test on two loss series at horizon `h`: Bartlett HAC
/// variance with `h − 1` lags, small-sample factor, `t_{T−1}` p-value.
/// Positive statistics favour model `b`.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64], h: usize) -> Result<DmResult> {
    let t = loss_a.len();
    if t != loss_b.len() {
        return Err(Error::domain("loss series must be aligned"));
    }
    if t < 10 {
        return Err(Error::domain(format!(
            "DM test needs at least 10 losses, got {t}"
        )));
    }
    if h == 0 {
        return Err(Error::domain("horizon must be positive"));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(DmResult {
            statistic: 0.0,
            p_value: 1.0,
        });
    }
    let n = t as f64;
    let mean = d.iter().sum::<f64>() / n;
    let autocov = |k: usize| {
        d[k..]
            .iter()
            .zip(&d)
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / n
    };
    let mut v = autocov(0);
    for k in 1..h.min(t) {
        v += 2.0 * (1.0 - k as f64 / h as f64) * autocov(k);
    }
    if v <= 0.0 {
        v = autocov(0);
    }
    // a constant differential leaves only rounding noise in the variance
    if v <= 1e-20 * mean * mean {
        let statistic = if mean > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        return Ok(DmResult {
            statistic,
            p_value: 0.0,
        });
    }
    let statistic = mean / (v / n).sqrt() * harvey_factor(t, h);
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::numeric(e.to_string()))?;
    let p_value = 2.0 * (1.0 - dist.cdf(statistic.abs()));
    Ok(DmResult { statistic, p_value })
}

/// Models compared in a backtest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BacktestModel {
    /// Fixed-parameter fit on a trailing window of the given length.
    Rolling {
        window: usize,
        dow: bool,
    },
    Tvp,
    TvpBeta,
}

impl BacktestModel {
    pub fn label(&self) -> String {
        match self {
            BacktestModel::Rolling { window, dow: false } => format!("rw-{window}"),
            BacktestModel::Rolling { window, dow: true } => format!("rw-{window}-dow"),
            BacktestModel::Tvp => "tvp".into(),
            BacktestModel::TvpBeta => "tvp-beta".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tvp" => Ok(BacktestModel::Tvp),
            "tvp-beta" => Ok(BacktestModel::TvpBeta),
            _ => {
                let rest = s
                    .strip_prefix("rw-")
                    .ok_or_else(|| Error::config(format!("unknown backtest model {s}")))?;
                let (w, dow) = match rest.strip_suffix("-dow") {
                    Some(w) => (w, true),
                    None => (rest, false),
                };
                let window = w
                    .parse()
                    .map_err(|_| Error::config(format!("bad window in {s}")))?;
                Ok(BacktestModel::Rolling { window, dow })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub horizons: Vec<usize>,
    /// Posterior sampling per vintage; the mode is used as a point mass when
    /// unset.
    pub mcmc: Option<McmcConfig>,
    pub posterior_draws: usize,
    pub reps: usize,
    pub seasonal: bool,
    pub seed: u64,
    /// Label of the benchmark model in the relative table.
    pub benchmark: String,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            horizons: vec![1, 7, 14],
            mcmc: None,
            posterior_draws: 100,
            reps: 200,
            seasonal: true,
            seed: 0,
            benchmark: "tvp".into(),
        }
    }
}

/// One forecast error entering the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub date: NaiveDate,
    pub horizon: usize,
    pub model: String,
    pub series: String,
    pub forecast: f64,
    pub actual: f64,
}

/// Row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub series: String,
    pub horizon: usize,
    pub n: usize,
    pub rmsfe: f64,
    /// RMSFE relative to the benchmark over the common dates.
    pub rrmsfe: Option<f64>,
    pub dm_stat: Option<f64>,
    pub dm_p: Option<f64>,
}

/// Fits one model on a vintage and simulates its forecasts.
pub fn forecast_vintage(
    vintage: &CompartmentSeries,
    model: &BacktestModel,
    config: &BacktestConfig,
    warm: Option<&[f64]>,
    seed: u64,
) -> Result<(ForecastSet, Option<Vec<f64>>)> {
    let h_max = config.horizons.iter().copied().max().unwrap_or(1);
    match model {
        BacktestModel::Rolling { window, dow } => {
            let fit: RollingFit =
                fit_rolling(vintage, &WindowConfig::new(*window, *dow)?, vintage.n_obs())?;
            let mut rng = draw_rng(seed, usize::MAX);
            let origins = (0..config.posterior_draws.max(1))
                .map(|_| Origin::constant(vintage, &fit.posterior.sample(&mut rng), fit.dow))
                .collect::<Result<Vec<_>>>()?;
            Ok((simulate_forecast(&origins, h_max, config.reps, seed)?, None))
        }
        BacktestModel::Tvp | BacktestModel::TvpBeta => {
            let variant = if *model == BacktestModel::Tvp {
                ModelVariant::Tvp
            } else {
                ModelVariant::TvpBeta
            };
            let options = FilterOptions {
                seasonal: config.seasonal,
            };
            let target = SingleTarget::new(vintage, variant, options, None)?;
            let mle = match warm {
                Some(x) if target.log_posterior(x).is_finite() => mle_from(&target, x)?,
                _ => mle_init(&target)?,
            };
            let draws: Vec<Vec<f64>> = match &config.mcmc {
                None => vec![mle.x.clone()],
                Some(cfg) => {
                    let post = rwmh_within_gibbs(
                        &target,
                        &mle,
                        &McmcConfig {
                            seed,
                            ..cfg.clone()
                        },
                    )?;
                    post.subsample(config.posterior_draws)
                        .into_iter()
                        .map(|r| r.to_vec())
                        .collect()
                }
            };
            let reps = if config.mcmc.is_none() {
                config.reps * config.posterior_draws.max(1)
            } else {
                config.reps
            };
            let origins = draws
                .iter()
                .map(|x| {
                    let phi = target.params(x);
                    let out = filter_path_with(vintage, &phi, options)?;
                    Ok(Origin::from_filter(vintage, &phi, options, &out))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((simulate_forecast(&origins, h_max, reps, seed)?, Some(mle.x)))
        }
    }
}

/// Recursive backtest. `vintages` are ordered by as-of date; realizations
/// come from `final_data`. A model failing on a vintage is skipped there.
pub fn recursive_backtest(
    vintages: &[CompartmentSeries],
    final_data: &CompartmentSeries,
    models: &[BacktestModel],
    config: &BacktestConfig,
) -> Result<(Vec<ForecastRecord>, Vec<EvalRow>, usize)> {
    let mut records = Vec::new();
    let mut failures = 0;
    let mut warm: Vec<Option<Vec<f64>>> = vec![None; models.len()];
    for (v, vintage) in vintages.iter().enumerate() {
        if let Some(prev) = vintages.get(v.wrapping_sub(1)) {
            if prev.dates().last() >= vintage.dates().last() {
                return Err(Error::data("vintages must be ordered by as-of date"));
            }
        }
        for (j, model) in models.iter().enumerate() {
            let seed = config
                .seed
                .wrapping_add((v as u64) << 8)
                .wrapping_add(j as u64);
            let (set, x) = match forecast_vintage(vintage, model, config, warm[j].as_deref(), seed)
            {
                Ok(r) => r,
                Err(_) => {
                    failures += 1;
                    continue;
                }
            };
            if x.is_some() {
                warm[j] = x;
            }
            for &h in &config.horizons {
                let date = set.date(h);
                let Some(pos) = final_data.dates().iter().position(|d| *d == date) else {
                    continue;
                };
                if pos == 0 {
                    continue;
                }
                for (var, name) in [(0, "confirmed"), (2, "deaths")] {
                    let actual = if var == 0 {
                        final_data.delta_c()[pos - 1]
                    } else {
                        final_data.delta_d()[pos - 1]
                    };
                    records.push(ForecastRecord {
                        date,
                        horizon: h,
                        model: model.label(),
                        series: name.into(),
                        forecast: set.point(var, h),
                        actual,
                    });
                }
            }
        }
    }
    let table = evaluate(&records, &config.benchmark)?;
    Ok((records, table, failures))
}

/// RMSFE per (model, series, horizon), with ratios and DM tests against the
/// benchmark over the dates both models cover.
pub fn evaluate(records: &[ForecastRecord], benchmark: &str) -> Result<Vec<EvalRow>> {
    use std::collections::BTreeMap;
    type Key = (String, usize, String);
    let mut groups: BTreeMap<Key, BTreeMap<NaiveDate, (f64, f64)>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.series.clone(), r.horizon, r.model.clone()))
            .or_default()
            .insert(r.date, (r.forecast, r.actual));
    }
    let mut rows = Vec::new();
    for ((series, horizon, model), obs) in &groups {
        let (f, y): (Vec<f64>, Vec<f64>) = obs.values().copied().unzip();
        let mut row = EvalRow {
            model: model.clone(),
            series: series.clone(),
            horizon: *horizon,
            n: f.len(),
            rmsfe: rmsfe(&f, &y)?,
            rrmsfe: None,
            dm_stat: None,
            dm_p: None,
        };
        if let Some(bench) = groups.get(&(series.clone(), *horizon, benchmark.to_string())) {
            let common: Vec<(&(f64, f64), &(f64, f64))> = obs
                .iter()
                .filter_map(|(d, a)| bench.get(d).map(|b| (a, b)))
                .collect();
            if !common.is_empty() {
                let la: Vec<f64> = common.iter().map(|(a, _)| (a.0 - a.1).powi(2)).collect();
                let lb: Vec<f64> = common.iter().map(|(_, b)| (b.0 - b.1).powi(2)).collect();
                let ra = (la.iter().sum::<f64>() / la.len() as f64).sqrt();
                let rb = (lb.iter().sum::<f64>() / lb.len() as f64).sqrt();
                row.rrmsfe = Some(relative_rmsfe(ra, rb));
                if let Ok(dm) = dm_test(&la, &lb, *horizon) {
                    row.dm_stat = Some(dm.statistic);
                    row.dm_p = Some(dm.p_value);
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}
