//! Score-driven parameter dynamics.
//!
//! Each transformed rate `θ ∈ {ln β, logit γ, logit ν}` is the sum of a
//! random-walk level and three trigonometric harmonics with periods 7, 3.5
//! and 7/3 days. Both are pushed by the previous day's scaled score, the
//! Poisson score divided by its Fisher information:
//!
//! ```text
//! θ_t        = θ_{l,t} + Σ_j θ_{j,t}
//! θ_{l,t}    = θ_{l,t-1} + α s_{t-1}
//! θ_{j,t}    =  cos Λ_j θ_{j,t-1} + sin Λ_j θ*_{j,t-1} + ψ_j  s_{t-1}
//! θ*_{j,t}   = −sin Λ_j θ_{j,t-1} + cos Λ_j θ*_{j,t-1} + ψ*_j s_{t-1}
//! ```
//!
//! Given the static parameters the whole path is a deterministic function
//! of the data, so the likelihood is available in closed form.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{
    flow_logpmf, logistic, poisson_means, CompartmentSeries, PoissonMeans, RateTriple,
};

pub const N_HARMONICS: usize = 3;
pub const SEASON_PERIOD: f64 = 7.0;
/// Bound applied to each composite transformed rate before back-transforming.
pub const TRANSFORMED_BOUND: f64 = 30.0;

/// Index of each rate in the `[β, γ, ν]` ordering used throughout.
pub const BETA: usize = 0;
pub const GAMMA: usize = 1;
pub const NU: usize = 2;

/// Harmonic frequencies `Λ_j = 2πj/7`.
pub fn harmonic_frequencies() -> [f64; N_HARMONICS] {
    [1.0, 2.0, 3.0].map(|j| 2.0 * PI * j / SEASON_PERIOD)
}

/// One harmonic pair `(θ_j, θ*_j)`.
pub type HarmonicPair = (f64, f64);

/// Level and harmonics of one transformed parameter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamState {
    pub level: f64,
    pub harmonics: [HarmonicPair; N_HARMONICS],
}

impl ParamState {
    pub fn seasonal(&self) -> f64 {
        self.harmonics.iter().map(|h| h.0).sum()
    }

    pub fn composite(&self) -> f64 {
        self.level + self.seasonal()
    }
}

/// Time-varying state of `[ln β, logit γ, logit ν]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TvpState {
    pub params: [ParamState; 3],
}

impl TvpState {
    /// Levels at `theta_l0`, harmonics at zero.
    pub fn initial(theta_l0: [f64; 3]) -> Self {
        let mut s = TvpState::default();
        for (p, l) in s.params.iter_mut().zip(theta_l0) {
            p.level = l;
        }
        s
    }
}

/// The static parameter vector of the single-country model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticParams {
    /// Initial transformed levels `[ln β, logit γ, logit ν]`.
    pub theta_l0: [f64; 3],
    /// Score loadings of the levels.
    pub alpha: [f64; 3],
    /// `psi[param][harmonic]`.
    pub psi: [[f64; N_HARMONICS]; 3],
    pub psi_star: [[f64; N_HARMONICS]; 3],
    /// Reporting-decay constant of the mixed-frequency model.
    pub k: Option<f64>,
}

impl StaticParams {
    /// Constant-rate parameters: no score loadings and no seasonality.
    pub fn constant(rates: &RateTriple) -> Result<Self> {
        let t = crate::model::link_forward(rates)?;
        Ok(StaticParams {
            theta_l0: t.0,
            alpha: [0.0; 3],
            psi: [[0.0; N_HARMONICS]; 3],
            psi_star: [[0.0; N_HARMONICS]; 3],
            k: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .theta_l0
            .iter()
            .chain(&self.alpha)
            .chain(self.psi.iter().flatten())
            .chain(self.psi_star.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("static parameters must be finite"));
        }
        if let Some(k) = self.k {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(Error::domain(format!("k must be non-negative, got {k}")));
            }
        }
        Ok(())
    }
}

/// Scaled scores of one day.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub s_beta: f64,
    pub s_gamma: f64,
    pub s_nu: f64,
}

impl ScoreTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.s_beta, self.s_gamma, self.s_nu]
    }
}

/// The observed flows of one day; `None` marks a missing component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayObs {
    pub delta_c: f64,
    pub delta_rc: Option<f64>,
    pub delta_d: Option<f64>,
}

/// Scaled score of a log-linked Poisson intensity.
pub(crate) fn log_link_score(count: f64, mean: f64) -> f64 {
    (count - mean) / mean
}

/// Scaled score of a logit-linked rate `p` entering the intensity linearly.
pub(crate) fn logit_link_score(count: f64, mean: f64, p: f64) -> f64 {
    (count - mean) / mean / (1.0 - p)
}

fn checked_score(count: Option<f64>, mean: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    match count {
        None => Ok(0.0),
        Some(c) if mean > 0.0 => Ok(f(c)),
        Some(c) if mean == 0.0 && c == 0.0 => Ok(0.0),
        Some(c) => Err(Error::domain(format!(
            "score undefined: mean {mean} with count {c}"
        ))),
    }
}

/// Poisson scores divided by their variance, in the transformed scale.
/// Missing components get a zero score.
pub fn scaled_scores(
    obs: &DayObs,
    means: &PoissonMeans,
    rates: &RateTriple,
) -> Result<ScoreTriple> {
    Ok(ScoreTriple {
        s_beta: checked_score(Some(obs.delta_c), means.lambda1, |c| {
            log_link_score(c, means.lambda1)
        })?,
        s_gamma: checked_score(obs.delta_rc, means.lambda2, |c| {
            logit_link_score(c, means.lambda2, rates.gamma)
        })?,
        s_nu: checked_score(obs.delta_d, means.lambda3, |c| {
            logit_link_score(c, means.lambda3, rates.nu)
        })?,
    })
}

pub fn level_step(level_prev: f64, alpha: f64, score_prev: f64) -> f64 {
    level_prev + alpha * score_prev
}

/// Precomputed rotation of the three harmonic pairs.
#[derive(Debug, Clone, Copy)]
pub struct Rotation {
    cos: [f64; N_HARMONICS],
    sin: [f64; N_HARMONICS],
}

impl Default for Rotation {
    fn default() -> Self {
        let f = harmonic_frequencies();
        Rotation {
            cos: f.map(f64::cos),
            sin: f.map(f64::sin),
        }
    }
}

impl Rotation {
    pub fn step(
        &self,
        prev: &[HarmonicPair; N_HARMONICS],
        psi: &[f64; N_HARMONICS],
        psi_star: &[f64; N_HARMONICS],
        score: f64,
    ) -> [HarmonicPair; N_HARMONICS] {
        let mut out = [(0.0, 0.0); N_HARMONICS];
        for j in 0..N_HARMONICS {
            let (a, b) = prev[j];
            out[j] = (
                self.cos[j] * a + self.sin[j] * b + psi[j] * score,
                -self.sin[j] * a + self.cos[j] * b + psi_star[j] * score,
            );
        }
        out
    }
}

pub fn seasonal_step(
    harmonics_prev: &[HarmonicPair; N_HARMONICS],
    psi: &[f64; N_HARMONICS],
    psi_star: &[f64; N_HARMONICS],
    score_prev: f64,
) -> [HarmonicPair; N_HARMONICS] {
    Rotation::default().step(harmonics_prev, psi, psi_star, score_prev)
}

/// Switches shared by the filter variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterOptions {
    /// When false the seasonal component is identically zero.
    pub seasonal: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions { seasonal: true }
    }
}

/// Counters reported alongside a filtered path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    /// Composite transformed rates that hit [`TRANSFORMED_BOUND`].
    pub clamped: usize,
    /// Days with `γ_t + ν_t > 1`.
    pub gamma_nu_violations: usize,
    /// Days whose missing recoveries were imputed from the model.
    pub imputed_recoveries: usize,
}

/// The deterministic recursion of one country, shared by filtering,
/// simulation and forecasting.
#[derive(Debug, Clone)]
pub struct TvpRecursion {
    pub phi: StaticParams,
    pub options: FilterOptions,
    rotation: Rotation,
}

impl TvpRecursion {
    pub fn new(phi: StaticParams, options: FilterOptions) -> Self {
        TvpRecursion {
            phi,
            options,
            rotation: Rotation::default(),
        }
    }

    pub fn initial_state(&self) -> TvpState {
        TvpState::initial(self.phi.theta_l0)
    }

    /// Back-transformed rates of the current state.
    pub fn rates(&self, state: &TvpState, diag: &mut FilterDiagnostics) -> Result<RateTriple> {
        let mut th = [0.0; 3];
        for (k, p) in state.params.iter().enumerate() {
            let raw = if self.options.seasonal {
                p.composite()
            } else {
                p.level
            };
            th[k] = clamp_transformed(raw, diag)?;
        }
        rates_from_transformed(th, diag)
    }

    /// Moves the state one day ahead with the given scores.
    pub fn advance(&self, state: &mut TvpState, score: &ScoreTriple) {
        let s = score.as_array();
        for k in 0..3 {
            let p = &mut state.params[k];
            p.level = level_step(p.level, self.phi.alpha[k], s[k]);
            if self.options.seasonal {
                p.harmonics =
                    self.rotation
                        .step(&p.harmonics, &self.phi.psi[k], &self.phi.psi_star[k], s[k]);
            }
        }
    }
}

pub(crate) fn clamp_transformed(raw: f64, diag: &mut FilterDiagnostics) -> Result<f64> {
    if raw.is_nan() {
        return Err(Error::numeric("transformed rate is NaN"));
    }
    if raw.abs() > TRANSFORMED_BOUND {
        diag.clamped += 1;
        Ok(raw.clamp(-TRANSFORMED_BOUND, TRANSFORMED_BOUND))
    } else {
        Ok(raw)
    }
}

pub(crate) fn rates_from_transformed(
    th: [f64; 3],
    diag: &mut FilterDiagnostics,
) -> Result<RateTriple> {
    let rates = RateTriple {
        beta: th[0].exp(),
        gamma: logistic(th[1]),
        nu: logistic(th[2]),
    };
    rates.validate()?;
    if rates.gamma + rates.nu > 1.0 {
        diag.gamma_nu_violations += 1;
    }
    Ok(rates)
}

/// Filtered paths over days `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub rates: Vec<RateTriple>,
    pub means: Vec<PoissonMeans>,
    pub scores: Vec<ScoreTriple>,
    /// Composite transformed values per day.
    pub transformed: Vec<[f64; 3]>,
    /// Active infections `I_0..I_T`, with imputed recoveries where missing.
    pub i_path: Vec<f64>,
    pub s_path: Vec<f64>,
    pub loglik: f64,
    /// State for day `T + 1`, after the last score has been applied.
    pub terminal: TvpState,
    pub diagnostics: FilterDiagnostics,
}

impl FilterOutput {
    /// `eR_t = β_t (S_{t-1}/N) / (γ_t + ν_t)` per day.
    pub fn effective_reproduction(&self, n: f64) -> Vec<f64> {
        self.rates
            .iter()
            .zip(&self.s_path)
            .map(|(r, s)| r.beta * (s / n) / (r.gamma + r.nu))
            .collect()
    }
}

/// Deterministic forward pass of the single-country model.
pub fn filter_path(series: &CompartmentSeries, phi: &StaticParams) -> Result<FilterOutput> {
    filter_path_with(series, phi, FilterOptions::default())
}

pub fn filter_path_with(
    series: &CompartmentSeries,
    phi: &StaticParams,
    options: FilterOptions,
) -> Result<FilterOutput> {
    let mut rec = Recorder::with_capacity(series.n_obs());
    let (loglik, terminal, diagnostics) = run_filter(series, phi, options, Some(&mut rec))?;
    Ok(FilterOutput {
        rates: rec.rates,
        means: rec.means,
        scores: rec.scores,
        transformed: rec.transformed,
        i_path: rec.i_path,
        s_path: rec.s_path,
        loglik,
        terminal,
        diagnostics,
    })
}

/// Log-likelihood only, without recording paths.
pub fn log_likelihood(
    series: &CompartmentSeries,
    phi: &StaticParams,
    options: FilterOptions,
) -> Result<f64> {
    run_filter(series, phi, options, None).map(|r| r.0)
}

#[derive(Default)]
struct Recorder {
    rates: Vec<RateTriple>,
    means: Vec<PoissonMeans>,
    scores: Vec<ScoreTriple>,
    transformed: Vec<[f64; 3]>,
    i_path: Vec<f64>,
    s_path: Vec<f64>,
}

impl Recorder {
    fn with_capacity(n: usize) -> Self {
        Recorder {
            rates: Vec::with_capacity(n),
            means: Vec::with_capacity(n),
            scores: Vec::with_capacity(n),
            transformed: Vec::with_capacity(n),
            i_path: Vec::with_capacity(n + 1),
            s_path: Vec::with_capacity(n + 1),
        }
    }
}

fn run_filter(
    series: &CompartmentSeries,
    phi: &StaticParams,
    options: FilterOptions,
    mut rec: Option<&mut Recorder>,
) -> Result<(f64, TvpState, FilterDiagnostics)> {
    phi.validate()?;
    let recursion = TvpRecursion::new(phi.clone(), options);
    let mut state = recursion.initial_state();
    let mut diag = FilterDiagnostics::default();
    let n = series.population();
    let mut i_prev = series.i0();
    let mut s_prev = series.s()[0];
    let mut loglik = 0.0;
    if let Some(r) = rec.as_deref_mut() {
        r.i_path.push(i_prev);
        r.s_path.push(s_prev);
    }
    for t in 1..=series.n_obs() {
        let rates = recursion.rates(&state, &mut diag)?;
        let means = poisson_means(&rates, i_prev, s_prev, n);
        let obs = DayObs {
            delta_c: series.delta_c()[t - 1],
            delta_rc: series.rc_obs(t),
            delta_d: Some(series.delta_d()[t - 1]),
        };
        loglik += flow_logpmf(obs.delta_c, means.lambda1)?;
        if let Some(rc) = obs.delta_rc {
            loglik += flow_logpmf(rc, means.lambda2)?;
        }
        loglik += flow_logpmf(series.delta_d()[t - 1], means.lambda3)?;
        let score = scaled_scores(&obs, &means, &rates)?;

        let recovered = match obs.delta_rc {
            Some(rc) => rc,
            None => {
                diag.imputed_recoveries += 1;
                (rates.gamma * i_prev).round()
            }
        };
        let i_next = i_prev + obs.delta_c - recovered - series.delta_d()[t - 1];
        if i_next < 0.0 {
            return Err(Error::numeric(format!(
                "active infections negative on day {t} after imputing recoveries"
            )));
        }
        let s_next = s_prev - obs.delta_c;

        if let Some(r) = rec.as_deref_mut() {
            let th = state.params.map(|p| {
                if options.seasonal {
                    p.composite()
                } else {
                    p.level
                }
            });
            r.rates.push(rates);
            r.means.push(means);
            r.scores.push(score);
            r.transformed.push(th);
            r.i_path.push(i_next);
            r.s_path.push(s_next);
        }
        recursion.advance(&mut state, &score);
        i_prev = i_next;
        s_prev = s_next;
    }
    if !loglik.is_finite() {
        return Err(Error::numeric("log-likelihood is not finite"));
    }
    Ok((loglik, state, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{poisson_logpmf, RateTriple};
    use chrono::NaiveDate;

    fn toy_series(t: usize) -> CompartmentSeries {
        let d0 = NaiveDate::from_ymd_opt(2020, 4, 1).unwrap();
        let dates = (0..=t)
            .map(|k| d0 + chrono::Duration::days(k as i64))
            .collect();
        let dc: Vec<f64> = (0..t).map(|k| 100.0 + (k % 7) as f64 * 10.0).collect();
        let rc: Vec<Option<f64>> = (0..t).map(|k| Some(80.0 + (k % 3) as f64 * 5.0)).collect();
        let dd: Vec<f64> = (0..t).map(|k| 2.0 + (k % 2) as f64).collect();
        CompartmentSeries::new(dates, dc, rc, dd, 1e7, 2000.0).unwrap()
    }

    #[test]
    fn zero_score_at_mean() {
        let m = PoissonMeans {
            lambda1: 100.0,
            lambda2: 50.0,
            lambda3: 5.0,
        };
        let r = RateTriple::new(0.1, 0.05, 0.005).unwrap();
        let s = scaled_scores(
            &DayObs {
                delta_c: 100.0,
                delta_rc: Some(50.0),
                delta_d: Some(5.0),
            },
            &m,
            &r,
        )
        .unwrap();
        assert_eq!(s, ScoreTriple::default());
    }

    #[test]
    fn score_values() {
        let m = PoissonMeans {
            lambda1: 100.0,
            lambda2: 50.0,
            lambda3: 5.0,
        };
        let r = RateTriple::new(0.1, 0.05, 0.005).unwrap();
        let s = scaled_scores(
            &DayObs {
                delta_c: 110.0,
                delta_rc: Some(60.0),
                delta_d: None,
            },
            &m,
            &r,
        )
        .unwrap();
        assert!((s.s_beta - 0.1).abs() < 1e-15);
        assert!((s.s_gamma - 0.2 / 0.95).abs() < 1e-15);
        assert!((s.s_gamma - 0.21053).abs() < 1e-5);
        assert_eq!(s.s_nu, 0.0);
    }

    #[test]
    fn score_rejects_impossible_observation() {
        let m = PoissonMeans {
            lambda1: 0.0,
            lambda2: 1.0,
            lambda3: 1.0,
        };
        let r = RateTriple::new(0.1, 0.05, 0.005).unwrap();
        let obs = DayObs {
            delta_c: 3.0,
            delta_rc: Some(1.0),
            delta_d: Some(1.0),
        };
        assert!(scaled_scores(&obs, &m, &r).is_err());
    }

    #[test]
    fn level_recursion() {
        assert_eq!(level_step(-4.4, 0.48, 0.0), -4.4);
        assert!((level_step(-4.4, 0.48, 0.1) - (-4.352)).abs() < 1e-12);
    }

    #[test]
    fn rotation_single_step() {
        let h = seasonal_step(
            &[(1.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
            &[0.0; 3],
            &[0.0; 3],
            0.0,
        );
        assert!((h[0].0 - 0.62349).abs() < 1e-5);
        assert!((h[0].1 + 0.78183).abs() < 1e-5);
    }

    #[test]
    fn rotation_is_seven_periodic_and_norm_preserving() {
        let start = [(0.3, -0.2), (1.5, 0.7), (-0.4, 0.9)];
        let mut h = start;
        for _ in 0..7 {
            let next = seasonal_step(&h, &[0.5; 3], &[0.5; 3], 0.0);
            for j in 0..3 {
                let n0 = h[j].0.powi(2) + h[j].1.powi(2);
                let n1 = next[j].0.powi(2) + next[j].1.powi(2);
                assert!((n0 - n1).abs() < 1e-12);
            }
            h = next;
        }
        for j in 0..3 {
            assert!((h[j].0 - start[j].0).abs() < 1e-9);
            assert!((h[j].1 - start[j].1).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_parameters_nest_fixed_model() {
        let series = toy_series(60);
        let rates = RateTriple::new(0.05, 0.04, 0.001).unwrap();
        let phi = StaticParams::constant(&rates).unwrap();
        let out = filter_path(&series, &phi).unwrap();
        let mut ll = 0.0;
        for t in 1..=series.n_obs() {
            let m = poisson_means(
                &rates,
                series.i()[t - 1],
                series.s()[t - 1],
                series.population(),
            );
            ll += poisson_logpmf(series.delta_c()[t - 1], m.lambda1).unwrap()
                + poisson_logpmf(series.delta_rc()[t - 1], m.lambda2).unwrap()
                + poisson_logpmf(series.delta_d()[t - 1], m.lambda3).unwrap();
        }
        assert!((out.loglik - ll).abs() <= 1e-9 * ll.abs());
        let b0 = out.rates[0];
        assert!(out.rates.iter().all(|r| (r.beta - b0.beta).abs() < 1e-15));
        assert_eq!(out.i_path, series.i());
    }

    #[test]
    fn missing_recoveries_freeze_gamma() {
        let d0 = NaiveDate::from_ymd_opt(2020, 4, 1).unwrap();
        let t = 30;
        let dates = (0..=t)
            .map(|k| d0 + chrono::Duration::days(k as i64))
            .collect();
        let dc = (0..t).map(|k| 100.0 + k as f64).collect();
        let rc = (0..t)
            .map(|k| if k < 10 { Some(70.0) } else { None })
            .collect();
        let dd = vec![3.0; t];
        let series = CompartmentSeries::new(dates, dc, rc, dd, 1e7, 2000.0).unwrap();
        let mut phi = StaticParams::constant(&RateTriple::new(0.05, 0.04, 0.001).unwrap()).unwrap();
        phi.alpha = [0.3, 0.4, 0.2];
        phi.psi = [[0.05; 3]; 3];
        phi.psi_star = [[0.02; 3]; 3];
        let out = filter_path_with(&series, &phi, FilterOptions { seasonal: false }).unwrap();
        let g = out.rates[11].gamma;
        assert!(out.rates[11..].iter().all(|r| r.gamma == g));
        assert_eq!(out.diagnostics.imputed_recoveries, 20);
    }

    #[test]
    fn filter_is_deterministic() {
        let series = toy_series(50);
        let mut phi = StaticParams::constant(&RateTriple::new(0.05, 0.04, 0.001).unwrap()).unwrap();
        phi.alpha = [0.4, 0.3, 0.2];
        phi.psi[0] = [0.1, -0.05, 0.02];
        phi.psi_star[0] = [0.03, 0.01, -0.02];
        let a = filter_path(&series, &phi).unwrap();
        let b = filter_path(&series, &phi).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.loglik.to_bits(),
            log_likelihood(&series, &phi, FilterOptions::default())
                .unwrap()
                .to_bits()
        );
    }
}
