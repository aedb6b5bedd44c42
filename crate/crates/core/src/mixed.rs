//! Mixed-frequency extension with unreported infections.
//!
//! Reported flows are inflated by `1/(1 − δ_t) = exp(k ρ_t)`, where `ρ_t`
//! is the daily test positivity. Deaths enter only through weekly totals
//! (reported plus excess deaths) released on days `t = 7, 14, …`; the death
//! score is zero on every other day, so `ν_t` moves in weekly steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{flow_logpmf, CompartmentSeries, RateTriple};
use crate::score::{
    log_link_score, logit_link_score, FilterDiagnostics, FilterOptions, ScoreTriple, StaticParams,
    TvpRecursion, TvpState, NU,
};
use crate::sim::{dates_from, draw_binomial, draw_poisson, SimOutput, SimSpec, TESTS_PER_DAY};

/// Length of the death-release cycle in days.
pub const WEEK: usize = 7;

/// Daily tests and positives aligned with the dates of a series (`T + 1`
/// entries, day 0 first).
#[derive(Debug, Clone, PartialEq)]
pub struct TestingSeries {
    tests: Vec<f64>,
    positives: Vec<f64>,
    rho: Vec<Option<f64>>,
    carried_forward: usize,
}

impl TestingSeries {
    /// Days without tests inherit the last observed positivity.
    pub fn new(tests: Vec<f64>, positives: Vec<f64>) -> Result<Self> {
        if tests.len() != positives.len() {
            return Err(Error::data("tests and positives must have equal length"));
        }
        let mut rho = Vec::with_capacity(tests.len());
        let mut last = None;
        let mut carried_forward = 0;
        for (day, (&n, &p)) in tests.iter().zip(&positives).enumerate() {
            if n.is_nan() || p.is_nan() || n <= 0.0 {
                if last.is_some() {
                    carried_forward += 1;
                }
                rho.push(last);
                continue;
            }
            if p < 0.0 || p > n {
                return Err(Error::data(format!(
                    "day {day}: positives {p} outside [0, tests = {n}]"
                )));
            }
            last = Some(p / n);
            rho.push(last);
        }
        Ok(TestingSeries {
            tests,
            positives,
            rho,
            carried_forward,
        })
    }

    /// Builds a series directly from positivity fractions.
    pub fn from_rho(rho: &[f64]) -> Result<Self> {
        let tests = vec![TESTS_PER_DAY; rho.len()];
        let positives = rho.iter().map(|r| r * TESTS_PER_DAY).collect();
        Self::new(tests, positives)
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn tests(&self) -> &[f64] {
        &self.tests
    }

    pub fn positives(&self) -> &[f64] {
        &self.positives
    }

    /// Positivity per date after carry-forward; `None` before the first test.
    pub fn rho(&self) -> &[Option<f64>] {
        &self.rho
    }

    pub fn carried_forward(&self) -> usize {
        self.carried_forward
    }
}

/// Weekly death totals on the release grid `t = 7k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeeklyDeaths {
    release_days: Vec<usize>,
    reported: Vec<f64>,
    excess: Vec<f64>,
    floored: usize,
}

impl WeeklyDeaths {
    /// `excess[t - 1]` holds any excess-death value dated on day `t`;
    /// values are summed into the grid week containing their day. Only
    /// complete weeks are released. Negative excess is floored at zero.
    pub fn from_daily(series: &CompartmentSeries, excess: &[Option<f64>]) -> Result<Self> {
        if excess.len() != series.n_obs() {
            return Err(Error::data(
                "excess deaths must be aligned with the observed days",
            ));
        }
        let weeks = series.n_obs() / WEEK;
        let mut reported = vec![0.0; weeks];
        let mut ex = vec![0.0; weeks];
        for t in 1..=weeks * WEEK {
            let w = (t - 1) / WEEK;
            reported[w] += series.delta_d()[t - 1];
            if let Some(e) = excess[t - 1] {
                ex[w] += e;
            }
        }
        let mut floored = 0;
        for e in &mut ex {
            if *e < 0.0 {
                *e = 0.0;
                floored += 1;
            }
        }
        Ok(WeeklyDeaths {
            release_days: (1..=weeks).map(|w| w * WEEK).collect(),
            reported,
            excess: ex,
            floored,
        })
    }

    pub fn release_days(&self) -> &[usize] {
        &self.release_days
    }

    pub fn reported(&self) -> &[f64] {
        &self.reported
    }

    pub fn excess(&self) -> &[f64] {
        &self.excess
    }

    pub fn totals(&self) -> Vec<f64> {
        self.reported
            .iter()
            .zip(&self.excess)
            .map(|(r, e)| r + e)
            .collect()
    }

    /// Weeks whose negative excess was floored.
    pub fn floored(&self) -> usize {
        self.floored
    }

    /// Total deaths released on day `t`, if `t` is a release day.
    pub fn total_on(&self, t: usize) -> Option<f64> {
        if t == 0 || t % WEEK != 0 {
            return None;
        }
        let w = t / WEEK - 1;
        (w < self.reported.len()).then(|| self.reported[w] + self.excess[w])
    }
}

/// Fraction of infections missed by testing, `δ = 1 − exp(−kρ)`.
pub fn underreporting_fraction(rho: f64, k: f64) -> f64 {
    -(-k * rho).exp_m1()
}

/// `1 / (1 − δ) = exp(kρ)`.
pub fn inflation_factor(rho: f64, k: f64) -> f64 {
    (k * rho).exp()
}

/// Daily deaths subtracted when rebuilding `I*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathAllocation {
    /// `ν_t I*_{t-1}`, the model-implied daily deaths.
    #[default]
    ModelImplied,
    /// The reported daily deaths.
    Reported,
}

/// Total-infection version of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct StarredSeries {
    pub delta_c: Vec<f64>,
    pub delta_rc: Vec<Option<f64>>,
    /// `I*_0..I*_T`.
    pub i: Vec<f64>,
    pub s: Vec<f64>,
    /// `exp(kρ_t)` for days `0..=T`.
    pub inflation: Vec<f64>,
}

fn inflation_path(series: &CompartmentSeries, testing: &TestingSeries, k: f64) -> Result<Vec<f64>> {
    if testing.len() != series.len() {
        return Err(Error::data(format!(
            "testing series has {} days, expected {}",
            testing.len(),
            series.len()
        )));
    }
    (0..series.len())
        .map(|t| match testing.rho()[t] {
            Some(r) => Ok(inflation_factor(r, k)),
            None => {
                let needed = if t == 0 {
                    series.i0() > 0.0
                } else {
                    series.delta_c()[t - 1] > 0.0
                };
                if needed && k != 0.0 {
                    Err(Error::data(format!(
                        "no test positivity available on day {t}"
                    )))
                } else {
                    Ok(1.0)
                }
            }
        })
        .collect()
}

/// Death path used by [`inflate_series`].
#[derive(Debug, Clone, Copy)]
pub enum DailyDeaths<'a> {
    Reported,
    /// `ν_t` for days `1..=T`.
    ModelImplied(&'a [f64]),
}

/// Inflates the reported flows and rebuilds `I*`, `S*` from
/// `ΔC* = −ΔS* = ΔI* + ΔRc* + ΔD̄`.
pub fn inflate_series(
    series: &CompartmentSeries,
    testing: &TestingSeries,
    k: f64,
    deaths: DailyDeaths<'_>,
) -> Result<StarredSeries> {
    let inflation = inflation_path(series, testing, k)?;
    let mut i = vec![series.i0() * inflation[0]];
    let mut s = vec![series.s()[0] - (i[0] - series.i0())];
    let mut dc = Vec::with_capacity(series.n_obs());
    let mut drc = Vec::with_capacity(series.n_obs());
    for t in 1..=series.n_obs() {
        let m = inflation[t];
        let c = series.delta_c()[t - 1] * m;
        let rc = series.rc_obs(t).map(|r| r * m);
        let d = match deaths {
            DailyDeaths::Reported => series.delta_d()[t - 1],
            DailyDeaths::ModelImplied(nu) => nu[t - 1] * i[t - 1],
        };
        i.push(i[t - 1] + c - rc.unwrap_or(0.0) - d);
        s.push(s[t - 1] - c);
        dc.push(c);
        drc.push(rc);
    }
    Ok(StarredSeries {
        delta_c: dc,
        delta_rc: drc,
        i,
        s,
        inflation,
    })
}

/// Weekly-death mean `λ̄3 = ν Σ_{s=t-6}^{t} I*_{s-1}`.
pub fn weekly_death_mean(i_star_window: &[f64], nu: f64) -> f64 {
    nu * i_star_window.iter().sum::<f64>()
}

/// Scaled death score on a release day.
pub fn weekly_death_score(total_weekly: f64, i_star_window: &[f64], nu: f64) -> Result<f64> {
    let lam = weekly_death_mean(i_star_window, nu);
    if !(lam > 0.0) {
        return Err(Error::domain(format!(
            "weekly death mean must be positive, got {lam}"
        )));
    }
    Ok(logit_link_score(total_weekly, lam, nu))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfOptions {
    pub seasonal: bool,
    pub deaths: DeathAllocation,
}

impl Default for MfOptions {
    fn default() -> Self {
        MfOptions {
            seasonal: true,
            deaths: DeathAllocation::ModelImplied,
        }
    }
}

/// Paths of the mixed-frequency filter, days `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfFilterOutput {
    pub rates: Vec<RateTriple>,
    pub scores: Vec<ScoreTriple>,
    pub i_star: Vec<f64>,
    pub s_star: Vec<f64>,
    /// `exp(kρ_t)`, days `0..=T`.
    pub inflation: Vec<f64>,
    /// `(release day, λ̄3)`.
    pub weekly_means: Vec<(usize, f64)>,
    pub loglik: f64,
    pub terminal: TvpState,
    pub diagnostics: FilterDiagnostics,
}

impl MfFilterOutput {
    pub fn effective_reproduction(&self, n: f64) -> Vec<f64> {
        self.rates
            .iter()
            .zip(&self.s_star)
            .map(|(r, s)| r.beta * (s / n) / (r.gamma + r.nu))
            .collect()
    }
}

/// Parameters with the death-rate harmonics switched off: a weekly
/// observed rate cannot carry a within-week pattern.
pub(crate) fn mf_params(phi: &StaticParams) -> StaticParams {
    let mut p = phi.clone();
    p.psi[NU] = [0.0; 3];
    p.psi_star[NU] = [0.0; 3];
    p
}

pub fn mf_filter_path(
    series: &CompartmentSeries,
    testing: &TestingSeries,
    weekly: &WeeklyDeaths,
    phi: &StaticParams,
    options: MfOptions,
) -> Result<MfFilterOutput> {
    run_mf(series, testing, weekly, phi, options, true)
}

pub fn mf_log_likelihood(
    series: &CompartmentSeries,
    testing: &TestingSeries,
    weekly: &WeeklyDeaths,
    phi: &StaticParams,
    options: MfOptions,
) -> Result<f64> {
    run_mf(series, testing, weekly, phi, options, false).map(|o| o.loglik)
}

fn run_mf(
    series: &CompartmentSeries,
    testing: &TestingSeries,
    weekly: &WeeklyDeaths,
    phi: &StaticParams,
    options: MfOptions,
    record: bool,
) -> Result<MfFilterOutput> {
    phi.validate()?;
    let k = phi
        .k
        .ok_or_else(|| Error::config("mixed-frequency model needs k"))?;
    let inflation = inflation_path(series, testing, k)?;
    let recursion = TvpRecursion::new(
        mf_params(phi),
        FilterOptions {
            seasonal: options.seasonal,
        },
    );
    let mut state = recursion.initial_state();
    let mut diag = FilterDiagnostics::default();
    let n = series.population();
    let mut i_prev = series.i0() * inflation[0];
    let mut s_prev = series.s()[0] - (i_prev - series.i0());
    let cap = if record { series.n_obs() } else { 0 };
    let mut out = MfFilterOutput {
        rates: Vec::with_capacity(cap),
        scores: Vec::with_capacity(cap),
        i_star: vec![i_prev],
        s_star: vec![s_prev],
        inflation: Vec::new(),
        weekly_means: Vec::new(),
        loglik: 0.0,
        terminal: state,
        diagnostics: diag,
    };
    let mut week_exposure = 0.0;
    let mut loglik = 0.0;
    for t in 1..=series.n_obs() {
        let m = inflation[t];
        let rates = recursion.rates(&state, &mut diag)?;
        let lam1 = rates.beta * s_prev * i_prev / n;
        let lam2 = rates.gamma * i_prev;
        let c = series.delta_c()[t - 1] * m;
        let rc = series.rc_obs(t).map(|r| r * m);
        loglik += flow_logpmf(c, lam1)?;
        let mut score = ScoreTriple::default();
        if lam1 > 0.0 {
            score.s_beta = log_link_score(c, lam1);
        }
        if let Some(r) = rc {
            loglik += flow_logpmf(r, lam2)?;
            if lam2 > 0.0 {
                score.s_gamma = logit_link_score(r, lam2, rates.gamma);
            }
        }
        week_exposure += i_prev;
        if t % WEEK == 0 {
            if let Some(total) = weekly.total_on(t) {
                let lam3 = rates.nu * week_exposure;
                loglik += flow_logpmf(total, lam3)?;
                if lam3 > 0.0 {
                    score.s_nu = logit_link_score(total, lam3, rates.nu);
                }
                if record {
                    out.weekly_means.push((t, lam3));
                }
            }
            week_exposure = 0.0;
        }
        let recovered = match rc {
            Some(r) => r,
            None => {
                diag.imputed_recoveries += 1;
                rates.gamma * i_prev
            }
        };
        let deaths = match options.deaths {
            DeathAllocation::ModelImplied => rates.nu * i_prev,
            DeathAllocation::Reported => series.delta_d()[t - 1],
        };
        let i_next = i_prev + c - recovered - deaths;
        if !(i_next >= 0.0) {
            return Err(Error::numeric(format!(
                "total active infections negative on day {t}"
            )));
        }
        let s_next = s_prev - c;
        if record {
            out.rates.push(rates);
            out.scores.push(score);
            out.i_star.push(i_next);
            out.s_star.push(s_next);
        }
        recursion.advance(&mut state, &score);
        i_prev = i_next;
        s_prev = s_next;
    }
    if !loglik.is_finite() {
        return Err(Error::numeric("log-likelihood is not finite"));
    }
    out.loglik = loglik;
    out.terminal = state;
    out.diagnostics = diag;
    if record {
        out.inflation = inflation;
    } else {
        out.i_star.clear();
        out.s_star.clear();
    }
    Ok(out)
}

/// Mixed-frequency simulation: true flows are Poisson in the starred
/// compartments; reported flows are the deflated true flows, reported
/// deaths a binomial thinning of true deaths, the remainder released as
/// weekly excess.
pub(crate) fn simulate_mf<R: Rng + ?Sized>(spec: &SimSpec, rng: &mut R) -> Result<SimOutput> {
    let k = spec.phi.k.expect("validated");
    let rho_path = spec.rho.as_ref().expect("validated");
    let rho: Vec<f64> = (0..=spec.days).map(|t| rho_path.at(t)).collect();
    let recursion = TvpRecursion::new(
        mf_params(&spec.phi),
        FilterOptions {
            seasonal: spec.seasonal,
        },
    );
    let mut state = recursion.initial_state();
    let mut diag = FilterDiagnostics::default();
    let n = spec.population;
    let mut i_prev = spec.i0 * inflation_factor(rho[0], k);
    let mut s_prev = n - i_prev;
    let (mut dc, mut rc, mut dd) = (Vec::new(), Vec::new(), Vec::new());
    let mut excess = vec![None; spec.days];
    let mut true_rates = Vec::new();
    let (mut week_exposure, mut week_deaths, mut week_reported) = (0.0, 0.0, 0.0);
    let mut extinct = false;
    for t in 1..=spec.days {
        let m = inflation_factor(rho[t], k);
        let rates = recursion.rates(&state, &mut diag)?;
        let lam1 = rates.beta * s_prev * i_prev / n;
        let lam2 = rates.gamma * i_prev;
        let c_star = draw_poisson(rng, lam1).min(s_prev);
        let r_star = draw_poisson(rng, lam2);
        let d_true = draw_poisson(rng, rates.nu * i_prev);
        let d_rep = draw_binomial(rng, d_true, 1.0 / m);
        week_exposure += i_prev;
        week_deaths += d_true;
        week_reported += d_rep;
        let mut score = ScoreTriple {
            s_beta: if lam1 > 0.0 {
                log_link_score(c_star, lam1)
            } else {
                0.0
            },
            s_gamma: if lam2 > 0.0 {
                logit_link_score(r_star, lam2, rates.gamma)
            } else {
                0.0
            },
            s_nu: 0.0,
        };
        if t % WEEK == 0 {
            let lam3 = rates.nu * week_exposure;
            if lam3 > 0.0 {
                score.s_nu = logit_link_score(week_deaths, lam3, rates.nu);
            }
            excess[t - 1] = Some(week_deaths - week_reported);
            week_exposure = 0.0;
            week_deaths = 0.0;
            week_reported = 0.0;
        }
        recursion.advance(&mut state, &score);
        let hidden = spec.missing_rc_from.is_some_and(|h| t >= h);
        dc.push(c_star / m);
        rc.push(if hidden { None } else { Some(r_star / m) });
        dd.push(d_rep);
        true_rates.push(rates);
        i_prev += c_star - r_star - rates.nu * i_prev;
        s_prev -= c_star;
        if i_prev <= 0.0 {
            extinct = true;
            break;
        }
    }
    let used = dc.len();
    let dates = dates_from(spec.start_date, used);
    let series = CompartmentSeries::new(dates, dc, rc, dd, n, spec.i0)?;
    let testing = TestingSeries::from_rho(&rho[..=used])?;
    excess.truncate(used);
    let weekly = WeeklyDeaths::from_daily(&series, &excess)?;
    Ok(SimOutput {
        series,
        true_rates,
        testing: Some(testing),
        weekly: Some(weekly),
        extinct,
    })
}
