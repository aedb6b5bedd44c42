//! Fixed-parameter SIRD baseline.
//!
//! With constant rates each Poisson flow is conjugate to a Gamma prior; the
//! flat prior on `(0, ∞)` is the `Gamma(1, 0)` limit, so
//! `β | data ~ Gamma(ΣΔC + 1, Σ S_{t-1} I_{t-1} / N)` and likewise for γ and
//! ν with exposure `Σ I_{t-1}`. The three blocks are independent a
//! posteriori and are drawn directly.
//!
//! The rolling variant refits on a trailing window and can carry
//! multiplicative day-of-week effects, profiled out by Newton iterations.

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};
use crate::model::{CompartmentSeries, RateTriple};
use crate::sim::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPosterior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::domain(format!(
                "degenerate gamma posterior (shape {shape}, rate {rate}): exposure is zero"
            )));
        }
        Ok(GammaPosterior { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn median(&self) -> f64 {
        statrs::distribution::Gamma::new(self.shape, self.rate)
            .map(|g| g.inverse_cdf(0.5))
            .unwrap_or(f64::NAN)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Gamma::new(self.shape, 1.0 / self.rate)
            .expect("validated gamma parameters")
            .sample(rng)
    }
}

/// Posteriors of the three rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPosterior {
    pub beta: GammaPosterior,
    pub gamma: GammaPosterior,
    pub nu: GammaPosterior,
}

impl FixedPosterior {
    pub fn medians(&self) -> RateTriple {
        RateTriple {
            beta: self.beta.median(),
            gamma: self.gamma.median(),
            nu: self.nu.median(),
        }
    }

    /// One draw; γ and ν are redrawn until they fall inside (0,1).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RateTriple {
        let unit = |g: &GammaPosterior, rng: &mut R| {
            for _ in 0..1000 {
                let v = g.sample(rng);
                if v > 0.0 && v < 1.0 {
                    return v;
                }
            }
            g.mean().clamp(1e-12, 1.0 - 1e-12)
        };
        let beta = self.beta.sample(rng).max(f64::MIN_POSITIVE);
        let gamma = unit(&self.gamma, rng);
        let nu = unit(&self.nu, rng);
        RateTriple { beta, gamma, nu }
    }
}

/// Retained draws of the fixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDraws {
    pub posterior: FixedPosterior,
    pub draws: Vec<RateTriple>,
}

/// Flow totals and exposures of the three Poisson blocks, with optional
/// per-day exposure weights.
#[derive(Debug, Clone)]
struct Exposures {
    /// `[ΔC, ΔRc, ΔD]` per day; missing recoveries are `None`.
    counts: Vec<[Option<f64>; 3]>,
    /// `[S I / N, I, I]` per day.
    exposure: Vec<[f64; 3]>,
}

impl Exposures {
    /// Active infections are rebuilt with recoveries imputed on missing days
    /// at the running ratio estimate of γ.
    fn from_series(series: &CompartmentSeries) -> Self {
        let n = series.population();
        let mut i_prev = series.i0();
        let mut s_prev = series.s()[0];
        let (mut rc_sum, mut rc_exp) = (0.0, 0.0);
        let mut counts = Vec::with_capacity(series.n_obs());
        let mut exposure = Vec::with_capacity(series.n_obs());
        for t in 1..=series.n_obs() {
            let c = series.delta_c()[t - 1];
            let d = series.delta_d()[t - 1];
            let rc = series.rc_obs(t);
            counts.push([Some(c), rc, Some(d)]);
            exposure.push([s_prev * i_prev / n, i_prev, i_prev]);
            let recovered = match rc {
                Some(r) => {
                    rc_sum += r;
                    rc_exp += i_prev;
                    r
                }
                None if rc_exp > 0.0 => (rc_sum / rc_exp * i_prev).round(),
                None => 0.0,
            };
            i_prev = (i_prev + c - recovered - d).max(0.0);
            s_prev -= c;
        }
        Exposures { counts, exposure }
    }

    fn posterior(&self, weights: Option<&[f64]>) -> Result<FixedPosterior> {
        let mut shape = [1.0; 3];
        let mut rate = [0.0; 3];
        for (t, (c, e)) in self.counts.iter().zip(&self.exposure).enumerate() {
            let w = weights.map_or(1.0, |w| w[t]);
            for j in 0..3 {
                if let Some(x) = c[j] {
                    shape[j] += x;
                    rate[j] += w * e[j];
                }
            }
        }
        Ok(FixedPosterior {
            beta: GammaPosterior::new(shape[0], rate[0])?,
            gamma: GammaPosterior::new(shape[1], rate[1])?,
            nu: GammaPosterior::new(shape[2], rate[2])?,
        })
    }
}

/// Exact conjugate posterior of the fixed model.
pub fn fixed_posterior(series: &CompartmentSeries) -> Result<FixedPosterior> {
    if series.n_obs() < 1 {
        return Err(Error::data("fixed model needs at least one observed day"));
    }
    Exposures::from_series(series).posterior(None)
}

/// Direct sampling of the conjugate posterior.
pub fn gibbs_fixed(series: &CompartmentSeries, draws: usize, seed: u64) -> Result<FixedDraws> {
    let posterior = fixed_posterior(series)?;
    let mut rng = rng_from_seed(seed);
    let draws = (0..draws).map(|_| posterior.sample(&mut rng)).collect();
    Ok(FixedDraws { posterior, draws })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_len: usize,
    pub dow_effects: bool,
}

impl WindowConfig {
    pub fn new(window_len: usize, dow_effects: bool) -> Result<Self> {
        let c = WindowConfig {
            window_len,
            dow_effects,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 1 {
            return Err(Error::config("window length must be positive"));
        }
        if self.dow_effects && self.window_len < 8 {
            return Err(Error::config(
                "day-of-week effects need a window of at least 8 days",
            ));
        }
        Ok(())
    }
}

/// Rolling-window fit ending at `t_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingFit {
    pub posterior: FixedPosterior,
    /// Log multipliers indexed Monday..Sunday, summing to zero.
    pub dow: Option<[f64; 7]>,
    pub converged: bool,
    pub iterations: usize,
    /// First and last observed day of the window (1-based, inclusive).
    pub days: (usize, usize),
}

impl RollingFit {
    pub fn dow_multiplier(&self, date: NaiveDate) -> f64 {
        self.dow
            .map(|d| d[weekday_index(date)].exp())
            .unwrap_or(1.0)
    }
}

pub(crate) fn weekday_index(date: NaiveDate) -> usize {
    date.weekday().num_days_from_monday() as usize
}

const NEWTON_MAX_ITER: usize = 100;

/// Fits the fixed model on days `t_end − M + 1 ..= t_end`.
pub fn fit_rolling(
    series: &CompartmentSeries,
    config: &WindowConfig,
    t_end: usize,
) -> Result<RollingFit> {
    config.validate()?;
    let m = config.window_len;
    if t_end < m || t_end > series.n_obs() {
        return Err(Error::data(format!(
            "window of {m} days ending on day {t_end} does not fit {} observed days",
            series.n_obs()
        )));
    }
    let window = series.window(t_end - m, t_end)?;
    let exposures = Exposures::from_series(&window);
    if !config.dow_effects {
        return Ok(RollingFit {
            posterior: exposures.posterior(None)?,
            dow: None,
            converged: true,
            iterations: 0,
            days: (t_end - m + 1, t_end),
        });
    }
    let weekdays: Vec<usize> = window.dates()[1..]
        .iter()
        .map(|d| weekday_index(*d))
        .collect();
    let (dow, converged, iterations) = profile_dow(&exposures, &weekdays);
    let weights: Vec<f64> = weekdays.iter().map(|&k| dow[k].exp()).collect();
    Ok(RollingFit {
        posterior: exposures.posterior(Some(&weights))?,
        dow: Some(dow),
        converged,
        iterations,
        days: (t_end - m + 1, t_end),
    })
}

/// Maximizes the profile log-likelihood
/// `Σ_j [Σ_k X_jk d_k − X_j ln Σ_k e^{d_k} E_jk]` over sum-to-zero effects.
fn profile_dow(ex: &Exposures, weekdays: &[usize]) -> ([f64; 7], bool, usize) {
    // X_jk and E_jk aggregated by weekday
    let mut x = [[0.0; 7]; 3];
    let mut e = [[0.0; 7]; 3];
    for (t, &k) in weekdays.iter().enumerate() {
        for j in 0..3 {
            if let Some(c) = ex.counts[t][j] {
                x[j][k] += c;
                e[j][k] += ex.exposure[t][j];
            }
        }
    }
    let objective = |d: &[f64; 7]| -> f64 {
        let mut v = 0.0;
        for j in 0..3 {
            let xj: f64 = x[j].iter().sum();
            let w: f64 = (0..7).map(|k| d[k].exp() * e[j][k]).sum();
            if xj > 0.0 && w > 0.0 {
                v += (0..7).map(|k| x[j][k] * d[k]).sum::<f64>() - xj * w.ln();
            }
        }
        v
    };
    let expand = |u: &DVector<f64>| -> [f64; 7] {
        let mut d = [0.0; 7];
        for k in 0..6 {
            d[k] = u[k];
        }
        d[6] = -u.iter().sum::<f64>();
        d
    };
    // d = A u with A = [I_6; −1ᵀ]
    let mut a = DMatrix::zeros(7, 6);
    for k in 0..6 {
        a[(k, k)] = 1.0;
        a[(6, k)] = -1.0;
    }
    let mut u = DVector::zeros(6);
    for iter in 1..=NEWTON_MAX_ITER {
        let d = expand(&u);
        let mut g = DVector::zeros(7);
        let mut h = DMatrix::zeros(7, 7);
        for j in 0..3 {
            let xj: f64 = x[j].iter().sum();
            let w: f64 = (0..7).map(|k| d[k].exp() * e[j][k]).sum();
            if xj <= 0.0 || w <= 0.0 {
                continue;
            }
            let p: Vec<f64> = (0..7).map(|k| d[k].exp() * e[j][k] / w).collect();
            for k in 0..7 {
                g[k] += x[j][k] - xj * p[k];
                for l in 0..7 {
                    let delta = if k == l { p[k] } else { 0.0 };
                    h[(k, l)] -= xj * (delta - p[k] * p[l]);
                }
            }
        }
        let gu = a.transpose() * &g;
        let hu = a.transpose() * &h * &a;
        let Some(step) = (-hu).cholesky().map(|c| c.solve(&gu)) else {
            return (d, false, iter);
        };
        let f0 = objective(&d);
        let mut scale = 1.0;
        let mut next = &u + &step * scale;
        while objective(&expand(&next)) < f0 - 1e-12 * f0.abs().max(1.0) && scale > 1e-8 {
            scale *= 0.5;
            next = &u + &step * scale;
        }
        u = next;
        if step.amax() * scale < 1e-10 || gu.amax() < 1e-9 {
            return (expand(&u), true, iter);
        }
    }
    (expand(&u), false, NEWTON_MAX_ITER)
}
