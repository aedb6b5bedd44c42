//! Domain types and likelihood kernels shared by every model variant.
//!
//! The discretized SIRD law treats the three daily flows as conditionally
//! independent Poisson counts given yesterday's compartments:
//!
//! ```text
//! ΔC_t  ~ Poisson(β S_{t-1} I_{t-1} / N)
//! ΔRc_t ~ Poisson(γ I_{t-1})
//! ΔD_t  ~ Poisson(ν I_{t-1})
//! I_t   = I_{t-1} + ΔC_t − ΔRc_t − ΔD_t
//! ```
//!
//! Rates live on their natural scale in [`RateTriple`] and on the
//! unconstrained scale (log β, logit γ, logit ν) in [`Transformed`].

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Infection, recovery and death rates per day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTriple {
    pub beta: f64,
    pub gamma: f64,
    pub nu: f64,
}

impl RateTriple {
    pub fn new(beta: f64, gamma: f64, nu: f64) -> Result<Self> {
        let r = RateTriple { beta, gamma, nu };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::domain(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::domain(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::domain(format!(
                "nu must lie in (0,1), got {}",
                self.nu
            )));
        }
        Ok(())
    }

    /// Basic reproduction rate β / (γ + ν).
    pub fn r0(&self) -> f64 {
        self.beta / (self.gamma + self.nu)
    }
}

/// Rates on the unconstrained scale: `[ln β, logit γ, logit ν]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transformed(pub [f64; 3]);

/// Poisson intensities of the three daily flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonMeans {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl PoissonMeans {
    pub fn total(&self) -> f64 {
        self.lambda1 + self.lambda2 + self.lambda3
    }
}

pub fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn link_forward(raw: &RateTriple) -> Result<Transformed> {
    raw.validate()?;
    Ok(Transformed([
        raw.beta.ln(),
        logit(raw.gamma),
        logit(raw.nu),
    ]))
}

/// Inverse of [`link_forward`]. Any finite input maps to valid rates except
/// where the logistic saturates to exactly 0 or 1 in floating point.
pub fn link_backward(t: &Transformed) -> Result<RateTriple> {
    let [b, g, n] = t.0;
    RateTriple::new(b.exp(), logistic(g), logistic(n))
}

pub fn poisson_means(rates: &RateTriple, i_prev: f64, s_prev: f64, n: f64) -> PoissonMeans {
    PoissonMeans {
        lambda1: rates.beta * s_prev * i_prev / n,
        lambda2: rates.gamma * i_prev,
        lambda3: rates.nu * i_prev,
    }
}

/// Poisson log-density extended to real-valued counts through the Gamma
/// function: `count·ln(mean) − mean − lnΓ(count + 1)`.
pub fn poisson_logpmf(count: f64, mean: f64) -> Result<f64> {
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::domain(format!(
            "poisson mean must be > 0, got {mean}"
        )));
    }
    if !(count >= 0.0) || !count.is_finite() {
        return Err(Error::domain(format!(
            "poisson count must be >= 0, got {count}"
        )));
    }
    Ok(count * mean.ln() - mean - ln_gamma(count + 1.0))
}

/// Log-density of one flow given its intensity. A zero intensity is allowed
/// only with a zero count (the compartment is empty).
pub(crate) fn flow_logpmf(count: f64, mean: f64) -> Result<f64> {
    if mean == 0.0 {
        if count == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::domain(format!(
            "zero poisson mean with positive count {count}"
        )));
    }
    poisson_logpmf(count, mean)
}

/// Conditional mean and variance of `I_t` given `Ω_{t-1}`, the law of a
/// Skellam-type difference of independent Poisson flows.
pub fn skellam_conditional_moments(
    rates: &RateTriple,
    i_prev: f64,
    s_prev: f64,
    n: f64,
) -> (f64, f64) {
    let m = poisson_means(rates, i_prev, s_prev, n);
    (i_prev + m.lambda1 - m.lambda2 - m.lambda3, m.total())
}

/// Growth factor `π = 1 + β(1 − R0⁻¹)` of expected active infections when
/// `S/N ≈ 1`.
pub fn growth_factor(rates: &RateTriple) -> f64 {
    1.0 + rates.beta * (1.0 - 1.0 / rates.r0())
}

/// Unconditional mean and variance of `I_t` from a known `I_0`, assuming the
/// susceptible share stays close to one.
pub fn unconditional_moments(rates: &RateTriple, i0: f64, t: u32) -> (f64, f64) {
    let pi = growth_factor(rates);
    let c = rates.beta * (1.0 + 1.0 / rates.r0());
    let mean = pi.powi(t as i32) * i0;
    if t == 0 {
        return (i0, 0.0);
    }
    let var = if (pi - 1.0).abs() < 1e-12 {
        c * t as f64 * i0
    } else {
        c * pi.powi(t as i32 - 1) * (1.0 - pi.powi(t as i32)) / (1.0 - pi) * i0
    };
    (mean, var)
}

pub fn effective_reproduction(rates: &RateTriple, s: f64, n: f64) -> Result<f64> {
    let out = rates.gamma + rates.nu;
    if !(out > 0.0) {
        return Err(Error::domain("gamma + nu must be positive"));
    }
    Ok(rates.beta * (s / n) / out)
}

/// Aligned daily compartment panel for one country.
///
/// `dates[0]` is the initial-condition day; flows are indexed by day
/// `t = 1..=T` and stored at position `t - 1`. `i` and `s` hold `I_0..I_T`
/// and `S_0..S_T`. Missing recoveries count as zero in the stored identity.
#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentSeries {
    dates: Vec<NaiveDate>,
    delta_c: Vec<f64>,
    delta_rc: Vec<f64>,
    delta_d: Vec<f64>,
    missing_rc: Vec<bool>,
    population: f64,
    i: Vec<f64>,
    s: Vec<f64>,
}

impl CompartmentSeries {
    /// Builds the series and the derived `I`, `S` paths, checking every
    /// invariant. `dates` has one more entry than each flow vector.
    pub fn new(
        dates: Vec<NaiveDate>,
        delta_c: Vec<f64>,
        delta_rc: Vec<Option<f64>>,
        delta_d: Vec<f64>,
        population: f64,
        i0: f64,
    ) -> Result<Self> {
        let t = delta_c.len();
        if delta_rc.len() != t || delta_d.len() != t {
            return Err(Error::data("flow vectors must have equal length"));
        }
        if dates.len() != t + 1 {
            return Err(Error::data(format!(
                "expected {} dates for {} days of flows, got {}",
                t + 1,
                t,
                dates.len()
            )));
        }
        for w in dates.windows(2) {
            if (w[1] - w[0]).num_days() != 1 {
                return Err(Error::data(format!(
                    "dates must be consecutive days: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        if !(population > 0.0 && population.is_finite()) {
            return Err(Error::data("population must be positive"));
        }
        if !(i0 >= 0.0 && i0 <= population) {
            return Err(Error::data(format!(
                "initial infections {i0} outside [0, N]"
            )));
        }
        let check = |name: &str, v: f64, day: usize| -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::data(format!(
                    "{name} on day {day} must be a non-negative count, got {v}"
                )))
            }
        };
        let missing_rc: Vec<bool> = delta_rc.iter().map(Option::is_none).collect();
        let delta_rc: Vec<f64> = delta_rc.into_iter().map(|r| r.unwrap_or(0.0)).collect();
        let mut i = Vec::with_capacity(t + 1);
        let mut s = Vec::with_capacity(t + 1);
        i.push(i0);
        s.push(population - i0);
        for day in 0..t {
            check("confirmed", delta_c[day], day + 1)?;
            check("recovered", delta_rc[day], day + 1)?;
            check("deaths", delta_d[day], day + 1)?;
            let next_i = i[day] + delta_c[day] - delta_rc[day] - delta_d[day];
            let next_s = s[day] - delta_c[day];
            if next_i < 0.0 {
                return Err(Error::data(format!(
                    "active infections become negative on day {} ({})",
                    day + 1,
                    dates[day + 1]
                )));
            }
            if next_s < 0.0 {
                return Err(Error::data(format!(
                    "susceptibles become negative on day {}",
                    day + 1
                )));
            }
            i.push(next_i);
            s.push(next_s);
        }
        Ok(CompartmentSeries {
            dates,
            delta_c,
            delta_rc,
            delta_d,
            missing_rc,
            population,
            i,
            s,
        })
    }

    /// Number of dates, including the initial-condition day.
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Number of observed days `T`.
    pub fn n_obs(&self) -> usize {
        self.delta_c.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn delta_c(&self) -> &[f64] {
        &self.delta_c
    }

    /// Recoveries with missing days reported as zero; see [`Self::missing_rc`].
    pub fn delta_rc(&self) -> &[f64] {
        &self.delta_rc
    }

    pub fn delta_d(&self) -> &[f64] {
        &self.delta_d
    }

    pub fn missing_rc(&self) -> &[bool] {
        &self.missing_rc
    }

    pub fn has_missing_rc(&self) -> bool {
        self.missing_rc.iter().any(|&m| m)
    }

    /// Recovery observation of day `t` (1-based), `None` when missing.
    pub fn rc_obs(&self, t: usize) -> Option<f64> {
        (!self.missing_rc[t - 1]).then(|| self.delta_rc[t - 1])
    }

    pub fn population(&self) -> f64 {
        self.population
    }

    pub fn i0(&self) -> f64 {
        self.i[0]
    }

    pub fn i(&self) -> &[f64] {
        &self.i
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    /// Sub-series over days `start..=end`, with day `start` as the new
    /// initial condition.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_obs() {
            return Err(Error::data(format!(
                "invalid window {start}..={end} for a series with {} days",
                self.n_obs()
            )));
        }
        let rc = (start..end)
            .map(|k| (!self.missing_rc[k]).then(|| self.delta_rc[k]))
            .collect();
        let mut out = CompartmentSeries::new(
            self.dates[start..=end].to_vec(),
            self.delta_c[start..end].to_vec(),
            rc,
            self.delta_d[start..end].to_vec(),
            self.population,
            self.i[start],
        )?;
        // keep the original susceptible level rather than N − I_start
        let offset = self.s[start] - out.s[0];
        for v in &mut out.s {
            *v += offset;
        }
        Ok(out)
    }

    /// Sets `S_0` (for instance `N` minus cumulative confirmed cases) and
    /// shifts the whole susceptible path with it.
    pub fn with_initial_susceptible(mut self, s0: f64) -> Result<Self> {
        let offset = s0 - self.s[0];
        if !(s0 >= 0.0 && s0 <= self.population) || self.s.iter().any(|v| v + offset < 0.0) {
            return Err(Error::data(format!(
                "initial susceptibles {s0} inconsistent with the series"
            )));
        }
        for v in &mut self.s {
            *v += offset;
        }
        Ok(self)
    }

    /// Leading sub-series up to and including day `end`.
    pub fn truncate(&self, end: usize) -> Result<Self> {
        self.window(0, end)
    }
}
