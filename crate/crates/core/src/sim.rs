//! Synthetic data drawn from the exact model law, with the latent rate
//! paths kept for recovery checks.

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{self, FactorParams, Panel};
use crate::mixed::{self, TestingSeries, WeeklyDeaths};
use crate::model::{poisson_means, CompartmentSeries, RateTriple};
use crate::score::{
    scaled_scores, DayObs, FilterDiagnostics, FilterOptions, StaticParams, TvpRecursion,
};

/// Daily test-positivity path used by mixed-frequency simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoPath {
    Constant(f64),
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period: f64,
    },
    /// One value per date, `T + 1` entries.
    Values(Vec<f64>),
}

impl RhoPath {
    /// Positivity on day `t`, quantized to what `TESTS_PER_DAY` tests can
    /// report so simulated and re-loaded data agree exactly.
    pub fn at(&self, t: usize) -> f64 {
        let raw = match self {
            RhoPath::Constant(r) => *r,
            RhoPath::Sinusoid {
                mean,
                amplitude,
                period,
            } => mean + amplitude * (2.0 * std::f64::consts::PI * t as f64 / period).sin(),
            RhoPath::Values(v) => v[t.min(v.len() - 1)],
        };
        (raw.clamp(0.0, 1.0) * TESTS_PER_DAY).round() / TESTS_PER_DAY
    }
}

/// Daily number of tests written by simulations with a positivity path.
pub const TESTS_PER_DAY: f64 = 1_000_000.0;

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).unwrap()
}

fn default_true() -> bool {
    true
}

/// Specification of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub phi: StaticParams,
    /// Observed days `T`.
    pub days: usize,
    pub population: f64,
    pub i0: f64,
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
    #[serde(default = "default_true")]
    pub seasonal: bool,
    /// Positivity path; with `phi.k` set this switches to the
    /// mixed-frequency law.
    #[serde(default)]
    pub rho: Option<RhoPath>,
    /// Multiplicative day-of-week effects on all three intensities, in logs,
    /// indexed Monday..Sunday.
    #[serde(default)]
    pub dow_log_effects: Option<[f64; 7]>,
    /// Recoveries are unreported from this day on.
    #[serde(default)]
    pub missing_rc_from: Option<usize>,
    #[serde(default)]
    pub factor: Option<FactorSimSpec>,
}

/// Extra specification for a multi-country panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSimSpec {
    pub params: FactorParams,
    pub names: Vec<String>,
    pub populations: Vec<f64>,
    pub i0: Vec<f64>,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        self.phi.validate()?;
        if self.days < 30 {
            return Err(Error::config("simulations need at least 30 days"));
        }
        if !(self.population > 0.0) || !(self.i0 > 0.0 && self.i0 < self.population) {
            return Err(Error::config("need 0 < i0 < population"));
        }
        if self.phi.k.is_some() != self.rho.is_some() {
            return Err(Error::config(
                "mixed-frequency simulation needs both k and rho",
            ));
        }
        if let Some(f) = &self.factor {
            let k = f.params.countries.len();
            if k < 1 || f.names.len() != k || f.populations.len() != k || f.i0.len() != k {
                return Err(Error::config(
                    "factor spec lists must match the number of countries",
                ));
            }
            f.params.validate()?;
        }
        Ok(())
    }
}

/// Synthetic single-country dataset with its latent truth.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub series: CompartmentSeries,
    pub true_rates: Vec<RateTriple>,
    pub testing: Option<TestingSeries>,
    pub weekly: Option<WeeklyDeaths>,
    /// True when `I_t` hit zero before `T` and the output was truncated.
    pub extinct: bool,
}

/// Synthetic multi-country panel.
#[derive(Debug, Clone)]
pub struct PanelSimOutput {
    pub panel: Panel,
    pub true_rates: Vec<Vec<RateTriple>>,
    pub common_level: Vec<f64>,
    pub extinct: bool,
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn draw_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    match Poisson::new(mean) {
        Ok(d) => d.sample(rng),
        Err(_) => mean.round(),
    }
}

pub(crate) fn draw_binomial<R: Rng + ?Sized>(rng: &mut R, n: f64, p: f64) -> f64 {
    if n <= 0.0 || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n as u64, p)
        .map(|d| d.sample(rng) as f64)
        .unwrap_or((n * p).round())
}

pub(crate) fn dates_from(start: NaiveDate, days: usize) -> Vec<NaiveDate> {
    (0..=days)
        .map(|k| start + chrono::Duration::days(k as i64))
        .collect()
}

/// Single-country simulation (TVP or mixed-frequency law, depending on the
/// spec).
pub fn simulate(spec: &SimSpec, seed: u64) -> Result<SimOutput> {
    spec.validate()?;
    if spec.factor.is_some() {
        return Err(Error::config(
            "use simulate_panel for factor specifications",
        ));
    }
    let mut rng = rng_from_seed(seed);
    if spec.phi.k.is_some() {
        return mixed::simulate_mf(spec, &mut rng);
    }
    let recursion = TvpRecursion::new(
        spec.phi.clone(),
        FilterOptions {
            seasonal: spec.seasonal,
        },
    );
    let mut state = recursion.initial_state();
    let mut diag = FilterDiagnostics::default();
    let n = spec.population;
    let dates = dates_from(spec.start_date, spec.days);
    let (mut i_prev, mut s_prev) = (spec.i0, n - spec.i0);
    let mut dc = Vec::with_capacity(spec.days);
    let mut rc = Vec::with_capacity(spec.days);
    let mut dd = Vec::with_capacity(spec.days);
    let mut true_rates = Vec::with_capacity(spec.days);
    let mut extinct = false;
    for t in 1..=spec.days {
        let rates = recursion.rates(&state, &mut diag)?;
        let means = poisson_means(&rates, i_prev, s_prev, n);
        let mult = spec
            .dow_log_effects
            .map(|d| d[dates[t].weekday().num_days_from_monday() as usize].exp())
            .unwrap_or(1.0);
        let c = draw_poisson(&mut rng, means.lambda1 * mult).min(s_prev);
        let r = draw_poisson(&mut rng, means.lambda2 * mult);
        let d = draw_poisson(&mut rng, means.lambda3 * mult);
        let (r, d) = if i_prev + c - r - d < 0.0 {
            // keep the compartment non-negative; deaths first
            let d = d.min(i_prev + c);
            (i_prev + c - d, d)
        } else {
            (r, d)
        };
        let obs = DayObs {
            delta_c: c,
            delta_rc: Some(r),
            delta_d: Some(d),
        };
        let score = scaled_scores(&obs, &means, &rates)?;
        recursion.advance(&mut state, &score);
        let hidden = spec.missing_rc_from.is_some_and(|m| t >= m);
        dc.push(c);
        rc.push(if hidden { None } else { Some(r) });
        dd.push(d);
        true_rates.push(rates);
        i_prev += c - r - d;
        s_prev -= c;
        if i_prev <= 0.0 {
            extinct = true;
            break;
        }
    }
    let used = dc.len();
    let series = CompartmentSeries::new(dates[..=used].to_vec(), dc, rc, dd, n, spec.i0)?;
    Ok(SimOutput {
        series,
        true_rates,
        testing: None,
        weekly: None,
        extinct,
    })
}

/// Multi-country panel simulation from the factor law.
pub fn simulate_panel(spec: &SimSpec, seed: u64) -> Result<PanelSimOutput> {
    spec.validate()?;
    let f = spec
        .factor
        .as_ref()
        .ok_or_else(|| Error::config("simulate_panel needs a factor specification"))?;
    let mut rng = rng_from_seed(seed);
    factor::simulate_factor(f, spec.days, spec.start_date, spec.seasonal, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RateTriple;

    fn spec(alpha: [f64; 3]) -> SimSpec {
        let mut phi = StaticParams::constant(&RateTriple::new(0.1, 0.08, 0.01).unwrap()).unwrap();
        phi.alpha = alpha;
        SimSpec {
            phi,
            days: 200,
            population: 1e8,
            i0: 20_000.0,
            start_date: default_start(),
            seasonal: true,
            rho: None,
            dow_log_effects: None,
            missing_rc_from: None,
            factor: None,
        }
    }

    #[test]
    fn constant_truth_without_loadings() {
        let out = simulate(&spec([0.0; 3]), 1).unwrap();
        let r0 = out.true_rates[0];
        assert!(out.true_rates.iter().all(|r| *r == r0));
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate(&spec([0.3, 0.2, 0.1]), 7).unwrap();
        let b = simulate(&spec([0.3, 0.2, 0.1]), 7).unwrap();
        assert_eq!(a.series, b.series);
        let c = simulate(&spec([0.3, 0.2, 0.1]), 8).unwrap();
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn poisson_moments_at_constant_rates() {
        // Hold I and S fixed by balancing flows: compare day counts with a
        // Poisson mean/variance oracle.
        let mut s = spec([0.0; 3]);
        s.days = 1000;
        s.phi = StaticParams::constant(&RateTriple::new(0.09, 0.08, 0.01).unwrap()).unwrap();
        s.population = 1e12;
        s.i0 = 1e4;
        let out = simulate(&s, 3).unwrap();
        let ser = &out.series;
        let z: Vec<f64> = (0..ser.n_obs())
            .map(|k| {
                let lam = 0.09 * ser.s()[k] * ser.i()[k] / ser.population();
                (ser.delta_c()[k] - lam) / lam.sqrt()
            })
            .collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 3.0 / n.sqrt(), "standardized mean {mean}");
        assert!(
            (var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(),
            "standardized variance {var}"
        );
    }

    #[test]
    fn rejects_short_specs() {
        let mut s = spec([0.0; 3]);
        s.days = 10;
        assert!(simulate(&s, 1).is_err());
    }
}
