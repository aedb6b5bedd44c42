//! Multi-country model with a common factor in the level of the infection
//! rate. Country `i` has `β̃_{i,t} = τ_i θ_t + θ̂_{i,t} + seasonal_{i,t}`;
//! recovery and death rates stay idiosyncratic.

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{flow_logpmf, poisson_means, CompartmentSeries, PoissonMeans, RateTriple};
use crate::score::{
    clamp_transformed, rates_from_transformed, scaled_scores, DayObs, FilterDiagnostics,
    FilterOptions, ScoreTriple, StaticParams, TvpRecursion, TvpState, BETA,
};
use crate::sim::{dates_from, draw_poisson, FactorSimSpec, PanelSimOutput};

/// Countries observed on a common date grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    countries: Vec<CompartmentSeries>,
    names: Vec<String>,
}

impl Panel {
    pub fn new(countries: Vec<CompartmentSeries>, names: Vec<String>) -> Result<Self> {
        if countries.is_empty() {
            return Err(Error::data("panel needs at least one country"));
        }
        if names.len() != countries.len() {
            return Err(Error::data("one name per country is required"));
        }
        let dates = countries[0].dates();
        if let Some((k, _)) = countries
            .iter()
            .enumerate()
            .find(|(_, c)| c.dates() != dates)
        {
            return Err(Error::data(format!(
                "country {} is not on the common date grid",
                names[k]
            )));
        }
        Ok(Panel { countries, names })
    }

    pub fn countries(&self) -> &[CompartmentSeries] {
        &self.countries
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn k(&self) -> usize {
        self.countries.len()
    }

    pub fn n_obs(&self) -> usize {
        self.countries[0].n_obs()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        self.countries[0].dates()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.countries.iter().map(|c| c.population()).collect()
    }

    pub fn truncate(&self, end: usize) -> Result<Self> {
        let countries = self
            .countries
            .iter()
            .map(|c| c.truncate(end))
            .collect::<Result<_>>()?;
        Panel::new(countries, self.names.clone())
    }
}

/// Static parameters of the factor model. Each country's `theta_l0[BETA]`
/// is the initial idiosyncratic level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorParams {
    pub countries: Vec<StaticParams>,
    /// `τ_1..τ_K`, with `τ_1 = 1`.
    pub loadings: Vec<f64>,
    pub alpha_common: f64,
    /// Fixed initial condition of the common level.
    pub common_l0: f64,
}

impl FactorParams {
    pub fn validate(&self) -> Result<()> {
        if self.countries.is_empty() || self.loadings.len() != self.countries.len() {
            return Err(Error::config("one loading per country is required"));
        }
        if self.loadings[0] != 1.0 {
            return Err(Error::domain("the first loading is normalized to 1"));
        }
        if !self.loadings.iter().all(|t| t.is_finite())
            || !self.alpha_common.is_finite()
            || !self.common_l0.is_finite()
        {
            return Err(Error::domain("factor parameters must be finite"));
        }
        for p in &self.countries {
            p.validate()?;
            if p.k.is_some() {
                return Err(Error::config("the factor model has no reporting constant"));
            }
        }
        Ok(())
    }
}

/// Link of the rate carrying the common factor.
#[derive(Debug, Clone, Copy)]
pub enum CommonLink<'a> {
    /// Log link, as for `β`.
    Log,
    /// Logit link with per-country rates, as for `γ` and `ν`.
    Logit(&'a [f64]),
}

/// Scaled score of the common level: the summed country scores divided by
/// the summed Fisher information.
pub fn common_score(
    counts: &[f64],
    means: &[f64],
    loadings: &[f64],
    link: CommonLink<'_>,
) -> Result<f64> {
    let k = counts.len();
    if means.len() != k || loadings.len() != k {
        return Err(Error::domain(
            "common score inputs must have one entry per country",
        ));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        if !(means[i] > 0.0) {
            return Err(Error::domain(format!(
                "country {i}: mean must be positive, got {}",
                means[i]
            )));
        }
        let shrink = match link {
            CommonLink::Log => 1.0,
            CommonLink::Logit(p) => 1.0 - p[i],
        };
        num += (counts[i] - means[i]) * shrink * loadings[i];
        den += means[i] * (shrink * loadings[i]).powi(2);
    }
    if !(den > 0.0) {
        return Err(Error::domain("common score has zero information"));
    }
    Ok(num / den)
}

/// Joint state of the panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    pub common: f64,
    pub countries: Vec<TvpState>,
}

/// Deterministic recursion of the panel, shared by filtering, simulation
/// and forecasting.
#[derive(Debug, Clone)]
pub struct FactorRecursion {
    pub params: FactorParams,
    recursions: Vec<TvpRecursion>,
}

impl FactorRecursion {
    pub fn new(params: FactorParams, options: FilterOptions) -> Self {
        let recursions = params
            .countries
            .iter()
            .map(|p| TvpRecursion::new(p.clone(), options))
            .collect();
        FactorRecursion { params, recursions }
    }

    pub fn initial_state(&self) -> FactorState {
        FactorState {
            common: self.params.common_l0,
            countries: self.recursions.iter().map(|r| r.initial_state()).collect(),
        }
    }

    pub fn rates(
        &self,
        state: &FactorState,
        i: usize,
        diag: &mut FilterDiagnostics,
    ) -> Result<RateTriple> {
        let seasonal = self.recursions[i].options.seasonal;
        let mut th = [0.0; 3];
        for (k, p) in state.countries[i].params.iter().enumerate() {
            let mut raw = if seasonal { p.composite() } else { p.level };
            if k == BETA {
                raw += self.params.loadings[i] * state.common;
            }
            th[k] = clamp_transformed(raw, diag)?;
        }
        rates_from_transformed(th, diag)
    }

    /// Advances every country with its own scores and the common level with
    /// the score pooled from the day's infections.
    pub fn advance(
        &self,
        state: &mut FactorState,
        scores: &[ScoreTriple],
        counts: &[f64],
        means: &[f64],
    ) -> Result<()> {
        let s = if means.iter().all(|&m| m > 0.0) {
            common_score(counts, means, &self.params.loadings, CommonLink::Log)?
        } else {
            0.0
        };
        for (i, r) in self.recursions.iter().enumerate() {
            r.advance(&mut state.countries[i], &scores[i]);
        }
        state.common += self.params.alpha_common * s;
        Ok(())
    }
}

/// Per-country paths, days `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CountryPath {
    pub rates: Vec<RateTriple>,
    pub means: Vec<PoissonMeans>,
    pub i_path: Vec<f64>,
    pub s_path: Vec<f64>,
    pub loglik: f64,
}

impl CountryPath {
    pub fn effective_reproduction(&self, n: f64) -> Vec<f64> {
        self.rates
            .iter()
            .zip(&self.s_path)
            .map(|(r, s)| r.beta * (s / n) / (r.gamma + r.nu))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorFilterOutput {
    pub countries: Vec<CountryPath>,
    /// Common level `θ_t` in effect on days `1..=T`.
    pub common: Vec<f64>,
    pub loglik: f64,
    pub terminal: FactorState,
    pub diagnostics: FilterDiagnostics,
}

pub fn factor_filter_path(
    panel: &Panel,
    params: &FactorParams,
    options: FilterOptions,
) -> Result<FactorFilterOutput> {
    run_factor(panel, params, options, true)
}

pub fn factor_log_likelihood(
    panel: &Panel,
    params: &FactorParams,
    options: FilterOptions,
) -> Result<f64> {
    run_factor(panel, params, options, false).map(|o| o.loglik)
}

fn run_factor(
    panel: &Panel,
    params: &FactorParams,
    options: FilterOptions,
    record: bool,
) -> Result<FactorFilterOutput> {
    params.validate()?;
    if params.countries.len() != panel.k() {
        return Err(Error::config(format!(
            "parameters for {} countries, panel has {}",
            params.countries.len(),
            panel.k()
        )));
    }
    let rec = FactorRecursion::new(params.clone(), options);
    let mut state = rec.initial_state();
    let mut diag = FilterDiagnostics::default();
    let k = panel.k();
    let mut i_prev: Vec<f64> = panel.countries().iter().map(|c| c.i0()).collect();
    let mut s_prev: Vec<f64> = panel.countries().iter().map(|c| c.s()[0]).collect();
    let mut paths: Vec<CountryPath> = (0..k)
        .map(|i| CountryPath {
            rates: Vec::new(),
            means: Vec::new(),
            i_path: vec![i_prev[i]],
            s_path: vec![s_prev[i]],
            loglik: 0.0,
        })
        .collect();
    let mut common = Vec::new();
    let mut scores = vec![ScoreTriple::default(); k];
    let mut counts = vec![0.0; k];
    let mut lam1 = vec![0.0; k];
    for t in 1..=panel.n_obs() {
        for (i, c) in panel.countries().iter().enumerate() {
            let rates = rec.rates(&state, i, &mut diag)?;
            let means = poisson_means(&rates, i_prev[i], s_prev[i], c.population());
            let obs = DayObs {
                delta_c: c.delta_c()[t - 1],
                delta_rc: c.rc_obs(t),
                delta_d: Some(c.delta_d()[t - 1]),
            };
            let mut ll = flow_logpmf(obs.delta_c, means.lambda1)?
                + flow_logpmf(c.delta_d()[t - 1], means.lambda3)?;
            if let Some(rc) = obs.delta_rc {
                ll += flow_logpmf(rc, means.lambda2)?;
            }
            paths[i].loglik += ll;
            scores[i] = scaled_scores(&obs, &means, &rates)?;
            counts[i] = obs.delta_c;
            lam1[i] = means.lambda1;
            let recovered = match obs.delta_rc {
                Some(rc) => rc,
                None => {
                    diag.imputed_recoveries += 1;
                    (rates.gamma * i_prev[i]).round()
                }
            };
            let i_next = i_prev[i] + obs.delta_c - recovered - obs.delta_d.unwrap_or(0.0);
            if i_next < 0.0 {
                return Err(Error::numeric(format!(
                    "{}: active infections negative on day {t}",
                    panel.names()[i]
                )));
            }
            i_prev[i] = i_next;
            s_prev[i] -= obs.delta_c;
            if record {
                paths[i].rates.push(rates);
                paths[i].means.push(means);
                paths[i].i_path.push(i_next);
                paths[i].s_path.push(s_prev[i]);
            }
        }
        if record {
            common.push(state.common);
        }
        rec.advance(&mut state, &scores, &counts, &lam1)?;
    }
    // summed in country order so the total is reproducible
    let loglik = paths.iter().map(|p| p.loglik).fold(0.0, |a, b| a + b);
    if !loglik.is_finite() {
        return Err(Error::numeric("log-likelihood is not finite"));
    }
    Ok(FactorFilterOutput {
        countries: paths,
        common,
        loglik,
        terminal: state,
        diagnostics: diag,
    })
}

pub(crate) fn simulate_factor<R: Rng + ?Sized>(
    spec: &FactorSimSpec,
    days: usize,
    start: NaiveDate,
    seasonal: bool,
    rng: &mut R,
) -> Result<PanelSimOutput> {
    let rec = FactorRecursion::new(spec.params.clone(), FilterOptions { seasonal });
    let mut state = rec.initial_state();
    let mut diag = FilterDiagnostics::default();
    let k = spec.names.len();
    let mut i_prev = spec.i0.clone();
    let mut s_prev: Vec<f64> = spec
        .populations
        .iter()
        .zip(&spec.i0)
        .map(|(n, i)| n - i)
        .collect();
    let mut flows = vec![(Vec::new(), Vec::new(), Vec::new()); k];
    let mut true_rates = vec![Vec::new(); k];
    let mut common_level = Vec::new();
    let mut scores = vec![ScoreTriple::default(); k];
    let mut counts = vec![0.0; k];
    let mut lam1 = vec![0.0; k];
    let mut extinct = false;
    'days: for _ in 1..=days {
        for i in 0..k {
            let rates = rec.rates(&state, i, &mut diag)?;
            let means = poisson_means(&rates, i_prev[i], s_prev[i], spec.populations[i]);
            let c = draw_poisson(rng, means.lambda1).min(s_prev[i]);
            let mut r = draw_poisson(rng, means.lambda2);
            let mut d = draw_poisson(rng, means.lambda3);
            if i_prev[i] + c - r - d < 0.0 {
                d = d.min(i_prev[i] + c);
                r = i_prev[i] + c - d;
            }
            let obs = DayObs {
                delta_c: c,
                delta_rc: Some(r),
                delta_d: Some(d),
            };
            scores[i] = scaled_scores(&obs, &means, &rates)?;
            counts[i] = c;
            lam1[i] = means.lambda1;
            flows[i].0.push(c);
            flows[i].1.push(Some(r));
            flows[i].2.push(d);
            true_rates[i].push(rates);
            i_prev[i] += c - r - d;
            s_prev[i] -= c;
        }
        common_level.push(state.common);
        rec.advance(&mut state, &scores, &counts, &lam1)?;
        if i_prev.iter().any(|&v| v <= 0.0) {
            extinct = true;
            break 'days;
        }
    }
    let used = common_level.len();
    let dates = dates_from(start, used);
    let countries = flows
        .into_iter()
        .enumerate()
        .map(|(i, (c, r, d))| {
            CompartmentSeries::new(dates.clone(), c, r, d, spec.populations[i], spec.i0[i])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PanelSimOutput {
        panel: Panel::new(countries, spec.names.clone())?,
        true_rates,
        common_level,
        extinct,
    })
}
