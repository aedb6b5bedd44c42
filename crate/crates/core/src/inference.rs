//! Posterior simulation of the static parameters: a quasi-Newton mode as
//! the starting point, then adaptive random-walk Metropolis-Hastings
//! within Gibbs over parameter blocks. Priors are flat on the transformed
//! scale, except `k > 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{factor_log_likelihood, FactorParams, Panel};
use crate::mixed::{
    inflate_series, mf_log_likelihood, DailyDeaths, DeathAllocation, MfOptions, TestingSeries,
    WeeklyDeaths,
};
use crate::model::{logit, CompartmentSeries};
use crate::score::{log_likelihood, FilterOptions, StaticParams, BETA, GAMMA, NU, N_HARMONICS};
use crate::sim::rng_from_seed;

const RATE_NAMES: [&str; 3] = ["beta", "gamma", "nu"];

/// Days used for the method-of-moments starting levels.
pub const MOM_WINDOW: usize = 14;

/// Reporting constants tried when starting a mixed-frequency fit.
const START_K_GRID: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Which parameters are free in a single-country fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Only the initial levels: constant rates.
    Constant,
    Tvp,
    /// Only `β` varies; `γ` and `ν` keep their initial levels.
    TvpBeta,
    /// Mixed-frequency model with `k`; the death-rate harmonics are off.
    Mf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Alpha(usize),
    Theta(usize),
    Psi(usize, usize),
    PsiStar(usize, usize),
    K,
    Loading,
    AlphaCommon,
}

/// Position of one sampled value inside the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub country: usize,
    pub kind: SlotKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Free parameters of a model, their names and their Gibbs blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub slots: Vec<Slot>,
    pub names: Vec<String>,
    pub blocks: Vec<Block>,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    fn push_block(&mut self, name: String, items: Vec<(Slot, String)>) {
        if items.is_empty() {
            return;
        }
        let start = self.slots.len();
        for (slot, n) in items {
            self.slots.push(slot);
            self.names.push(n);
        }
        self.blocks.push(Block {
            name,
            indices: (start..self.slots.len()).collect(),
        });
    }

    fn push_country(
        &mut self,
        country: usize,
        prefix: &str,
        variant: ModelVariant,
        seasonal: bool,
    ) {
        let varying: &[usize] = match variant {
            ModelVariant::Constant => &[],
            ModelVariant::TvpBeta => &[BETA],
            ModelVariant::Tvp => &[BETA, GAMMA, NU],
            ModelVariant::Mf => &[BETA, GAMMA, NU],
        };
        let slot = |kind| Slot { country, kind };
        let alpha = varying
            .iter()
            .map(|&p| {
                (
                    slot(SlotKind::Alpha(p)),
                    format!("{prefix}alpha_{}", RATE_NAMES[p]),
                )
            })
            .collect();
        self.push_block(format!("{prefix}alpha"), alpha);
        let theta = (0..3)
            .map(|p| {
                (
                    slot(SlotKind::Theta(p)),
                    format!("{prefix}theta_l0_{}", RATE_NAMES[p]),
                )
            })
            .collect();
        self.push_block(format!("{prefix}theta_l0"), theta);
        if !seasonal {
            return;
        }
        let harmonic: Vec<usize> = varying
            .iter()
            .copied()
            .filter(|&p| !(variant == ModelVariant::Mf && p == NU))
            .collect();
        for star in [false, true] {
            for &p in &harmonic {
                let tag = if star { "psi_star" } else { "psi" };
                let items = (0..N_HARMONICS)
                    .map(|j| {
                        let kind = if star {
                            SlotKind::PsiStar(p, j)
                        } else {
                            SlotKind::Psi(p, j)
                        };
                        (
                            slot(kind),
                            format!("{prefix}{tag}_{}_{}", j + 1, RATE_NAMES[p]),
                        )
                    })
                    .collect();
                self.push_block(format!("{prefix}{tag}_{}", RATE_NAMES[p]), items);
            }
        }
    }

    pub fn single(variant: ModelVariant, seasonal: bool) -> Self {
        let mut l = ParamLayout {
            slots: Vec::new(),
            names: Vec::new(),
            blocks: Vec::new(),
        };
        l.push_country(0, "", variant, seasonal);
        if variant == ModelVariant::Mf {
            l.push_block(
                "k".into(),
                vec![(
                    Slot {
                        country: 0,
                        kind: SlotKind::K,
                    },
                    "k".into(),
                )],
            );
        }
        l
    }

    pub fn factor(names: &[String], seasonal: bool) -> Self {
        let mut l = ParamLayout {
            slots: Vec::new(),
            names: Vec::new(),
            blocks: Vec::new(),
        };
        for (i, n) in names.iter().enumerate() {
            l.push_country(i, &format!("{n}:"), ModelVariant::Tvp, seasonal);
        }
        let loadings = (1..names.len())
            .map(|i| {
                (
                    Slot {
                        country: i,
                        kind: SlotKind::Loading,
                    },
                    format!("tau_{}", names[i]),
                )
            })
            .collect();
        l.push_block("loadings".into(), loadings);
        l.push_block(
            "common".into(),
            vec![(
                Slot {
                    country: 0,
                    kind: SlotKind::AlphaCommon,
                },
                "alpha_common".into(),
            )],
        );
        l
    }

    fn write(p: &mut StaticParams, kind: SlotKind, v: f64) {
        match kind {
            SlotKind::Alpha(i) => p.alpha[i] = v,
            SlotKind::Theta(i) => p.theta_l0[i] = v,
            SlotKind::Psi(i, j) => p.psi[i][j] = v,
            SlotKind::PsiStar(i, j) => p.psi_star[i][j] = v,
            SlotKind::K => p.k = Some(v),
            SlotKind::Loading | SlotKind::AlphaCommon => {
                unreachable!("factor slot in country parameters")
            }
        }
    }

    fn read(p: &StaticParams, kind: SlotKind) -> f64 {
        match kind {
            SlotKind::Alpha(i) => p.alpha[i],
            SlotKind::Theta(i) => p.theta_l0[i],
            SlotKind::Psi(i, j) => p.psi[i][j],
            SlotKind::PsiStar(i, j) => p.psi_star[i][j],
            SlotKind::K => p.k.unwrap_or(0.0),
            SlotKind::Loading | SlotKind::AlphaCommon => {
                unreachable!("factor slot in country parameters")
            }
        }
    }

    /// Frozen entries are zero.
    pub fn decode_single(&self, x: &[f64]) -> StaticParams {
        let mut p = zero_params();
        for (s, &v) in self.slots.iter().zip(x) {
            Self::write(&mut p, s.kind, v);
        }
        p
    }

    pub fn encode_single(&self, p: &StaticParams) -> Vec<f64> {
        self.slots.iter().map(|s| Self::read(p, s.kind)).collect()
    }

    pub fn decode_factor(&self, x: &[f64], k: usize, common_l0: f64) -> FactorParams {
        let mut f = FactorParams {
            countries: vec![zero_params(); k],
            loadings: vec![1.0; k],
            alpha_common: 0.0,
            common_l0,
        };
        for (s, &v) in self.slots.iter().zip(x) {
            match s.kind {
                SlotKind::Loading => f.loadings[s.country] = v,
                SlotKind::AlphaCommon => f.alpha_common = v,
                kind => Self::write(&mut f.countries[s.country], kind, v),
            }
        }
        f
    }

    pub fn encode_factor(&self, f: &FactorParams) -> Vec<f64> {
        self.slots
            .iter()
            .map(|s| match s.kind {
                SlotKind::Loading => f.loadings[s.country],
                SlotKind::AlphaCommon => f.alpha_common,
                kind => Self::read(&f.countries[s.country], kind),
            })
            .collect()
    }

    /// Prior support: `k` must be positive.
    pub fn admissible(&self, x: &[f64]) -> bool {
        self.slots
            .iter()
            .zip(x)
            .all(|(s, &v)| v.is_finite() && (s.kind != SlotKind::K || v > 0.0))
    }
}

fn zero_params() -> StaticParams {
    StaticParams {
        theta_l0: [0.0; 3],
        alpha: [0.0; 3],
        psi: [[0.0; N_HARMONICS]; 3],
        psi_star: [[0.0; N_HARMONICS]; 3],
        k: None,
    }
}

/// A log-likelihood over a [`ParamLayout`].
pub trait Target: Sync {
    fn layout(&self) -> &ParamLayout;
    fn log_likelihood(&self, x: &[f64]) -> Result<f64>;
    /// Deterministic starting point for the optimizer.
    fn start(&self) -> Result<Vec<f64>>;

    /// Flat prior: the log-likelihood on the support, `-inf` elsewhere or
    /// where the likelihood cannot be evaluated.
    fn log_posterior(&self, x: &[f64]) -> f64 {
        if !self.layout().admissible(x) {
            return f64::NEG_INFINITY;
        }
        match self.log_likelihood(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Weekly data for a mixed-frequency fit.
#[derive(Debug, Clone, Copy)]
pub struct MfInputs<'a> {
    pub testing: &'a TestingSeries,
    pub weekly: &'a WeeklyDeaths,
    pub deaths: DeathAllocation,
}

/// Single-country target.
#[derive(Debug, Clone)]
pub struct SingleTarget<'a> {
    pub series: &'a CompartmentSeries,
    pub mf: Option<MfInputs<'a>>,
    pub variant: ModelVariant,
    pub options: FilterOptions,
    layout: ParamLayout,
}

impl<'a> SingleTarget<'a> {
    pub fn new(
        series: &'a CompartmentSeries,
        variant: ModelVariant,
        options: FilterOptions,
        mf: Option<MfInputs<'a>>,
    ) -> Result<Self> {
        if (variant == ModelVariant::Mf) != mf.is_some() {
            return Err(Error::config(
                "the mixed-frequency variant needs testing and weekly death data",
            ));
        }
        Ok(SingleTarget {
            series,
            mf,
            variant,
            options,
            layout: ParamLayout::single(variant, options.seasonal),
        })
    }

    pub fn params(&self, x: &[f64]) -> StaticParams {
        self.layout.decode_single(x)
    }
}

impl Target for SingleTarget<'_> {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let p = self.params(x);
        match &self.mf {
            None => log_likelihood(self.series, &p, self.options),
            Some(m) => mf_log_likelihood(
                self.series,
                m.testing,
                m.weekly,
                &p,
                MfOptions {
                    seasonal: self.options.seasonal,
                    deaths: m.deaths,
                },
            ),
        }
    }

    fn start(&self) -> Result<Vec<f64>> {
        let mut p = zero_params();
        for s in &self.layout.slots {
            if let SlotKind::Alpha(i) = s.kind {
                p.alpha[i] = 0.1;
            }
        }
        let Some(m) = &self.mf else {
            p.theta_l0 = moment_levels(self.series)?;
            return Ok(self.layout.encode_single(&p));
        };
        // the model-implied death allocation can exhaust the infected pool
        // late in the sample for some k, so keep the best feasible one
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in START_K_GRID {
            p.k = Some(k);
            p.theta_l0 = mf_moment_levels(self.series, m.testing, m.weekly, k)?;
            let x = self.layout.encode_single(&p);
            let lp = self.log_posterior(&x);
            if lp.is_finite() && best.as_ref().is_none_or(|b| lp > b.0) {
                best = Some((lp, x));
            }
        }
        match best {
            Some((_, x)) => Ok(x),
            None => {
                p.k = Some(1.0);
                p.theta_l0 = mf_moment_levels(self.series, m.testing, m.weekly, 1.0)?;
                Ok(self.layout.encode_single(&p))
            }
        }
    }
}

fn positive_log(num: f64, den: f64) -> f64 {
    (num.max(0.5) / den).ln()
}

fn bounded_logit(num: f64, den: f64) -> f64 {
    logit((num.max(0.5) / den).clamp(1e-9, 0.5))
}

/// `β̃ = ln(ΣΔC·N / ΣS·I)` and the analogous recovery and death levels
/// over the first days.
pub fn moment_levels(series: &CompartmentSeries) -> Result<[f64; 3]> {
    let m = MOM_WINDOW.min(series.n_obs());
    if m == 0 {
        return Err(Error::data("series has no observations"));
    }
    let n = series.population();
    let (mut c, mut r, mut d, mut si, mut i, mut i_rc) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for t in 1..=m {
        let ip = series.i()[t - 1];
        c += series.delta_c()[t - 1];
        d += series.delta_d()[t - 1];
        si += series.s()[t - 1] * ip / n;
        i += ip;
        if let Some(rc) = series.rc_obs(t) {
            r += rc;
            i_rc += ip;
        }
    }
    if !(i > 0.0) {
        return Err(Error::data("no active infections in the first window"));
    }
    let gamma = if i_rc > 0.0 {
        bounded_logit(r, i_rc)
    } else {
        logit(0.05)
    };
    Ok([positive_log(c, si), gamma, bounded_logit(d, i)])
}

fn mf_moment_levels(
    series: &CompartmentSeries,
    testing: &TestingSeries,
    weekly: &WeeklyDeaths,
    k: f64,
) -> Result<[f64; 3]> {
    let st = inflate_series(series, testing, k, DailyDeaths::Reported)?;
    let n = series.population();
    let m = MOM_WINDOW.min(series.n_obs());
    let (mut c, mut r, mut si, mut i, mut i_rc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for t in 1..=m {
        let ip = st.i[t - 1];
        c += st.delta_c[t - 1];
        si += st.s[t - 1] * ip / n;
        i += ip;
        if let Some(rc) = st.delta_rc[t - 1] {
            r += rc;
            i_rc += ip;
        }
    }
    let weeks = weekly.release_days().len().min(2).max(1);
    let d: f64 = weekly.totals().iter().take(weeks).sum();
    let exposure: f64 = st.i[..(weeks * 7).min(st.i.len() - 1)].iter().sum();
    if !(i > 0.0 && exposure > 0.0) {
        return Err(Error::data("no active infections in the first window"));
    }
    let gamma = if i_rc > 0.0 {
        bounded_logit(r, i_rc)
    } else {
        logit(0.05)
    };
    Ok([positive_log(c, si), gamma, bounded_logit(d, exposure)])
}

/// Factor-model target. The common level starts at the first country's
/// method-of-moments infection level.
#[derive(Debug, Clone)]
pub struct FactorTarget<'a> {
    pub panel: &'a Panel,
    pub options: FilterOptions,
    pub common_l0: f64,
    layout: ParamLayout,
}

impl<'a> FactorTarget<'a> {
    pub fn new(panel: &'a Panel, options: FilterOptions) -> Result<Self> {
        let common_l0 = moment_levels(&panel.countries()[0])?[BETA];
        Ok(FactorTarget {
            panel,
            options,
            common_l0,
            layout: ParamLayout::factor(panel.names(), options.seasonal),
        })
    }

    pub fn params(&self, x: &[f64]) -> FactorParams {
        self.layout.decode_factor(x, self.panel.k(), self.common_l0)
    }
}

impl Target for FactorTarget<'_> {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        factor_log_likelihood(self.panel, &self.params(x), self.options)
    }

    fn start(&self) -> Result<Vec<f64>> {
        let k = self.panel.k();
        let mut f = FactorParams {
            countries: vec![zero_params(); k],
            loadings: vec![1.0; k],
            alpha_common: 0.1,
            common_l0: self.common_l0,
        };
        for (i, c) in self.panel.countries().iter().enumerate() {
            let mut th = moment_levels(c)?;
            th[BETA] -= self.common_l0;
            f.countries[i].theta_l0 = th;
            f.countries[i].alpha = [0.05, 0.1, 0.1];
        }
        Ok(self.layout.encode_factor(&f))
    }
}

/// Mode and curvature used to start the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub x: Vec<f64>,
    pub loglik: f64,
    /// Inverse of the eigenvalue-floored finite-difference Hessian.
    pub cov: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The optimizer failed and the start values were used instead.
    pub fallback: bool,
}

/// Smallest curvature kept when inverting the Hessian.
pub const HESSIAN_FLOOR: f64 = 1.0;
/// Covariance used when the optimizer fails.
pub const FALLBACK_VARIANCE: f64 = 1e-4;

fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

fn gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> Option<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    let mut y = x.to_vec();
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        y[i] = x[i] + h;
        let fp = f(&y);
        y[i] = x[i] - h;
        let fm = f(&y);
        y[i] = x[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return None;
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Some(g)
}

/// Central finite-difference Hessian.
pub fn fd_hessian<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64]) -> Option<DMatrix<f64>> {
    let d = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut y = x.to_vec();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        y[i] = x[i] + h[i];
        let fp = f(&y);
        y[i] = x[i] - h[i];
        let fm = f(&y);
        y[i] = x[i];
        m[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                y[i] = x[i] + si * h[i];
                y[j] = x[j] + sj * h[j];
                let v = f(&y);
                y[i] = x[i];
                y[j] = x[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m.iter().all(|v| v.is_finite()).then_some(m)
}

/// Inverse of a symmetric matrix after flooring its eigenvalues.
pub fn floored_inverse(h: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = h.clone().symmetric_eigen();
    let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
    let v = &eig.eigenvectors;
    let c = v * DMatrix::from_diagonal(&inv) * v.transpose();
    (&c + c.transpose()) * 0.5
}

/// BFGS on the negative log-likelihood with finite-difference gradients
/// and backtracking, then the curvature at the mode.
pub fn mle_init<T: Target + ?Sized>(target: &T) -> Result<MleResult> {
    let x0 = target.start()?;
    mle_from(target, &x0)
}

pub fn mle_from<T: Target + ?Sized>(target: &T, x0: &[f64]) -> Result<MleResult> {
    let d = x0.len();
    let f = |x: &[f64]| -target.log_posterior(x);
    let f0 = f(x0);
    if !f0.is_finite() {
        return Err(Error::numeric(
            "log-likelihood is not finite at the starting values",
        ));
    }
    let fallback = |iterations| MleResult {
        x: x0.to_vec(),
        loglik: -f0,
        cov: DMatrix::identity(d, d) * FALLBACK_VARIANCE,
        iterations,
        converged: false,
        fallback: true,
    };
    let (x, fx, iterations, converged) = match bfgs(&f, x0, 2000) {
        Some(r) => r,
        None => return Ok(fallback(0)),
    };
    let Some(h) = fd_hessian(&f, &x) else {
        return Ok(fallback(iterations));
    };
    Ok(MleResult {
        x,
        loglik: -fx,
        cov: floored_inverse(&h, HESSIAN_FLOOR),
        iterations,
        converged,
        fallback: false,
    })
}

fn bfgs<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: &[f64],
    max_iter: usize,
) -> Option<(Vec<f64>, f64, usize, bool)> {
    let d = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    let mut g = gradient(f, x.as_slice())?;
    let mut hinv = DMatrix::identity(d, d) / g.norm().max(1.0);
    let mut stalls = 0;
    for it in 0..max_iter {
        let mut p = -(&hinv * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(d, d) / g.norm().max(1.0);
            p = -(&hinv * &g);
            slope = g.dot(&p);
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let xn = &x + &p * t;
            let fnew = f(xn.as_slice());
            if fnew.is_finite() && fnew <= fx + 1e-4 * t * slope {
                next = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            return Some((x.as_slice().to_vec(), fx, it, true));
        };
        let gn = gradient(f, xn.as_slice())?;
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if it == 0 {
                hinv = DMatrix::identity(d, d) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let a = &i - &s * y.transpose() * rho;
            hinv = &a * &hinv * a.transpose() + &s * s.transpose() * rho;
        }
        let improvement = fx - fnew;
        x = xn;
        g = gn;
        fx = fnew;
        if improvement <= 1e-10 * (1.0 + fx.abs()) {
            stalls += 1;
            if stalls >= 3 {
                return Some((x.as_slice().to_vec(), fx, it + 1, true));
            }
        } else {
            stalls = 0;
        }
    }
    Some((x.as_slice().to_vec(), fx, max_iter, false))
}

/// Settings of the adaptive sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Proposal scale; per block `2.38²/d` when unset.
    pub chi: Option<f64>,
    pub epsilon: f64,
    pub adapt_start: usize,
    pub adapt_every: usize,
    pub proposal_dof: f64,
    pub seed: u64,
    /// When set, each block's scale `χ` is also tuned by a diminishing
    /// Robbins-Monro step towards this acceptance rate. Helps when blocks are
    /// strongly correlated and the default scale proposes too far.
    pub target_acceptance: Option<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iter: 10_000,
            burn_in: 5_000,
            thin: 1,
            chi: None,
            epsilon: 1e-8,
            adapt_start: 500,
            adapt_every: 100,
            proposal_dof: 15.0,
            seed: 0,
            target_acceptance: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::config("burn_in must be below n_iter"));
        }
        if self.chi.is_some_and(|c| !(c > 0.0)) || !(self.epsilon > 0.0) {
            return Err(Error::config("chi and epsilon must be positive"));
        }
        if !(self.proposal_dof > 2.0) {
            return Err(Error::config("proposal degrees of freedom must exceed 2"));
        }
        if self
            .target_acceptance
            .is_some_and(|a| !(a > 0.0 && a < 1.0))
        {
            return Err(Error::config("target_acceptance must be in (0, 1)"));
        }
        if self.thin == 0 || self.adapt_every == 0 {
            return Err(Error::config("thin and adapt_every must be at least 1"));
        }
        Ok(())
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub log_posts: Vec<f64>,
    pub block_names: Vec<String>,
    pub acc_rates: Vec<f64>,
    /// Acceptance after adaptation started.
    pub acc_rates_adapted: Vec<f64>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|r| r[j]).collect()
    }

    /// Coordinate-wise posterior median.
    pub fn median(&self) -> Vec<f64> {
        (0..self.names.len())
            .map(|j| median(&self.column(j)))
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.draws.len() as f64;
        (0..self.names.len())
            .map(|j| self.column(j).iter().sum::<f64>() / n)
            .collect()
    }

    /// Draws spread evenly over the chain.
    pub fn subsample(&self, n: usize) -> Vec<&[f64]> {
        let m = self.draws.len();
        if n >= m {
            return self.draws.iter().map(|r| r.as_slice()).collect();
        }
        (0..n).map(|i| self.draws[i * m / n].as_slice()).collect()
    }
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

/// Linear-interpolation quantile.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Running mean and scatter of one block.
struct Moments {
    n: f64,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Moments {
            n: 0.0,
            mean: DVector::zeros(d),
            scatter: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = x - &self.mean;
        self.scatter += &delta * delta2.transpose();
    }

    fn cov(&self) -> DMatrix<f64> {
        &self.scatter / (self.n - 1.0).max(1.0)
    }
}

struct BlockState {
    idx: Vec<usize>,
    chol: DMatrix<f64>,
    chi: f64,
    moments: Moments,
    accepted: usize,
    tried: usize,
    accepted_adapted: usize,
    tried_adapted: usize,
}

fn cholesky_or_diag(c: DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let d = c.nrows();
    match c.clone().cholesky() {
        Some(ch) => ch.l(),
        None => {
            let diag = c.diagonal().map(|v| v.abs().max(eps).sqrt());
            DMatrix::from_diagonal(&diag) + DMatrix::zeros(d, d)
        }
    }
}

/// Adaptive random-walk Metropolis-Hastings within Gibbs.
pub fn rwmh_within_gibbs<T: Target + ?Sized>(
    target: &T,
    init: &MleResult,
    config: &McmcConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let layout = target.layout();
    let mut rng = rng_from_seed(config.seed);
    let mut x = init.x.clone();
    let mut lp = target.log_posterior(&x);
    if !lp.is_finite() {
        return Err(Error::numeric(
            "log-posterior is not finite at the initial values",
        ));
    }
    let mut blocks: Vec<BlockState> = layout
        .blocks
        .iter()
        .map(|b| {
            let d = b.indices.len();
            let chi = config.chi.unwrap_or(2.38 * 2.38 / d as f64);
            let sub = DMatrix::from_fn(d, d, |i, j| init.cov[(b.indices[i], b.indices[j])]);
            BlockState {
                idx: b.indices.clone(),
                chol: cholesky_or_diag(sub * chi, config.epsilon),
                chi,
                moments: Moments::new(d),
                accepted: 0,
                tried: 0,
                accepted_adapted: 0,
                tried_adapted: 0,
            }
        })
        .collect();
    let t_dist = ChiSquared::new(config.proposal_dof).map_err(|e| Error::config(e.to_string()))?;
    let mut out = PosteriorDraws {
        names: layout.names.clone(),
        draws: Vec::new(),
        log_posts: Vec::new(),
        block_names: layout.blocks.iter().map(|b| b.name.clone()).collect(),
        acc_rates: Vec::new(),
        acc_rates_adapted: Vec::new(),
    };
    let mut cand = x.clone();
    for m in 0..config.n_iter {
        let adapted = m >= config.adapt_start;
        for b in blocks.iter_mut() {
            let d = b.idx.len();
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w: f64 = t_dist.sample(&mut rng);
            let eps = &b.chol * z * (config.proposal_dof / w).sqrt();
            cand.copy_from_slice(&x);
            for (k, &i) in b.idx.iter().enumerate() {
                cand[i] += eps[k];
            }
            let lp_cand = target.log_posterior(&cand);
            let u: f64 = rng.random();
            b.tried += 1;
            if adapted {
                b.tried_adapted += 1;
            }
            let accept = lp_cand.is_finite() && u.ln() < lp_cand - lp;
            if accept {
                x.copy_from_slice(&cand);
                lp = lp_cand;
                b.accepted += 1;
                if adapted {
                    b.accepted_adapted += 1;
                }
            }
            if let (true, Some(target)) = (adapted, config.target_acceptance) {
                let step = ((m - config.adapt_start + 1) as f64).powf(-0.6);
                let hit = if accept { 1.0 } else { 0.0 };
                b.chi = (b.chi.ln() + step * (hit - target)).exp();
            }
            b.moments
                .push(&DVector::from_iterator(d, b.idx.iter().map(|&i| x[i])));
            if adapted && (m - config.adapt_start) % config.adapt_every == 0 && b.moments.n > 1.0 {
                let c = b.moments.cov() * b.chi + DMatrix::identity(d, d) * config.epsilon;
                if let Some(ch) = c.cholesky() {
                    b.chol = ch.l();
                }
            }
        }
        if m >= config.burn_in && (m - config.burn_in) % config.thin == 0 {
            out.draws.push(x.clone());
            out.log_posts.push(lp);
        }
    }
    let rate = |a: usize, t: usize| if t == 0 { 0.0 } else { a as f64 / t as f64 };
    out.acc_rates = blocks.iter().map(|b| rate(b.accepted, b.tried)).collect();
    out.acc_rates_adapted = blocks
        .iter()
        .map(|b| rate(b.accepted_adapted, b.tried_adapted))
        .collect();
    Ok(out)
}

/// Independent chains run in parallel; chain `c` uses seed `seed + c`.
pub fn rwmh_chains<T: Target + ?Sized>(
    target: &T,
    init: &MleResult,
    config: &McmcConfig,
    chains: usize,
) -> Result<Vec<PosteriorDraws>> {
    (0..chains)
        .into_par_iter()
        .map(|c| {
            let cfg = McmcConfig {
                seed: config.seed.wrapping_add(c as u64),
                ..config.clone()
            };
            rwmh_within_gibbs(target, init, &cfg)
        })
        .collect()
}

/// Shortest interval holding `level` of the sorted sample.
pub fn hpdi(sample: &[f64], level: f64) -> Result<(f64, f64)> {
    if sample.is_empty() {
        return Err(Error::domain("HPDI of an empty sample"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!(
            "HPDI level must be in (0, 1), got {level}"
        )));
    }
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    let keep = ((level * n as f64).ceil() as usize).clamp(1, n);
    let (mut lo, mut hi) = (s[0], s[keep - 1]);
    for i in 1..=n - keep {
        if s[i + keep - 1] - s[i] < hi - lo {
            lo = s[i];
            hi = s[i + keep - 1];
        }
    }
    Ok((lo, hi))
}

/// Effective sample size from the initial positive sequence of
/// autocorrelations.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| {
        c[..n - lag]
            .iter()
            .zip(&c[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / (n as f64 * var)
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    n as f64 / tau.max(1.0 / n as f64)
}
