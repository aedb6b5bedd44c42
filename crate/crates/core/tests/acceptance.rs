//! Acceptance criteria, one PASS/FAIL line each. Tolerances are constants
//! below; the process exits non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::time::Instant;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use tvp_sird::factor::{common_score, factor_filter_path, CommonLink, FactorParams, Panel};
use tvp_sird::forecast::{
    dm_test, harvey_factor, recursive_backtest, relative_rmsfe, rmsfe, BacktestConfig,
    BacktestModel,
};
use tvp_sird::inference::{
    effective_sample_size, median, mle_init, rwmh_within_gibbs, FactorTarget, McmcConfig, MfInputs,
    ModelVariant, PosteriorDraws, SingleTarget,
};
use tvp_sird::io::{load_csv, write_series_csv, LoadOptions};
use tvp_sird::mixed::{
    mf_log_likelihood, weekly_death_score, DeathAllocation, MfOptions, TestingSeries, WeeklyDeaths,
};
use tvp_sird::model::{
    effective_reproduction, growth_factor, logistic, poisson_logpmf, poisson_means,
    skellam_conditional_moments, unconditional_moments, CompartmentSeries, RateTriple,
};
use tvp_sird::score::{
    filter_path_with, log_likelihood, scaled_scores, seasonal_step, DayObs, FilterOptions,
    StaticParams, N_HARMONICS,
};
use tvp_sird::sim::{simulate, simulate_panel, FactorSimSpec, RhoPath, SimSpec};

const SCORE_REL_TOL: f64 = 1e-5;
const SCORE_STATES: usize = 100;
const SCORE_RUNTIME_S: f64 = 10.0;

const MOMENT_DRAWS: usize = 100_000;
const MOMENT_PARAMS: usize = 20;
const MOMENT_SE: f64 = 3.0;
const MOMENT_STEPS: u32 = 10;
const PI_ANCHOR: f64 = 1.00476;
const PI_TOL: f64 = 1e-5;
const MOMENT_RUNTIME_S: f64 = 30.0;

const NORM_TOL_PER_STEP: f64 = 1e-12;
const PERIOD_TOL: f64 = 1e-12;

const NEST_REL_TOL: f64 = 1e-12;
/// MF against daily TVP re-aggregated by hand: different summation order.
const NEST_MF_REL_TOL: f64 = 1e-10;

const CONJ_SE: f64 = 3.0;
const CONJ_MIN_ESS: f64 = 5000.0;
const ACC_RANGE: (f64, f64) = (0.10, 0.50);
const CONJ_RUNTIME_S: f64 = 120.0;

const RECOVERY_T: usize = 400;
const RECOVERY_SDS: f64 = 3.0;
const RECOVERY_ITER: usize = 20_000;
const RECOVERY_BURN: usize = 10_000;
const RECOVERY_ALPHA: [f64; 3] = [0.4, 0.3, 0.2];
const RECOVERY_K: f64 = 2.0;
const BETA_MAE_SHARE: f64 = 0.10;
const K_REL_TOL: f64 = 0.25;
const TAU_TRUE: f64 = 0.8;
const TAU_TOL: f64 = 0.15;
const RECOVERY_RUNTIME_S: f64 = 900.0;

const DM_REPS: usize = 10_000;
const DM_T: usize = 100;
const DM_SIZE_RANGE: (f64, f64) = (0.035, 0.065);
const DM_NOMINAL: f64 = 0.05;
const IDENTITY_TOL: f64 = 1e-12;

const ANCHOR_SEEDS: u64 = 20;
const ANCHOR_T: usize = 200;
const ANCHOR_ORIGINS: std::ops::Range<usize> = 120..180;
const ANCHOR_SHARE: f64 = 0.70;
const R0_MEDIANS: f64 = 1.607;
const R0_ROUNDING: f64 = 5e-4;
const R0_PAPER: f64 = 1.6392;
const R0_REL: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn poisson(r: &mut ChaCha8Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        0.0
    } else {
        Poisson::new(mean).unwrap().sample(r)
    }
}

fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + r.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

// ------------------------------------------------------------------ 1

const SCORE_H: f64 = 1e-5;
const FISHER_H: f64 = 1e-4;

/// Central-difference score over finite-difference expected information for
/// independent Poisson counts whose means depend on a scalar `f`.
fn fd_scaled_score(lam: &dyn Fn(f64) -> Vec<f64>, f0: f64, y: &[f64]) -> f64 {
    let (up, dn) = (lam(f0 + SCORE_H), lam(f0 - SCORE_H));
    let score: f64 = y
        .iter()
        .zip(up.iter().zip(&dn))
        .map(|(y, (u, d))| y * (u / d).ln() - (u - d))
        .sum::<f64>()
        / (2.0 * SCORE_H);
    let l0 = lam(f0);
    // expected log-likelihood with E[y] = λ(f0), relative to f0
    let el = |f: f64| -> f64 {
        lam(f)
            .iter()
            .zip(&l0)
            .map(|(l, m)| m * (l / m).ln() - (l - m))
            .sum()
    };
    let fisher = -(el(f0 + FISHER_H) + el(f0 - FISHER_H)) / (FISHER_H * FISHER_H);
    score / fisher
}

fn count_away_from(r: &mut ChaCha8Rng, mean: f64) -> f64 {
    loop {
        let u = r.random_range(0.5..1.5);
        let y = poisson(r, mean * u);
        if (y - mean).abs() >= 1.0 {
            return y;
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let n = 1e7;
    let mut worst = [0.0f64; 6];
    for _ in 0..SCORE_STATES {
        let beta = log_uniform(&mut r, 0.02, 0.4);
        let gamma = log_uniform(&mut r, 0.01, 0.2);
        let nu = log_uniform(&mut r, 5e-4, 0.05);
        let i = log_uniform(&mut r, 50.0, 1e5);
        let s = n * r.random_range(0.3..1.0);
        let rates = RateTriple::new(beta, gamma, nu).unwrap();
        let means = poisson_means(&rates, i, s, n);
        let obs = DayObs {
            delta_c: count_away_from(&mut r, means.lambda1),
            delta_rc: Some(count_away_from(&mut r, means.lambda2)),
            delta_d: Some(count_away_from(&mut r, means.lambda3)),
        };
        let an = scaled_scores(&obs, &means, &rates).unwrap();
        let fd_b = fd_scaled_score(&|f| vec![f.exp() * s * i / n], beta.ln(), &[obs.delta_c]);
        let lg = |p: f64| (p / (1.0 - p)).ln();
        let fd_g = fd_scaled_score(
            &|f| vec![logistic(f) * i],
            lg(gamma),
            &[obs.delta_rc.unwrap()],
        );
        let fd_n = fd_scaled_score(&|f| vec![logistic(f) * i], lg(nu), &[obs.delta_d.unwrap()]);
        worst[0] = worst[0].max(rel_err(an.s_beta, fd_b));
        worst[1] = worst[1].max(rel_err(an.s_gamma, fd_g));
        worst[2] = worst[2].max(rel_err(an.s_nu, fd_n));

        // weekly deaths over seven daily exposures
        let window: Vec<f64> = (0..7).map(|_| i * r.random_range(0.8..1.2)).collect();
        let exposure: f64 = window.iter().sum();
        let total = count_away_from(&mut r, nu * exposure);
        let an_w = weekly_death_score(total, &window, nu).unwrap();
        let fd_w = fd_scaled_score(&|f| vec![logistic(f) * exposure], lg(nu), &[total]);
        worst[3] = worst[3].max(rel_err(an_w, fd_w));

        // common level shared by three countries
        let k = 3;
        let tau: Vec<f64> = (0..k)
            .map(|c| {
                if c == 0 {
                    1.0
                } else {
                    r.random_range(0.2..1.5)
                }
            })
            .collect();
        let base: Vec<f64> = (0..k).map(|_| log_uniform(&mut r, 20.0, 5e4)).collect();
        let counts: Vec<f64> = base.iter().map(|m| count_away_from(&mut r, *m)).collect();
        let f0 = r.random_range(-3.0..-1.0);
        let lam_log = |f: f64| -> Vec<f64> {
            (0..k)
                .map(|c| base[c] * (tau[c] * (f - f0)).exp())
                .collect()
        };
        let an_c = common_score(&counts, &base, &tau, CommonLink::Log).unwrap();
        worst[4] = worst[4].max(rel_err(an_c, fd_scaled_score(&lam_log, f0, &counts)));

        let offset: Vec<f64> = (0..k).map(|_| r.random_range(-5.0..-1.5)).collect();
        let expo: Vec<f64> = (0..k).map(|_| log_uniform(&mut r, 1e3, 1e6)).collect();
        let lam_logit = |f: f64| -> Vec<f64> {
            (0..k)
                .map(|c| logistic(tau[c] * f + offset[c]) * expo[c])
                .collect()
        };
        let p0: Vec<f64> = (0..k).map(|c| logistic(tau[c] * f0 + offset[c])).collect();
        let m0 = lam_logit(f0);
        let counts: Vec<f64> = m0.iter().map(|m| count_away_from(&mut r, *m)).collect();
        let an_c = common_score(&counts, &m0, &tau, CommonLink::Logit(&p0)).unwrap();
        worst[5] = worst[5].max(rel_err(an_c, fd_scaled_score(&lam_logit, f0, &counts)));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|w| *w < SCORE_REL_TOL) && secs < SCORE_RUNTIME_S;
    outcome(
        pass,
        format!(
            "max rel err beta {:.1e} gamma {:.1e} nu {:.1e} weekly {:.1e} common-log {:.1e} common-logit {:.1e} (tol {SCORE_REL_TOL:.0e}), {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    )
}

// ------------------------------------------------------------------ 2

struct Sample {
    mean: f64,
    var: f64,
    se_mean: f64,
    se_var: f64,
}

fn sample_moments(x: &[f64]) -> Sample {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    Sample {
        mean,
        var,
        se_mean: (var / n).sqrt(),
        se_var: ((m4 - m2 * m2) / n).sqrt(),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut r = rng(202);
    let mut worst_z: f64 = 0.0;
    for _ in 0..MOMENT_PARAMS {
        let beta = r.random_range(0.05..0.4);
        let gamma = r.random_range(0.02..0.2);
        let nu = r.random_range(0.001..0.03);
        let rates = RateTriple::new(beta, gamma, nu).unwrap();
        let n = 1e7;
        let i_prev = r.random_range(200.0..5000.0);
        let s_prev = n * r.random_range(0.4..1.0);
        let (m, v) = skellam_conditional_moments(&rates, i_prev, s_prev, n);
        let means = poisson_means(&rates, i_prev, s_prev, n);
        let draws: Vec<f64> = (0..MOMENT_DRAWS)
            .map(|_| {
                i_prev + poisson(&mut r, means.lambda1)
                    - poisson(&mut r, means.lambda2)
                    - poisson(&mut r, means.lambda3)
            })
            .collect();
        let s = sample_moments(&draws);
        worst_z = worst_z
            .max((s.mean - m).abs() / s.se_mean)
            .max((s.var - v).abs() / s.se_var);

        // susceptible share held at one, as the closed form assumes
        let i0 = r.random_range(200.0..2000.0);
        let (mu, vu) = unconditional_moments(&rates, i0, MOMENT_STEPS);
        let draws: Vec<f64> = (0..MOMENT_DRAWS)
            .map(|_| {
                let mut i = i0;
                for _ in 0..MOMENT_STEPS {
                    i += poisson(&mut r, beta * i)
                        - poisson(&mut r, gamma * i)
                        - poisson(&mut r, nu * i);
                }
                i
            })
            .collect();
        let s = sample_moments(&draws);
        worst_z = worst_z
            .max((s.mean - mu).abs() / s.se_mean)
            .max((s.var - vu).abs() / s.se_var);
    }
    let beta = 0.0122;
    let out = beta / 1.64;
    let pi = growth_factor(&RateTriple::new(beta, out * 0.98, out * 0.02).unwrap());
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_z <= MOMENT_SE && (pi - PI_ANCHOR).abs() <= PI_TOL && secs < MOMENT_RUNTIME_S;
    outcome(
        pass,
        format!(
            "worst |z| {worst_z:.2} over {MOMENT_PARAMS} parameterizations (limit {MOMENT_SE}); pi {pi:.7} vs {PI_ANCHOR} (tol {PI_TOL:.0e}); {secs:.1}s"
        ),
    )
}

// ------------------------------------------------------------------ 3

fn constant_phi(beta: f64, gamma: f64, nu: f64) -> StaticParams {
    StaticParams::constant(&RateTriple::new(beta, gamma, nu).unwrap()).unwrap()
}

fn sim_spec(phi: StaticParams, days: usize, population: f64, i0: f64) -> SimSpec {
    SimSpec {
        phi,
        days,
        population,
        i0,
        start_date: NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
        seasonal: true,
        rho: None,
        dow_log_effects: None,
        missing_rc_from: None,
        factor: None,
    }
}

fn seasonal_phi() -> StaticParams {
    let mut phi = constant_phi(0.12, 0.08, 0.004);
    phi.alpha = [0.3, 0.2, 0.1];
    phi.psi = [[0.1, 0.05, 0.02], [0.05, 0.0, 0.01], [0.02, 0.01, 0.0]];
    phi.psi_star = [[0.04, -0.03, 0.01], [0.0, 0.02, 0.0], [0.01, 0.0, 0.01]];
    phi
}

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let zero = [0.0; N_HARMONICS];
    let mut worst_norm: f64 = 0.0;
    let mut worst_period: f64 = 0.0;
    for _ in 0..100 {
        let start: [(f64, f64); N_HARMONICS] =
            std::array::from_fn(|_| (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        let mut h = start;
        for step in 1..=70 {
            let next = seasonal_step(&h, &zero, &zero, 0.0);
            for j in 0..N_HARMONICS {
                let before = h[j].0.hypot(h[j].1);
                let after = next[j].0.hypot(next[j].1);
                worst_norm = worst_norm.max((after - before).abs());
            }
            h = next;
            if step % 7 == 0 {
                for j in 0..N_HARMONICS {
                    worst_period = worst_period
                        .max((h[j].0 - start[j].0).abs() / step as f64 * 7.0)
                        .max((h[j].1 - start[j].1).abs() / step as f64 * 7.0);
                }
            }
        }
    }
    let series = simulate(&sim_spec(seasonal_phi(), 200, 1e8, 2e4), 33)
        .unwrap()
        .series;
    let off =
        filter_path_with(&series, &seasonal_phi(), FilterOptions { seasonal: false }).unwrap();
    let mut level_only = seasonal_phi();
    level_only.psi = [[0.0; N_HARMONICS]; 3];
    level_only.psi_star = [[0.0; N_HARMONICS]; 3];
    let zero_psi =
        filter_path_with(&series, &level_only, FilterOptions { seasonal: true }).unwrap();
    let reproduces = off.rates == zero_psi.rates && off.loglik == zero_psi.loglik;
    let on = filter_path_with(&series, &seasonal_phi(), FilterOptions { seasonal: true }).unwrap();
    let differs = on.loglik != off.loglik;
    let pass =
        worst_norm <= NORM_TOL_PER_STEP && worst_period <= PERIOD_TOL && reproduces && differs;
    outcome(
        pass,
        format!(
            "norm drift {worst_norm:.1e}/step (tol {NORM_TOL_PER_STEP:.0e}), 7-step return error {worst_period:.1e} (tol {PERIOD_TOL:.0e}), harmonics off = level-only: {reproduces}"
        ),
    )
}

// ------------------------------------------------------------------ 4

/// Fixed-rate likelihood summed directly from the Poisson kernels.
fn fp_loglik(series: &CompartmentSeries, rates: &RateTriple) -> f64 {
    let mut ll = 0.0;
    for t in 1..=series.n_obs() {
        let m = poisson_means(
            rates,
            series.i()[t - 1],
            series.s()[t - 1],
            series.population(),
        );
        ll += poisson_logpmf(series.delta_c()[t - 1], m.lambda1).unwrap();
        ll += poisson_logpmf(series.rc_obs(t).unwrap(), m.lambda2).unwrap();
        ll += poisson_logpmf(series.delta_d()[t - 1], m.lambda3).unwrap();
    }
    ll
}

fn criterion_4() -> Outcome {
    let phi = seasonal_phi();
    let series = simulate(&sim_spec(phi.clone(), 210, 1e8, 2e4), 44)
        .unwrap()
        .series;

    let rates = RateTriple::new(0.11, 0.075, 0.0035).unwrap();
    let constant = StaticParams::constant(&rates).unwrap();
    let tvp_fp = log_likelihood(&series, &constant, FilterOptions::default()).unwrap();
    let fp = fp_loglik(&series, &rates);
    let e_fp = rel_err(tvp_fp, fp);

    // k = 0 and zero excess: the weekly death term replaces the daily one
    let mut mf_phi = phi.clone();
    mf_phi.alpha[2] = 0.0;
    mf_phi.psi[2] = [0.0; N_HARMONICS];
    mf_phi.psi_star[2] = [0.0; N_HARMONICS];
    let options = FilterOptions { seasonal: true };
    let tvp = filter_path_with(&series, &mf_phi, options).unwrap();
    let mut expected = 0.0;
    for t in 1..=series.n_obs() {
        let m = &tvp.means[t - 1];
        expected += poisson_logpmf(series.delta_c()[t - 1], m.lambda1).unwrap();
        expected += poisson_logpmf(series.rc_obs(t).unwrap(), m.lambda2).unwrap();
    }
    for w in 0..series.n_obs() / 7 {
        let days = w * 7..w * 7 + 7;
        let total: f64 = series.delta_d()[days.clone()].iter().sum();
        let mean: f64 = tvp.means[days].iter().map(|m| m.lambda3).sum();
        expected += poisson_logpmf(total, mean).unwrap();
    }
    let rho = vec![0.1; series.len()];
    let testing = TestingSeries::from_rho(&rho).unwrap();
    let weekly = WeeklyDeaths::from_daily(&series, &vec![Some(0.0); series.n_obs()]).unwrap();
    mf_phi.k = Some(0.0);
    let mf = mf_log_likelihood(
        &series,
        &testing,
        &weekly,
        &mf_phi,
        MfOptions {
            seasonal: true,
            deaths: DeathAllocation::Reported,
        },
    )
    .unwrap();
    let e_mf = rel_err(mf, expected);

    // one country: common and idiosyncratic levels add up
    let (alpha_common, common_l0) = (0.12, -2.5);
    let mut idio = phi.clone();
    idio.alpha[0] -= alpha_common;
    idio.theta_l0[0] -= common_l0;
    let params = FactorParams {
        countries: vec![idio],
        loadings: vec![1.0],
        alpha_common,
        common_l0,
    };
    let panel = Panel::new(vec![series.clone()], vec!["A".into()]).unwrap();
    let factor = factor_filter_path(&panel, &params, options).unwrap();
    let single = filter_path_with(&series, &phi, options).unwrap();
    let mut e_f: f64 = 0.0;
    for (a, b) in factor.countries[0].rates.iter().zip(&single.rates) {
        e_f = e_f
            .max(rel_err(a.beta, b.beta))
            .max(rel_err(a.gamma, b.gamma))
            .max(rel_err(a.nu, b.nu));
    }
    let e_f_ll = rel_err(factor.loglik, single.loglik);

    let pass = e_fp <= NEST_REL_TOL && e_mf <= NEST_MF_REL_TOL && e_f <= NEST_REL_TOL;
    outcome(
        pass,
        format!(
            "TVP(0) vs FP rel {e_fp:.1e} (tol {NEST_REL_TOL:.0e}); MF(k=0) vs weekly-aggregated TVP rel {e_mf:.1e} (tol {NEST_MF_REL_TOL:.0e}); factor K=1 vs TVP rate paths rel {e_f:.1e} (tol {NEST_REL_TOL:.0e}, log-likelihood rel {e_f_ll:.1e})"
        ),
    )
}

// ------------------------------------------------------------------ 5

/// Posterior mean of a rate whose transformed value has a flat prior and
/// whose likelihood kernel is `count·ln(rate) − rate·exposure`, by
/// quadrature on the transformed scale.
fn flat_prior_mean(
    count: f64,
    exposure: f64,
    to_rate: fn(f64) -> f64,
    from_rate: fn(f64) -> f64,
) -> f64 {
    let mode = from_rate(count / exposure);
    let width = 14.0 / count.sqrt();
    let m = 40_001;
    let grid: Vec<f64> = (0..m)
        .map(|k| mode - width + 2.0 * width * k as f64 / (m - 1) as f64)
        .collect();
    let logk: Vec<f64> = grid
        .iter()
        .map(|&g| {
            let p = to_rate(g);
            count * p.ln() - p * exposure
        })
        .collect();
    let top = logk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..m {
        let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 } * (logk[k] - top).exp();
        num += w * to_rate(grid[k]);
        den += w;
    }
    num / den
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let truth = RateTriple::new(0.1, 0.07, 0.004).unwrap();
    let series = simulate(
        &sim_spec(StaticParams::constant(&truth).unwrap(), 200, 1e7, 5e3),
        55,
    )
    .unwrap()
    .series;
    let (mut c, mut r, mut d, mut e_beta, mut e_i) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for t in 1..=series.n_obs() {
        c += series.delta_c()[t - 1];
        r += series.rc_obs(t).unwrap();
        d += series.delta_d()[t - 1];
        e_beta += series.s()[t - 1] * series.i()[t - 1] / series.population();
        e_i += series.i()[t - 1];
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let oracle = [
        flat_prior_mean(c, e_beta, f64::exp, f64::ln),
        flat_prior_mean(r, e_i, logistic, logit),
        flat_prior_mean(d, e_i, logistic, logit),
    ];
    let target = SingleTarget::new(
        &series,
        ModelVariant::Constant,
        FilterOptions { seasonal: false },
        None,
    )
    .unwrap();
    let mle = mle_init(&target).unwrap();
    let cfg = McmcConfig {
        n_iter: 150_000,
        burn_in: 20_000,
        seed: 5,
        ..McmcConfig::default()
    };
    let post = rwmh_within_gibbs(&target, &mle, &cfg).unwrap();
    let transforms: [fn(f64) -> f64; 3] = [f64::exp, logistic, logistic];
    let mut worst_z: f64 = 0.0;
    let mut min_ess = f64::INFINITY;
    for j in 0..3 {
        let x: Vec<f64> = post.column(j).into_iter().map(transforms[j]).collect();
        let ess = effective_sample_size(&x);
        let s = sample_moments(&x);
        let mcse = (s.var / ess).sqrt();
        worst_z = worst_z.max((s.mean - oracle[j]).abs() / mcse);
        min_ess = min_ess.min(ess);
    }
    let acc = post.acc_rates_adapted.clone();
    let acc_ok = acc.iter().all(|a| *a >= ACC_RANGE.0 && *a <= ACC_RANGE.1);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_z <= CONJ_SE && min_ess >= CONJ_MIN_ESS && acc_ok && secs < CONJ_RUNTIME_S;
    outcome(
        pass,
        format!(
            "worst |mean - oracle|/MCSE {worst_z:.2} (limit {CONJ_SE}), min ESS {min_ess:.0} (need {CONJ_MIN_ESS}), post-adaptation acceptance {acc:.3?} in {ACC_RANGE:?}; {secs:.1}s"
        ),
    )
}

// ------------------------------------------------------------------ 6

fn posterior_stats(post: &PosteriorDraws, name: &str) -> (f64, f64) {
    let j = post
        .names
        .iter()
        .position(|n| n == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    let col = post.column(j);
    (median(&col), sample_moments(&col).var.sqrt())
}

fn recovery_mcmc(seed: u64) -> McmcConfig {
    McmcConfig {
        n_iter: RECOVERY_ITER,
        burn_in: RECOVERY_BURN,
        seed,
        ..McmcConfig::default()
    }
}

fn recover_tvp() -> (bool, String) {
    let mut phi = constant_phi(0.15, 0.1, 0.004);
    phi.alpha = RECOVERY_ALPHA;
    phi.psi[0] = [0.08, 0.03, 0.0];
    phi.psi_star[0] = [0.03, 0.0, 0.01];
    phi.psi[1] = [0.03, 0.0, 0.0];
    let sim = simulate(&sim_spec(phi, RECOVERY_T, 1e8, 2e4), 61).unwrap();
    let options = FilterOptions { seasonal: true };
    let target = SingleTarget::new(&sim.series, ModelVariant::Tvp, options, None).unwrap();
    let mle = mle_init(&target).unwrap();
    let post = rwmh_within_gibbs(&target, &mle, &recovery_mcmc(6)).unwrap();
    let mut worst: f64 = 0.0;
    for (p, name) in ["alpha_beta", "alpha_gamma", "alpha_nu"].iter().enumerate() {
        let (m, sd) = posterior_stats(&post, name);
        worst = worst.max((m - RECOVERY_ALPHA[p]).abs() / sd);
    }
    let fitted = filter_path_with(&sim.series, &target.params(&post.median()), options).unwrap();
    let truth: Vec<f64> = sim.true_rates.iter().map(|r| r.beta).collect();
    let mae = fitted
        .rates
        .iter()
        .zip(&truth)
        .map(|(f, b)| (f.beta - b).abs())
        .sum::<f64>()
        / truth.len() as f64;
    let range = truth.iter().cloned().fold(f64::MIN, f64::max)
        - truth.iter().cloned().fold(f64::MAX, f64::min);
    let acc = post.acc_rates_adapted.clone();
    let acc_ok = acc.iter().all(|a| *a >= ACC_RANGE.0 && *a <= ACC_RANGE.1);
    let pass = worst <= RECOVERY_SDS && mae < BETA_MAE_SHARE * range && acc_ok;
    (
        pass,
        format!(
            "TVP alpha worst |median - truth|/sd {worst:.2} (limit {RECOVERY_SDS}), beta MAE/range {:.3} (limit {BETA_MAE_SHARE}), acceptance {acc:.2?}",
            mae / range
        ),
    )
}

fn recover_mf() -> (bool, String) {
    let mut phi = constant_phi(0.14, 0.1, 0.004);
    phi.alpha = [0.3, 0.2, 0.1];
    phi.k = Some(RECOVERY_K);
    let mut spec = sim_spec(phi, RECOVERY_T, 1e8, 2e4);
    spec.seasonal = false;
    spec.rho = Some(RhoPath::Sinusoid {
        mean: 0.12,
        amplitude: 0.06,
        period: 90.0,
    });
    let sim = simulate(&spec, 62).unwrap();
    let mf = MfInputs {
        testing: sim.testing.as_ref().unwrap(),
        weekly: sim.weekly.as_ref().unwrap(),
        deaths: DeathAllocation::default(),
    };
    let target = SingleTarget::new(
        &sim.series,
        ModelVariant::Mf,
        FilterOptions { seasonal: false },
        Some(mf),
    )
    .unwrap();
    let mle = mle_init(&target).unwrap();
    let post = rwmh_within_gibbs(&target, &mle, &recovery_mcmc(7)).unwrap();
    let (k, _) = posterior_stats(&post, "k");
    let rel = (k - RECOVERY_K).abs() / RECOVERY_K;
    (
        rel <= K_REL_TOL,
        format!("MF k median {k:.3} vs {RECOVERY_K} (rel {rel:.3}, limit {K_REL_TOL})"),
    )
}

fn recover_factor() -> (bool, String) {
    let mut a = constant_phi(0.15, 0.1, 0.004);
    a.alpha = [0.1, 0.2, 0.1];
    let mut b = constant_phi(0.13, 0.09, 0.005);
    b.alpha = [0.1, 0.2, 0.1];
    let common_l0 = a.theta_l0[0];
    a.theta_l0[0] = 0.0;
    b.theta_l0[0] -= TAU_TRUE * common_l0;
    let params = FactorParams {
        countries: vec![a, b],
        loadings: vec![1.0, TAU_TRUE],
        alpha_common: 0.3,
        common_l0,
    };
    let mut spec = sim_spec(constant_phi(0.15, 0.1, 0.004), RECOVERY_T, 1e8, 2e4);
    spec.seasonal = false;
    spec.factor = Some(FactorSimSpec {
        params,
        names: vec!["a".into(), "b".into()],
        populations: vec![1e8, 6e7],
        i0: vec![2e4, 1.5e4],
    });
    let sim = simulate_panel(&spec, 63).unwrap();
    let target = FactorTarget::new(&sim.panel, FilterOptions { seasonal: false }).unwrap();
    let mle = mle_init(&target).unwrap();
    let post = rwmh_within_gibbs(&target, &mle, &recovery_mcmc(8)).unwrap();
    let (tau, _) = posterior_stats(&post, "tau_b");
    let err = (tau - TAU_TRUE).abs();
    (
        err <= TAU_TOL,
        format!("factor tau_b median {tau:.3} vs {TAU_TRUE} (limit {TAU_TOL})"),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let parts = [recover_tvp(), recover_mf(), recover_factor()];
    let secs = start.elapsed().as_secs_f64();
    let pass = parts.iter().all(|p| p.0) && secs < RECOVERY_RUNTIME_S;
    let detail: Vec<&str> = parts.iter().map(|p| p.1.as_str()).collect();
    outcome(
        pass,
        format!(
            "{}; {secs:.0}s (limit {RECOVERY_RUNTIME_S}s)",
            detail.join("; ")
        ),
    )
}

// ------------------------------------------------------------------ 7

fn criterion_7() -> Outcome {
    let mut r = rng(707);
    let normal = rand_distr::StandardNormal;
    let mut rejections = 0;
    let mut antisym: f64 = 0.0;
    for rep in 0..DM_REPS {
        let ea: Vec<f64> = (0..DM_T).map(|_| normal.sample(&mut r)).collect();
        let eb: Vec<f64> = (0..DM_T).map(|_| normal.sample(&mut r)).collect();
        let la: Vec<f64> = ea.iter().map(|e: &f64| e * e).collect();
        let lb: Vec<f64> = eb.iter().map(|e: &f64| e * e).collect();
        let ab = dm_test(&la, &lb, 1).unwrap();
        if ab.p_value < DM_NOMINAL {
            rejections += 1;
        }
        if rep < 100 {
            let ba = dm_test(&lb, &la, 1).unwrap();
            antisym = antisym
                .max((ab.statistic + ba.statistic).abs())
                .max((ab.p_value - ba.p_value).abs());
        }
    }
    let size = rejections as f64 / DM_REPS as f64;
    let harvey = harvey_factor(100, 1);
    let harvey_err = (harvey - 0.99f64.sqrt()).abs();
    let f: Vec<f64> = (0..50).map(|k| k as f64).collect();
    let y: Vec<f64> = (0..50)
        .map(|k| k as f64 + if k % 2 == 0 { 2.0 } else { -1.0 })
        .collect();
    let own = rmsfe(&f, &y).unwrap();
    let self_ratio = relative_rmsfe(own, own);
    let hand = ((25.0 * 4.0 + 25.0) / 50.0f64).sqrt();
    let pass = size >= DM_SIZE_RANGE.0
        && size <= DM_SIZE_RANGE.1
        && harvey_err <= IDENTITY_TOL
        && (self_ratio - 1.0).abs() <= IDENTITY_TOL
        && (own - hand).abs() <= IDENTITY_TOL
        && antisym <= IDENTITY_TOL;
    outcome(
        pass,
        format!(
            "DM size {size:.4} in {DM_SIZE_RANGE:?} over {DM_REPS} replications; Harvey(100,1) err {harvey_err:.1e}; self rRMSFE {self_ratio}; DM antisymmetry err {antisym:.1e}"
        ),
    )
}

// ------------------------------------------------------------------ 8

fn anchor_seed(seed: u64) -> Option<f64> {
    let mut phi = constant_phi(0.14, 0.1, 0.004);
    phi.alpha = [0.3, 0.2, 0.1];
    let mut spec = sim_spec(phi, ANCHOR_T, 1e8, 1e4);
    spec.seasonal = false;
    let sim = simulate(&spec, 800 + seed).ok()?;
    if sim.extinct {
        return None;
    }
    let vintages: Vec<CompartmentSeries> = ANCHOR_ORIGINS
        .map(|t| sim.series.truncate(t).unwrap())
        .collect();
    let models = [
        BacktestModel::Rolling {
            window: 60,
            dow: false,
        },
        BacktestModel::Tvp,
    ];
    let config = BacktestConfig {
        horizons: vec![1],
        mcmc: None,
        posterior_draws: 20,
        reps: 20,
        seasonal: false,
        seed,
        benchmark: "rw-60".into(),
    };
    let (_, table, _) = recursive_backtest(&vintages, &sim.series, &models, &config).ok()?;
    table
        .iter()
        .find(|r| r.model == "tvp" && r.series == "confirmed" && r.horizon == 1)
        .and_then(|r| r.rrmsfe)
}

fn criterion_8() -> Outcome {
    use rayon::prelude::*;
    let start = Instant::now();
    let ratios: Vec<Option<f64>> = (0..ANCHOR_SEEDS).into_par_iter().map(anchor_seed).collect();
    let wins = ratios.iter().filter(|r| r.is_some_and(|v| v < 1.0)).count();
    let share = wins as f64 / ANCHOR_SEEDS as f64;
    let mut sorted: Vec<f64> = ratios.iter().flatten().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let med = if sorted.is_empty() {
        f64::NAN
    } else {
        median(&sorted)
    };
    let r0 = effective_reproduction(
        &RateTriple::new(0.0122, 0.00746, 0.000133).unwrap(),
        1.0,
        1.0,
    )
    .unwrap();
    let r0_ok = (r0 - R0_MEDIANS).abs() <= R0_ROUNDING && rel_err(r0, R0_PAPER) <= R0_REL;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        share >= ANCHOR_SHARE && r0_ok,
        format!(
            "TVP beats RW-60 at h=1 in {wins}/{ANCHOR_SEEDS} seeds (share {share:.2}, need {ANCHOR_SHARE}), median rRMSFE {med:.3}; R0 at medians {r0:.5} (target {R0_MEDIANS} +/- {R0_ROUNDING}, {:.1}% from {R0_PAPER}); {secs:.0}s",
            100.0 * rel_err(r0, R0_PAPER)
        ),
    )
}

// ------------------------------------------------------------------ 9

const PIPELINE_SIM: &str = r#"{"simulate": {"phi": {"theta_l0": [-1.95, -2.2, -5.5], "alpha": [0.3, 0.2, 0.1],
  "psi": [[0.05,0,0],[0,0,0],[0,0,0]], "psi_star": [[0.02,0,0],[0,0,0],[0,0,0]], "k": null},
  "days": 150, "population": 10000000, "i0": 3000}, "seed": 9, "out": "sim"}"#;
const PIPELINE_FIT: &str = r#"{"data": "sim/data.csv", "start_threshold": 0,
  "mcmc": {"n_iter": 1200, "burn_in": 400}, "posterior_paths": 40,
  "forecast": {"horizon": 7, "reps": 5, "draws": 20}, "seed": 9, "out": "fit"}"#;
const PIPELINE_BACKTEST: &str = r#"{"start_threshold": 0, "backtest": {"vintages_dir": "vint",
  "models": ["rw-30", "rw-30-dow", "tvp"],
  "config": {"horizons": [1, 7], "posterior_draws": 10, "reps": 10, "benchmark": "rw-30"}},
  "seed": 9, "out": "bt"}"#;
const PIPELINE_EVAL: &str =
    r#"{"evaluate": {"input": "bt/forecasts.csv", "benchmark": "tvp"}, "out": "ev"}"#;

fn run_binary(dir: &Path, args: &[&str]) -> i32 {
    Process::new(env!("CARGO_BIN_EXE_tvp-sird"))
        .current_dir(dir)
        .args(args)
        .output()
        .map(|o| o.status.code().unwrap_or(-1))
        .unwrap_or(-1)
}

fn snapshot(dir: &Path, skip: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p != skip {
                    stack.push(p);
                }
            } else if p.file_name().is_some_and(|n| n != "timing.json") {
                out.push((p.clone(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(dir: &Path) -> Vec<(String, i32)> {
    let mut codes = Vec::new();
    let mut step =
        |name: &str, args: &[&str]| codes.push((name.to_string(), run_binary(dir, args)));
    step("simulate", &["simulate", "--config", "sim.json"]);
    let data = load_csv(
        &dir.join("sim/data.csv"),
        &LoadOptions {
            population: None,
            start_threshold: 0.0,
        },
    )
    .map(|d| d.series);
    let vint = dir.join("vint");
    std::fs::create_dir_all(&vint).unwrap();
    if let Ok(series) = data {
        for t in (100..=150).step_by(10) {
            let v = series.truncate(t).unwrap();
            let name = format!("{}.csv", v.dates().last().unwrap());
            write_series_csv(&vint.join(name), &v, None, None).unwrap();
        }
    }
    step("fit", &["fit", "--config", "fit.json"]);
    step(
        "fit fp",
        &[
            "fit", "--config", "fit.json", "--model", "fp", "--out", "fit_fp", "--seed", "4",
        ],
    );
    step(
        "forecast",
        &["forecast", "--config", "fit.json", "--out", "fc"],
    );
    step("backtest", &["backtest", "--config", "bt.json"]);
    step("evaluate", &["evaluate", "--config", "ev.json"]);
    codes
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (name, text) in [
        ("sim.json", PIPELINE_SIM),
        ("fit.json", PIPELINE_FIT),
        ("bt.json", PIPELINE_BACKTEST),
        ("ev.json", PIPELINE_EVAL),
    ] {
        std::fs::write(dir.join(name), text).unwrap();
    }
    let first_codes = pipeline(dir);
    let first = snapshot(dir, &dir.join("vint"));
    let second_codes = pipeline(dir);
    let second = snapshot(dir, &dir.join("vint"));
    let failed: Vec<String> = first_codes
        .iter()
        .chain(&second_codes)
        .filter(|(_, c)| *c != 0)
        .map(|(n, c)| format!("{n} exited {c}"))
        .collect();
    let differing: Vec<String> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.strip_prefix(dir).unwrap().display().to_string())
        .collect();
    let same_set = first.len() == second.len();
    let pass = failed.is_empty() && differing.is_empty() && same_set && !first.is_empty();
    outcome(
        pass,
        format!(
            "{} output files over simulate/fit/forecast/backtest/evaluate, {} differ {:?}; failures {:?}",
            first.len(),
            differing.len(),
            differing,
            failed
        ),
    )
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "score oracles", criterion_1),
        (2, "moments", criterion_2),
        (3, "seasonality", criterion_3),
        (4, "nesting", criterion_4),
        (5, "conjugate MCMC", criterion_5),
        (6, "simulation recovery", criterion_6),
        (7, "forecast evaluation", criterion_7),
        (8, "paper anchors", criterion_8),
        (9, "determinism", criterion_9),
    ];
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (k, name, f) in criteria
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.0))
    {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {k} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
