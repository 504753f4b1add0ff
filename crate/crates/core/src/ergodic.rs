//! Lyapunov weight, the weighted path metric and its Wasserstein lift, and
//! the Monte-Carlo experiments built on them: mixing decay, laws of large
//! numbers, the central limit theorem and irreducibility.
//!
//! The weighted metric is an infimum over paths and is never computed
//! exactly. Everything here works with the pair
//! `lower = ||w1 - w2|| <= rho(w1, w2) <= upper = ||w1 - w2|| int_0^1 V^r(segment)`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{Integrator, PeriodicSolution, SolverConfig, WienerStore};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng;
use crate::spectral::{ModeIndex, SpectralField, BASIS_NORM_SQ};

/// Largest ensemble handled by the exact assignment solver.
pub const MAX_EXACT_ENSEMBLE: usize = 256;

// ---------------------------------------------------------------------------
// Lyapunov function and metric bounds

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovValue {
    pub value: f64,
    /// `exp` overflowed; `value` is `+inf`.
    pub overflow: bool,
}

/// `V(w) = exp(eta ||w||^2)`.
pub fn lyapunov_v(w: &SpectralField, eta: f64) -> Result<LyapunovValue> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be nonnegative, got {eta}")));
    }
    let value = (eta * w.norm_sq()).exp();
    Ok(LyapunovValue {
        value,
        overflow: value.is_infinite(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub eta: f64,
    pub r: f64,
    pub quad_nodes: usize,
}

impl MetricConfig {
    pub fn new(eta: f64, r: f64, quad_nodes: usize) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be nonnegative, got {eta}")));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArgument(format!("r must lie in (0, 1], got {r}")));
        }
        if quad_nodes == 0 {
            return Err(Error::InvalidArgument("quad_nodes must be positive".into()));
        }
        Ok(Self { eta, r, quad_nodes })
    }

    /// `eta = 0.5 sqrt(nu / (4 B_0))`, 16 nodes.
    pub fn for_config(cfg: &SolverConfig, r: f64) -> Result<Self> {
        Self::new(default_eta(cfg)?, r, 16)
    }

    /// Rejects weights beyond the admissible bound for `cfg`.
    pub fn check_against(&self, cfg: &SolverConfig) -> Result<()> {
        let bound = default_eta(cfg)?;
        if self.eta > bound * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "eta = {} exceeds 0.5 sqrt(nu / (4 B0)) = {bound}",
                self.eta
            )));
        }
        Ok(())
    }
}

pub fn default_eta(cfg: &SolverConfig) -> Result<f64> {
    let b0 = cfg.energy_input();
    if b0 <= 0.0 || cfg.nu <= 0.0 {
        return Err(Error::Config(
            "the Lyapunov weight needs nu > 0 and nonzero noise".into(),
        ));
    }
    Ok(0.5 * (cfg.nu / (4.0 * b0)).sqrt())
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { z } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wt = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = 0.5 * (1.0 - z);
        x[n - 1 - i] = 0.5 * (1.0 + z);
        w[i] = 0.5 * wt;
        w[n - 1 - i] = 0.5 * wt;
    }
    (x, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ground {
    Lower,
    Upper,
}

/// Norm lower bound and straight-segment upper bound of the weighted metric.
pub fn rho_bounds(w1: &SpectralField, w2: &SpectralField, m: &MetricConfig) -> Result<RhoBounds> {
    w1.trunc().check_same(&w2.trunc())?;
    let d = w2.sub(w1);
    let lower = d.norm();
    if lower == 0.0 {
        return Ok(RhoBounds { lower: 0.0, upper: 0.0 });
    }
    // ||w1 + tau d||^2 is a quadratic in tau
    let a = d.norm_sq();
    let b = 2.0 * w1.inner(&d);
    let c = w1.norm_sq();
    let (x, wt) = gauss_legendre_unit(m.quad_nodes);
    let k = m.r * m.eta;
    let integral: f64 = x
        .iter()
        .zip(&wt)
        .map(|(t, q)| q * (k * (c + t * (b + t * a))).exp())
        .sum();
    Ok(RhoBounds {
        lower,
        upper: lower * integral,
    })
}

// ---------------------------------------------------------------------------
// Exact assignment

/// Minimum-cost perfect matching of a square cost matrix (Hungarian method
/// with potentials, `O(n^3)`). Returns `(total cost, column of each row)`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (total, assign)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSnapshot {
    pub fields: Vec<SpectralField>,
    pub time_index: i64,
    pub provenance: Option<String>,
}

impl EnsembleSnapshot {
    pub fn new(fields: Vec<SpectralField>, time_index: i64) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble is empty".into()))?;
        for f in &fields {
            first.trunc().check_same(&f.trunc())?;
        }
        Ok(Self {
            fields,
            time_index,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// Wasserstein distance between two equally weighted empirical measures of
/// equal size under the chosen ground bound.
pub fn empirical_wasserstein(
    a: &EnsembleSnapshot,
    b: &EnsembleSnapshot,
    m: &MetricConfig,
    ground: Ground,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    if a.len() > MAX_EXACT_ENSEMBLE {
        return Err(Error::EnsembleTooLarge(a.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    a.fields[0].trunc().check_same(&b.fields[0].trunc())?;
    let n = a.len();
    let rows = exec::map_indexed(n, Execution::Parallel, |i| {
        b.fields
            .iter()
            .map(|y| {
                let r = rho_bounds(&a.fields[i], y, m).expect("same truncation");
                match ground {
                    Ground::Lower => r.lower,
                    Ground::Upper => r.upper,
                }
            })
            .collect::<Vec<f64>>()
    });
    let (total, _) = min_cost_assignment(&rows);
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// Observables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    ModeCoefficient {
        mode: ModeIndex,
    },
    Enstrophy,
    /// `clamp(||w||^2, -L, L)`.
    ClippedEnstrophy {
        level: f64,
    },
    /// `sum_j c_j prod_i w_{k_i}^{p_i}` over low-mode coefficients.
    LowModePolynomial {
        terms: Vec<(f64, Vec<(ModeIndex, u32)>)>,
    },
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Observable::ModeCoefficient { mode } => format!("mode_coefficient{mode}"),
            Observable::Enstrophy => "enstrophy".into(),
            Observable::ClippedEnstrophy { level } => format!("clipped_enstrophy({level})"),
            Observable::LowModePolynomial { .. } => "low_mode_polynomial".into(),
        }
    }

    pub fn eval(&self, w: &SpectralField) -> f64 {
        match self {
            Observable::ModeCoefficient { mode } => w.coeff(*mode),
            Observable::Enstrophy => w.norm_sq(),
            Observable::ClippedEnstrophy { level } => w.norm_sq().clamp(-level, *level),
            Observable::LowModePolynomial { terms } => terms
                .iter()
                .map(|(c, factors)| {
                    c * factors
                        .iter()
                        .map(|(k, p)| w.coeff(*k).powi(*p as i32))
                        .product::<f64>()
                })
                .sum(),
        }
    }

    fn eval_coeffs(&self, cfg: &SolverConfig, w: &[f64]) -> f64 {
        match self {
            Observable::Enstrophy => BASIS_NORM_SQ * w.iter().map(|x| x * x).sum::<f64>(),
            Observable::ClippedEnstrophy { level } => {
                (BASIS_NORM_SQ * w.iter().map(|x| x * x).sum::<f64>()).clamp(-level, *level)
            }
            _ => self.eval(&SpectralField::from_raw(cfg.trunc, w.to_vec())),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Seed of replica `r` in ensemble `e`.
pub fn ensemble_seed(master_seed: u64, ensemble: u64, replica: u64) -> u64 {
    rng::hash64(rng::hash64(master_seed, ensemble), replica)
}

/// States at the ends of periods `0..=n_periods` from `w0` at index 0.
fn period_states(cfg: &SolverConfig, w0: &SpectralField, seed: u64, n_periods: usize) -> Result<Vec<SpectralField>> {
    let mut integ = Integrator::new(cfg)?;
    let p = integ.period_steps();
    let total = p * n_periods as i64;
    let store = noise_store(cfg, seed, 0, total)?;
    let mut w = w0.coeffs().to_vec();
    let mut out = Vec::with_capacity(n_periods + 1);
    out.push(w0.clone());
    integ.run(&mut w, 0, total, store.as_ref(), |n, x| {
        if n % p == 0 {
            out.push(SpectralField::from_raw(cfg.trunc, x.to_vec()));
        }
    })?;
    Ok(out)
}

pub(crate) fn noise_store(cfg: &SolverConfig, seed: u64, from: i64, to: i64) -> Result<Option<WienerStore>> {
    if cfg.noise.is_empty() || to <= from {
        return Ok(None);
    }
    WienerStore::derive(seed, cfg.dt, cfg.noise.channels(), from, to - 1).map(Some)
}

/// Ordinary least squares `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

// ---------------------------------------------------------------------------
// Energy balance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub time: f64,
    /// Sample mean of `||w_t||^2 - ||w_0||^2 + 2 nu int ||w||_1^2 - 2 int <w, f> - B0 t`.
    pub mean_residual: f64,
    pub std_error: f64,
    /// Sample mean of `||w_t||^2`, for scale.
    pub mean_energy: f64,
}

impl BalanceRow {
    pub fn within(&self, k: f64) -> bool {
        self.mean_residual.abs() <= k * self.std_error
    }
}

/// Monte-Carlo check of the Ito energy balance at every whole period up to
/// `n_periods`. Time integrals use the trapezoid rule on the step grid.
pub fn energy_balance_experiment(
    w0: &SpectralField,
    cfg: &SolverConfig,
    master_seed: u64,
    replicas: usize,
    n_periods: usize,
) -> Result<Vec<BalanceRow>> {
    cfg.trunc.check_same(&w0.trunc())?;
    if replicas < 2 {
        return Err(Error::InvalidArgument("need at least two replicas".into()));
    }
    let p = cfg.steps_per_period()?;
    let forcing: Vec<Vec<f64>> = (0..p)
        .map(|m| {
            cfg.forcing
                .eval_at_phase_index(cfg.trunc, m + cfg.forcing_shift, p)
                .map(|f| f.into_coeffs())
        })
        .collect::<Result<_>>()?;
    let k2: Vec<f64> = cfg.trunc.modes().iter().map(|k| k.norm_sq() as f64).collect();
    let b0 = cfg.energy_input();
    let e0 = w0.norm_sq();
    let runs = exec::map_indexed(replicas, Execution::Parallel, |r| -> Result<Vec<(f64, f64)>> {
        let mut integ = Integrator::new(cfg)?;
        let total = p * n_periods as i64;
        let store = noise_store(cfg, ensemble_seed(master_seed, 0, r as u64), 0, total)?;
        // integrand 2 nu ||w||_1^2 - 2 <w, f(t_n)> at step n
        let density = |n: i64, w: &[f64]| {
            let f = &forcing[n.rem_euclid(p) as usize];
            let mut s = 0.0;
            for i in 0..w.len() {
                s += 2.0 * cfg.nu * k2[i] * w[i] * w[i] - 2.0 * w[i] * f[i];
            }
            BASIS_NORM_SQ * s
        };
        let mut w = w0.coeffs().to_vec();
        let mut prev = density(0, &w);
        let mut integral = 0.0;
        let mut out = Vec::with_capacity(n_periods);
        integ.run(&mut w, 0, total, store.as_ref(), |n, x| {
            let cur = density(n, x);
            integral += 0.5 * (prev + cur) * cfg.dt;
            prev = cur;
            if n % p == 0 {
                let e = BASIS_NORM_SQ * x.iter().map(|c| c * c).sum::<f64>();
                let t = n as f64 * cfg.dt;
                out.push((e - e0 + integral - b0 * t, e));
            }
        })?;
        Ok(out)
    });
    let runs: Vec<Vec<(f64, f64)>> = runs.into_iter().collect::<Result<_>>()?;
    let m = replicas as f64;
    Ok((0..n_periods)
        .map(|j| {
            let mean = runs.iter().map(|r| r[j].0).sum::<f64>() / m;
            let var = runs.iter().map(|r| (r[j].0 - mean).powi(2)).sum::<f64>() / (m - 1.0);
            BalanceRow {
                time: (j + 1) as f64 * cfg.forcing.period,
                mean_residual: mean,
                std_error: (var / m).sqrt(),
                mean_energy: runs.iter().map(|r| r[j].1).sum::<f64>() / m,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Mixing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub period_index: usize,
    pub lower_dist: f64,
    pub upper_dist: f64,
    /// Same-law sampling floor: two independent ensembles started at `w1`.
    pub floor_lower: f64,
    pub floor_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub table: Vec<DecayRow>,
    /// Fitted `log(upper) = intercept - gamma t` over the rows above twice
    /// the floor.
    pub gamma_hat: Option<f64>,
    pub intercept: Option<f64>,
    pub rows_fitted: usize,
}

impl MixingReport {
    pub fn final_over_initial(&self) -> f64 {
        let first = self.table.first().map_or(f64::NAN, |r| r.upper_dist);
        let last = self.table.last().map_or(f64::NAN, |r| r.upper_dist);
        last / first
    }
}

/// Evolves ensembles from `delta_{w1}` and `delta_{w2}` with independent
/// noise per replica and records the empirical distances at whole periods.
pub fn mixing_decay_experiment(
    w1: &SpectralField,
    w2: &SpectralField,
    cfg: &SolverConfig,
    master_seed: u64,
    replicas: usize,
    n_periods: usize,
    m: &MetricConfig,
) -> Result<MixingReport> {
    if replicas == 0 {
        return Err(Error::InvalidArgument("replicas must be positive".into()));
    }
    if replicas > MAX_EXACT_ENSEMBLE {
        return Err(Error::EnsembleTooLarge(replicas));
    }
    let starts = [w1, w2, w1];
    let runs = exec::map_indexed(3 * replicas, Execution::Parallel, |i| {
        let (e, r) = (i / replicas, i % replicas);
        period_states(
            cfg,
            starts[e],
            ensemble_seed(master_seed, e as u64, r as u64),
            n_periods,
        )
    });
    let runs: Vec<Vec<SpectralField>> = runs.into_iter().collect::<Result<_>>()?;
    let snapshot = |e: usize, n: usize| -> Result<EnsembleSnapshot> {
        EnsembleSnapshot::new(
            runs[e * replicas..(e + 1) * replicas]
                .iter()
                .map(|s| s[n].clone())
                .collect(),
            n as i64,
        )
    };
    let mut table = Vec::with_capacity(n_periods + 1);
    for n in 0..=n_periods {
        let (a, b, c) = (snapshot(0, n)?, snapshot(1, n)?, snapshot(2, n)?);
        table.push(DecayRow {
            period_index: n,
            lower_dist: empirical_wasserstein(&a, &b, m, Ground::Lower)?,
            upper_dist: empirical_wasserstein(&a, &b, m, Ground::Upper)?,
            floor_lower: empirical_wasserstein(&a, &c, m, Ground::Lower)?,
            floor_upper: empirical_wasserstein(&a, &c, m, Ground::Upper)?,
        });
    }
    let t_period = cfg.forcing.period;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in &table {
        if row.upper_dist > 2.0 * row.floor_upper && row.upper_dist > 0.0 {
            xs.push(row.period_index as f64 * t_period);
            ys.push(row.upper_dist.ln());
        }
    }
    if xs.len() < 2 {
        xs = table.iter().map(|r| r.period_index as f64 * t_period).collect();
        ys = table.iter().map(|r| r.upper_dist.max(f64::MIN_POSITIVE).ln()).collect();
    }
    let fit = linear_fit(&xs, &ys);
    Ok(MixingReport {
        table,
        gamma_hat: fit.map(|(_, b)| -b),
        intercept: fit.map(|(a, _)| a),
        rows_fitted: xs.len(),
    })
}

// ---------------------------------------------------------------------------
// Laws of large numbers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    /// `(1/t) int_0^t psi(w_s) ds` on the step grid (trapezoid).
    Continuous,
    /// `(1/N) sum_{k<N} psi(w_{kT})`.
    PeriodicChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningAverage {
    /// Entry `j` is the average over the first `j + 1` periods.
    pub by_period: Vec<f64>,
}

impl RunningAverage {
    pub fn last(&self) -> f64 {
        self.by_period.last().copied().unwrap_or(f64::NAN)
    }

    /// Value after `n` periods.
    pub fn at(&self, n: usize) -> f64 {
        self.by_period[n - 1]
    }
}

pub fn wlln_estimate(
    w0: &SpectralField,
    cfg: &SolverConfig,
    seed: u64,
    psi: &Observable,
    horizon_periods: usize,
    mode: AveragingMode,
) -> Result<RunningAverage> {
    cfg.trunc.check_same(&w0.trunc())?;
    let mut integ = Integrator::new(cfg)?;
    let p = integ.period_steps();
    let mut w = w0.coeffs().to_vec();
    let mut by_period = Vec::with_capacity(horizon_periods);
    match mode {
        AveragingMode::PeriodicChain => {
            let mut sum = 0.0;
            for k in 0..horizon_periods as i64 {
                sum += psi.eval_coeffs(cfg, &w);
                by_period.push(sum / (k + 1) as f64);
                if (k as usize) + 1 < horizon_periods {
                    let store = noise_store(cfg, seed, k * p, (k + 1) * p)?;
                    integ.run(&mut w, k * p, (k + 1) * p, store.as_ref(), |_, _| {})?;
                }
            }
        }
        AveragingMode::Continuous => {
            let mut integral = 0.0;
            let mut prev = psi.eval_coeffs(cfg, &w);
            for k in 0..horizon_periods as i64 {
                let store = noise_store(cfg, seed, k * p, (k + 1) * p)?;
                integ.run(&mut w, k * p, (k + 1) * p, store.as_ref(), |_, x| {
                    let cur = psi.eval_coeffs(cfg, x);
                    integral += 0.5 * (prev + cur) * cfg.dt;
                    prev = cur;
                })?;
                by_period.push(integral / ((k + 1) as f64 * cfg.forcing.period));
            }
        }
    }
    Ok(RunningAverage { by_period })
}

// ---------------------------------------------------------------------------
// Central limit theorem

/// How the centering constant is estimated: `replicas` independent runs of
/// `periods` periods each after `burn_in` discarded periods, all samples at
/// phase 0 pooled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenteringPlan {
    pub replicas: usize,
    pub periods: usize,
    pub burn_in: usize,
}

impl Default for CenteringPlan {
    /// One run of 512 periods after 64 burn-in periods.
    fn default() -> Self {
        Self {
            replicas: 1,
            periods: 512,
            burn_in: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltSeries {
    pub n: usize,
    pub samples: Vec<f64>,
    pub sigma2_hat: f64,
    pub ks_statistic: f64,
    /// Sample variance is zero (or not positive after centering).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub mu_hat: f64,
    pub mu_standard_error: f64,
    pub burn_in_periods: usize,
    pub series: Vec<CltSeries>,
}

impl CltReport {
    pub fn for_n(&self, n: usize) -> Option<&CltSeries> {
        self.series.iter().find(|s| s.n == n)
    }
}

/// Kolmogorov-Smirnov distance of `samples` to `Normal(0, sigma2)`.
pub fn ks_statistic_normal(samples: &[f64], sigma2: f64) -> f64 {
    if samples.is_empty() || !(sigma2 > 0.0) {
        return f64::NAN;
    }
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("positive variance");
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Values of `psi` at phase 0 of periods `burn_in .. burn_in + count`.
fn chain_values(
    cfg: &SolverConfig,
    w0: &SpectralField,
    seed: u64,
    psi: &Observable,
    burn_in: usize,
    count: usize,
) -> Result<Vec<f64>> {
    let mut integ = Integrator::new(cfg)?;
    let p = integ.period_steps();
    let mut w = w0.coeffs().to_vec();
    let mut out = Vec::with_capacity(count);
    for k in 0..(burn_in + count) as i64 {
        if k as usize >= burn_in {
            out.push(psi.eval_coeffs(cfg, &w));
        }
        if (k as usize) + 1 < burn_in + count {
            let store = noise_store(cfg, seed, k * p, (k + 1) * p)?;
            integ.run(&mut w, k * p, (k + 1) * p, store.as_ref(), |_, _| {})?;
        }
    }
    Ok(out)
}

/// `N^{-1/2} sum_{k<N} (psi(w_{kT}) - mu_hat)` over `replicas` independent
/// chains, for every `N` in `ns`, all read off the same chains.
#[allow(clippy::too_many_arguments)]
pub fn clt_experiment(
    w0: &SpectralField,
    cfg: &SolverConfig,
    master_seed: u64,
    psi: &Observable,
    ns: &[usize],
    replicas: usize,
    burn_in_periods: usize,
    centering: CenteringPlan,
) -> Result<CltReport> {
    if ns.is_empty() || ns.contains(&0) || replicas == 0 {
        return Err(Error::InvalidArgument("need positive N values and replicas".into()));
    }
    if centering.replicas == 0 || centering.periods == 0 {
        return Err(Error::InvalidArgument("centering plan must be nonempty".into()));
    }
    // ensemble 1 is reserved for centering so it never shares noise with the samples
    let pooled = exec::map_indexed(centering.replicas, Execution::Parallel, |r| {
        chain_values(
            cfg,
            w0,
            ensemble_seed(master_seed, 1, r as u64),
            psi,
            centering.burn_in,
            centering.periods,
        )
    });
    let pooled: Vec<f64> = pooled.into_iter().collect::<Result<Vec<_>>>()?.concat();
    let mu_hat = pooled.iter().sum::<f64>() / pooled.len() as f64;
    // replicas are independent, so their means give an honest standard error
    let per_run: Vec<f64> = pooled
        .chunks(centering.periods)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let mu_standard_error = (sample_variance(&per_run) / per_run.len() as f64).sqrt();

    let n_max = *ns.iter().max().expect("nonempty");
    let chains = exec::map_indexed(replicas, Execution::Parallel, |r| {
        chain_values(
            cfg,
            w0,
            ensemble_seed(master_seed, 0, r as u64),
            psi,
            burn_in_periods,
            n_max,
        )
    });
    let chains: Vec<Vec<f64>> = chains.into_iter().collect::<Result<_>>()?;
    let series = ns
        .iter()
        .map(|&n| {
            let samples: Vec<f64> = chains
                .iter()
                .map(|c| c[..n].iter().map(|v| v - mu_hat).sum::<f64>() / (n as f64).sqrt())
                .collect();
            let sigma2_hat = sample_variance(&samples);
            // identical replicas leave only round-off in the variance
            let scale = samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64;
            let degenerate = !(sigma2_hat > 1e-20 * scale) || sigma2_hat == 0.0;
            CltSeries {
                n,
                ks_statistic: if degenerate {
                    f64::NAN
                } else {
                    ks_statistic_normal(&samples, sigma2_hat)
                },
                samples,
                sigma2_hat,
                degenerate,
            }
        })
        .collect();
    Ok(CltReport {
        mu_hat,
        mu_standard_error,
        burn_in_periods,
        series,
    })
}

// ---------------------------------------------------------------------------
// Irreducibility

/// Uniform point on the sphere `||w|| = radius` in coefficient space.
pub fn sphere_sample(cfg: &SolverConfig, radius: f64, seed: u64) -> SpectralField {
    let c: Vec<f64> = (0..cfg.trunc.len())
        .map(|i| rng::normal(seed, u64::MAX, i as i64))
        .collect();
    let f = SpectralField::from_raw(cfg.trunc, c);
    let n = f.norm();
    f.scaled(radius / n)
}

/// Fraction of replicas started on `||w0|| = radius` that lie within
/// `target_tol` (norm distance) of `z(s)` after `n_periods` periods.
pub fn irreducibility_probe(
    radius: f64,
    target_tol: f64,
    cfg: &SolverConfig,
    z: &PeriodicSolution,
    master_seed: u64,
    replicas: usize,
    n_periods: usize,
) -> Result<f64> {
    if replicas == 0 {
        return Err(Error::InvalidArgument("replicas must be positive".into()));
    }
    let target = &z.period.frames[0];
    let hits = exec::map_indexed(replicas, Execution::Parallel, |r| -> Result<bool> {
        let seed = ensemble_seed(master_seed, 0, r as u64);
        let w0 = sphere_sample(cfg, radius, seed);
        let states = period_states(cfg, &w0, seed, n_periods)?;
        Ok(states[n_periods].sub(target).norm() <= target_tol)
    });
    let hits = hits.into_iter().collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / replicas as f64)
}
