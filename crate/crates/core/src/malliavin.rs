//! Projected Malliavin Gram matrices along stored trajectories.
//!
//! For a direction `xi` the backward adjoint `U(r) = J_{r,t}^T xi` is run
//! from `t` down to `tau`; then
//! `<M xi_a, xi_b> = sum_i int <g_i, U_a(r)> <g_i, U_b(r)> dr`
//! with trapezoid quadrature over the chosen nodes.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bracket::ForcedModeSet;
use crate::dynamics::{propagate_jacobian, simulate, Integrator, SolverConfig, Trajectory, WienerStore};
use crate::ergodic::ensemble_seed;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::spectral::{ModeIndex, SpectralField, TruncationSpec, BASIS_NORM_SQ};

/// Relative threshold for the degenerate fraction: `eps = EPS_REL * trace / p`.
pub const EPS_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalliavinReport {
    pub window: (i64, i64),
    pub projection_modes: Vec<ModeIndex>,
    /// Row-major, `p x p`.
    pub gram: Vec<Vec<f64>>,
    /// Squared singular values of the quadrature factor `A` with `M = A^T A`,
    /// ascending. Accurate far below `eps * trace`, unlike `direct_eigenvalues`.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    /// Eigenvalues of the symmetrised `gram` itself, ascending.
    pub direct_eigenvalues: Vec<f64>,
    pub trace: f64,
    /// Largest `|G_ab - G_ba|` before symmetrisation.
    pub asymmetry: f64,
    pub complement_max_quadform: Option<f64>,
}

impl MalliavinReport {
    pub fn is_psd(&self) -> bool {
        let min = self.direct_eigenvalues.first().copied().unwrap_or(0.0);
        min >= -1e-10 * self.trace.abs().max(f64::MIN_POSITIVE)
    }

    /// Numerical full rank of the factor: `sigma_min > p * eps * sigma_max`.
    pub fn full_rank(&self) -> bool {
        let p = self.eigenvalues.len();
        match (self.eigenvalues.first(), self.eigenvalues.last()) {
            (Some(lo), Some(hi)) => lo.sqrt() > p as f64 * f64::EPSILON * hi.sqrt(),
            _ => false,
        }
    }
}

/// `U^{t, phi}(tau)`: the adjoint of `J_{tau, t}` applied to `phi`.
pub fn backward_adjoint(traj: &Trajectory, phi: &SpectralField, t_index: i64, tau_index: i64) -> Result<SpectralField> {
    traj.check_window(tau_index, t_index)?;
    traj.config.trunc.check_same(&phi.trunc())?;
    let mut integ = Integrator::new(&traj.config)?;
    let mut u = phi.coeffs().to_vec();
    for n in (tau_index..t_index).rev() {
        integ.adjoint_step(traj.frame(n).expect("checked window").coeffs(), &mut u);
    }
    Ok(SpectralField::from_raw(phi.trunc(), u))
}

/// Quadrature nodes `tau, tau + s, ...` plus `t`, with trapezoid weights
/// in time units.
fn trapezoid_nodes(tau: i64, t: i64, stride: usize, dt: f64) -> (Vec<i64>, Vec<f64>) {
    let mut nodes: Vec<i64> = (tau..=t).step_by(stride.max(1)).collect();
    if *nodes.last().expect("nonempty") != t {
        nodes.push(t);
    }
    let mut weights = vec![0.0; nodes.len()];
    for j in 1..nodes.len() {
        let h = 0.5 * (nodes[j] - nodes[j - 1]) as f64 * dt;
        weights[j - 1] += h;
        weights[j] += h;
    }
    (nodes, weights)
}

fn check_modes(modes: &[ModeIndex], trunc: TruncationSpec) -> Result<Vec<usize>> {
    modes
        .iter()
        .enumerate()
        .map(|(i, k)| {
            if modes[..i].contains(k) {
                return Err(Error::DuplicateMode(*k));
            }
            trunc.index_of(*k).ok_or(Error::OutOfTruncation {
                mode: *k,
                radius: trunc.radius,
            })
        })
        .collect()
}

/// Channel slots `(index, amplitude)` of the noise directions.
fn noise_slots(noise: &ForcedModeSet, trunc: TruncationSpec) -> Result<Vec<(usize, f64)>> {
    let idx = check_modes(noise.modes(), trunc)?;
    Ok(idx.into_iter().zip(noise.amplitudes().iter().copied()).collect())
}

/// Unit direction along `gamma_k`.
fn unit_direction(trunc: TruncationSpec, i: usize) -> SpectralField {
    let mut c = vec![0.0; trunc.len()];
    c[i] = 1.0 / BASIS_NORM_SQ.sqrt();
    SpectralField::from_raw(trunc, c)
}

/// `<g_i, U(r)>` at every node, for every channel: `out[node][channel]`.
fn adjoint_series(
    traj: &Trajectory,
    xi: &SpectralField,
    slots: &[(usize, f64)],
    tau: i64,
    t: i64,
    nodes: &[i64],
) -> Result<Vec<Vec<f64>>> {
    let mut integ = Integrator::new(&traj.config)?;
    let mut u = xi.coeffs().to_vec();
    let sample = |u: &[f64]| {
        slots
            .iter()
            .map(|&(i, a)| BASIS_NORM_SQ * a * u[i])
            .collect::<Vec<f64>>()
    };
    let mut out = vec![Vec::new(); nodes.len()];
    let mut j = nodes.len() - 1;
    out[j] = sample(&u);
    for n in (tau..t).rev() {
        integ.adjoint_step(traj.frame(n).expect("checked window").coeffs(), &mut u);
        if j > 0 && nodes[j - 1] == n {
            j -= 1;
            out[j] = sample(&u);
        }
    }
    Ok(out)
}

fn quadform(a: &[Vec<f64>], b: &[Vec<f64>], weights: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((ra, rb), w) in a.iter().zip(b).zip(weights) {
        let inner: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        s += w * inner;
    }
    s
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// `factor` has one row per (node, channel) and one column per direction.
fn finish_report(
    window: (i64, i64),
    projection_modes: &[ModeIndex],
    gram: Vec<Vec<f64>>,
    factor: DMatrix<f64>,
    complement_max_quadform: Option<f64>,
) -> MalliavinReport {
    let p = gram.len();
    let mut asymmetry: f64 = 0.0;
    for a in 0..p {
        for b in 0..a {
            asymmetry = asymmetry.max((gram[a][b] - gram[b][a]).abs());
        }
    }
    let m = DMatrix::from_fn(p, p, |a, b| 0.5 * (gram[a][b] + gram[b][a]));
    let trace = m.trace();
    let (direct, eigenvalues) = if p == 0 {
        (Vec::new(), Vec::new())
    } else {
        let direct = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        // pad so that a factor with fewer rows than columns reports zeros
        let sv: Vec<f64> = factor.singular_values().iter().map(|s| s * s).collect();
        let mut ev = vec![0.0; p.saturating_sub(sv.len())];
        ev.extend(sv);
        (direct, ev)
    };
    let eigenvalues = sorted(eigenvalues);
    MalliavinReport {
        window,
        projection_modes: projection_modes.to_vec(),
        gram,
        min_eigenvalue: eigenvalues.first().copied().unwrap_or(0.0),
        eigenvalues,
        direct_eigenvalues: sorted(direct),
        trace,
        asymmetry,
        complement_max_quadform,
    }
}

/// Stacks `sqrt(w_node) * values[a][node][channel]` into rows.
fn factor_matrix(
    values: impl Fn(usize, usize, usize) -> f64,
    weights: &[f64],
    channels: usize,
    p: usize,
) -> DMatrix<f64> {
    DMatrix::from_fn(weights.len() * channels, p, |row, a| {
        let (node, ch) = (row / channels, row % channels);
        weights[node].sqrt() * values(a, node, ch)
    })
}

/// Backward assembly on every `stride`-th step (stride 1 is the full grid).
pub fn projected_malliavin_gram_strided(
    traj: &Trajectory,
    tau_index: i64,
    t_index: i64,
    projection_modes: &[ModeIndex],
    noise: &ForcedModeSet,
    complement: Option<&[ModeIndex]>,
    stride: usize,
) -> Result<MalliavinReport> {
    traj.check_window(tau_index, t_index)?;
    let trunc = traj.config.trunc;
    let proj = check_modes(projection_modes, trunc)?;
    let slots = noise_slots(noise, trunc)?;
    let (nodes, weights) = trapezoid_nodes(tau_index, t_index, stride, traj.config.dt);
    let series: Vec<Vec<Vec<f64>>> = proj
        .iter()
        .map(|&i| adjoint_series(traj, &unit_direction(trunc, i), &slots, tau_index, t_index, &nodes))
        .collect::<Result<_>>()?;
    let p = proj.len();
    let mut gram = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            gram[a][b] = quadform(&series[a], &series[b], &weights);
        }
    }
    let complement_max = match complement {
        None => None,
        Some(modes) => {
            let mut worst = f64::NEG_INFINITY;
            for i in check_modes(modes, trunc)? {
                let s = adjoint_series(traj, &unit_direction(trunc, i), &slots, tau_index, t_index, &nodes)?;
                worst = worst.max(quadform(&s, &s, &weights));
            }
            (!modes.is_empty()).then_some(worst)
        }
    };
    let factor = factor_matrix(|a, node, ch| series[a][node][ch], &weights, slots.len(), p);
    Ok(finish_report(
        (tau_index, t_index),
        projection_modes,
        gram,
        factor,
        complement_max,
    ))
}

pub fn projected_malliavin_gram(
    traj: &Trajectory,
    tau_index: i64,
    t_index: i64,
    projection_modes: &[ModeIndex],
    noise: &ForcedModeSet,
    complement: Option<&[ModeIndex]>,
) -> Result<MalliavinReport> {
    projected_malliavin_gram_strided(traj, tau_index, t_index, projection_modes, noise, complement, 1)
}

/// The same Gram built from forward Jacobians `J_{r,t} g_i`, one solve per
/// node and channel, on every `stride`-th step.
pub fn forward_malliavin_gram(
    traj: &Trajectory,
    tau_index: i64,
    t_index: i64,
    projection_modes: &[ModeIndex],
    noise: &ForcedModeSet,
    stride: usize,
) -> Result<MalliavinReport> {
    traj.check_window(tau_index, t_index)?;
    let trunc = traj.config.trunc;
    let proj = check_modes(projection_modes, trunc)?;
    let slots = noise_slots(noise, trunc)?;
    let (nodes, weights) = trapezoid_nodes(tau_index, t_index, stride, traj.config.dt);
    let c = BASIS_NORM_SQ.sqrt();
    // proj_vals[node][channel][a] = <xi_a, J_{r,t} g_i>
    let mut proj_vals = Vec::with_capacity(nodes.len());
    for &r in &nodes {
        let mut per_channel = Vec::with_capacity(slots.len());
        for &(i, amp) in &slots {
            let mut g = vec![0.0; trunc.len()];
            g[i] = amp;
            let v = propagate_jacobian(traj, &SpectralField::from_raw(trunc, g), r, t_index)?;
            per_channel.push(proj.iter().map(|&a| c * v.coeffs()[a]).collect::<Vec<f64>>());
        }
        proj_vals.push(per_channel);
    }
    let p = proj.len();
    let mut gram = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            gram[a][b] = proj_vals
                .iter()
                .zip(&weights)
                .map(|(pc, w)| w * pc.iter().map(|v| v[a] * v[b]).sum::<f64>())
                .sum();
        }
    }
    let factor = factor_matrix(|a, node, ch| proj_vals[node][ch][a], &weights, slots.len(), p);
    Ok(finish_report(
        (tau_index, t_index),
        projection_modes,
        gram,
        factor,
        None,
    ))
}

/// Largest entrywise difference relative to the largest entry.
pub fn gram_relative_difference(a: &MalliavinReport, b: &MalliavinReport) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (ra, rb) in a.gram.iter().zip(&b.gram) {
        for (x, y) in ra.iter().zip(rb) {
            diff = diff.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub samples: usize,
    pub window_periods: usize,
    /// Periods run before the window opens.
    pub burn_in_periods: usize,
    pub projection_modes: Vec<ModeIndex>,
    pub complement_modes: Option<Vec<ModeIndex>>,
    /// `None` selects `EPS_REL * trace / p` per sample.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub seed: u64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub full_rank: bool,
    pub psd: bool,
    pub trace: f64,
    pub epsilon: f64,
    pub complement_max_quadform: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub samples: Vec<ProbeSample>,
    /// Min-eigenvalue quantiles at 0, 0.1, 0.5, 0.9, 1.
    pub min_eig_quantiles: Vec<f64>,
    pub degenerate_fraction: f64,
    /// Share of samples whose Gram has numerical full rank.
    pub full_rank_fraction: f64,
    pub complement_max_quadform: Option<f64>,
}

pub const PROBE_QUANTILES: [f64; 5] = [0.0, 0.1, 0.5, 0.9, 1.0];

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn trajectory(cfg: &SolverConfig, w0: &SpectralField, seed: u64, n_steps: usize) -> Result<Trajectory> {
    let store = WienerStore::derive(seed, cfg.dt, cfg.noise.channels(), 0, n_steps.max(1) as i64 - 1)?;
    simulate(w0, 0, n_steps, cfg, &store)
}

/// Independent trajectories from `w0`; each sample's Gram covers the last
/// `window_periods` periods.
pub fn nondegeneracy_probe(
    cfg: &SolverConfig,
    master_seed: u64,
    w0: &SpectralField,
    settings: &ProbeSettings,
) -> Result<ProbeReport> {
    if settings.samples == 0 {
        return Err(Error::InvalidArgument("samples must be at least 1".into()));
    }
    let p = cfg.steps_per_period()?;
    let tau = p * settings.burn_in_periods as i64;
    let t = tau + p * settings.window_periods as i64;
    let samples = exec::map_indexed(settings.samples, Execution::Parallel, |s| -> Result<ProbeSample> {
        let seed = ensemble_seed(master_seed, 0, s as u64);
        let traj = trajectory(cfg, w0, seed, t as usize)?;
        let rep = projected_malliavin_gram(
            &traj,
            tau,
            t,
            &settings.projection_modes,
            &cfg.noise,
            settings.complement_modes.as_deref(),
        )?;
        let dim = settings.projection_modes.len().max(1) as f64;
        Ok(ProbeSample {
            seed,
            min_eigenvalue: rep.min_eigenvalue,
            max_eigenvalue: rep.eigenvalues.last().copied().unwrap_or(0.0),
            full_rank: rep.full_rank(),
            psd: rep.is_psd(),
            trace: rep.trace,
            epsilon: settings.epsilon.unwrap_or(EPS_REL * rep.trace / dim),
            complement_max_quadform: rep.complement_max_quadform,
        })
    });
    let samples: Vec<ProbeSample> = samples.into_iter().collect::<Result<_>>()?;
    let mut mins: Vec<f64> = samples.iter().map(|s| s.min_eigenvalue).collect();
    mins.sort_by(f64::total_cmp);
    let degenerate = samples.iter().filter(|s| !(s.min_eigenvalue > s.epsilon)).count();
    let complement_max_quadform = samples
        .iter()
        .filter_map(|s| s.complement_max_quadform)
        .reduce(f64::max);
    Ok(ProbeReport {
        min_eig_quantiles: PROBE_QUANTILES.iter().map(|q| quantile(&mins, *q)).collect(),
        degenerate_fraction: degenerate as f64 / samples.len() as f64,
        full_rank_fraction: samples.iter().filter(|s| s.full_rank).count() as f64 / samples.len() as f64,
        samples,
        complement_max_quadform,
    })
}

/// Modes with `|k|_inf <= radius` inside the truncation.
pub fn box_modes(trunc: TruncationSpec, radius: u32) -> Vec<ModeIndex> {
    trunc.modes().into_iter().filter(|k| k.max_norm() <= radius).collect()
}
