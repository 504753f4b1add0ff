//! Time stepping for the truncated stochastic vorticity equation
//!
//! `dw + B(Kw, w) dt = nu Laplacian(w) dt + f(t) dt + G dW`
//!
//! with exponential Euler-Maruyama:
//!
//! `w' = E (w + G dW_n) + dt phi1(-nu |k|^2 dt) (-B(Kw, w) + f(t_n))`
//!
//! where `E = exp(-nu |k|^2 dt)`. All time is integer step indices. The forcing
//! phase is evaluated from `n mod P` with `P = T / dt`, and noise increments are
//! looked up by index in a [`WienerStore`], so shifting time by whole steps is
//! exact index arithmetic.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::bracket::ForcedModeSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::spectral::{ModeIndex, ProductWorkspace, SpectralField, TruncationSpec, BASIS_NORM_SQ};

// ---------------------------------------------------------------------------
// Wiener paths

/// Two-sided Brownian increments on the step grid, `channels` independent
/// components, materialised over `[n_min, n_max]`.
///
/// Increment `(i, n)` is `sqrt(dt) * normal(seed, i, n + offset)`, so it never
/// changes when the window is widened, and a shift only moves `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerStore {
    master_seed: u64,
    dt: f64,
    channels: usize,
    n_min: i64,
    n_max: i64,
    offset: i64,
    increments: Vec<f64>,
}

impl WienerStore {
    pub fn derive(master_seed: u64, dt: f64, channels: usize, n_min: i64, n_max: i64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if n_min > n_max {
            return Err(Error::InvalidArgument(format!("empty index range [{n_min}, {n_max}]")));
        }
        Self::generate(master_seed, dt, channels, n_min, n_max, 0)
    }

    /// Store for replica `index` of an ensemble under `master_seed`.
    pub fn for_replica(master_seed: u64, index: u64, dt: f64, channels: usize, n_min: i64, n_max: i64) -> Result<Self> {
        Self::derive(rng::hash64(master_seed, index), dt, channels, n_min, n_max)
    }

    fn generate(master_seed: u64, dt: f64, channels: usize, n_min: i64, n_max: i64, offset: i64) -> Result<Self> {
        let len = (n_max - n_min + 1) as usize;
        let sq = dt.sqrt();
        let mut increments = Vec::with_capacity(len * channels);
        for n in n_min..=n_max {
            let m = n.checked_add(offset).ok_or(Error::IndexOverflow(offset))?;
            for i in 0..channels {
                increments.push(sq * rng::normal(master_seed, i as u64, m));
            }
        }
        Ok(Self {
            master_seed,
            dt,
            channels,
            n_min,
            n_max,
            offset,
            increments,
        })
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> (i64, i64) {
        (self.n_min, self.n_max)
    }

    /// The same path over a wider (or narrower) window.
    pub fn with_range(&self, n_min: i64, n_max: i64) -> Result<Self> {
        if n_min > n_max {
            return Err(Error::InvalidArgument(format!("empty index range [{n_min}, {n_max}]")));
        }
        Self::generate(self.master_seed, self.dt, self.channels, n_min, n_max, self.offset)
    }

    /// `theta`: increment `n` of the result is increment `n + steps` of `self`.
    pub fn shift(&self, steps: i64) -> Result<Self> {
        let n_min = self.n_min.checked_sub(steps).ok_or(Error::IndexOverflow(steps))?;
        let n_max = self.n_max.checked_sub(steps).ok_or(Error::IndexOverflow(steps))?;
        let offset = self.offset.checked_add(steps).ok_or(Error::IndexOverflow(steps))?;
        Ok(Self {
            n_min,
            n_max,
            offset,
            increments: self.increments.clone(),
            ..*self
        })
    }

    /// All channels of the increment over `[n dt, (n+1) dt]`.
    pub fn increments_at(&self, n: i64) -> &[f64] {
        assert!(
            n >= self.n_min && n <= self.n_max,
            "increment {n} outside [{}, {}]",
            self.n_min,
            self.n_max
        );
        let o = (n - self.n_min) as usize * self.channels;
        &self.increments[o..o + self.channels]
    }

    pub fn increment(&self, channel: usize, n: i64) -> f64 {
        self.increments_at(n)[channel]
    }

    /// Steps `[from, to)` must all have increments.
    pub fn check_covers(&self, from: i64, to: i64) -> Result<()> {
        if to > from && (from < self.n_min || to - 1 > self.n_max) {
            return Err(Error::WindowNotCovered {
                have_min: self.n_min,
                have_max: self.n_max,
                need_min: from,
                need_max: to - 1,
            });
        }
        Ok(())
    }
}

/// Shorthand used throughout the experiments.
pub fn derive_wiener_store(master_seed: u64, dt: f64, channels: usize, n_min: i64, n_max: i64) -> Result<WienerStore> {
    WienerStore::derive(master_seed, dt, channels, n_min, n_max)
}

pub fn shift_wiener(store: &WienerStore, steps: i64) -> Result<WienerStore> {
    store.shift(steps)
}

// ---------------------------------------------------------------------------
// Forcing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcingTerm {
    pub mode: ModeIndex,
    pub amplitude: f64,
    /// Radians.
    pub phase: f64,
}

/// `f(t) = sum_j A_j cos(2 pi t / T + phi_j) gamma_{k_j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingProfile {
    pub period: f64,
    pub terms: Vec<ForcingTerm>,
}

impl ForcingProfile {
    pub fn new(period: f64, terms: Vec<ForcingTerm>) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Config(format!("period must be positive, got {period}")));
        }
        for t in &terms {
            if t.mode.is_zero() {
                return Err(Error::ZeroMode);
            }
            if !(t.amplitude.is_finite() && t.phase.is_finite()) {
                return Err(Error::NonFinite(format!("forcing term on {}", t.mode)));
            }
        }
        Ok(Self { period, terms })
    }

    pub fn zero(period: f64) -> Self {
        Self {
            period,
            terms: Vec::new(),
        }
    }

    /// A single mode with constant-in-time amplitude is `phase = 0` and a
    /// very long period; this helper is the periodic one-mode case.
    pub fn single(period: f64, mode: ModeIndex, amplitude: f64, phase: f64) -> Result<Self> {
        Self::new(period, vec![ForcingTerm { mode, amplitude, phase }])
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.amplitude == 0.0)
    }

    /// Per-mode complex amplitude `Z_k = sum A e^{i phi}`, so that the
    /// coefficient of `gamma_k` at phase `theta` is `Re(Z_k e^{i theta})`.
    fn phasors(&self) -> Vec<(ModeIndex, f64, f64)> {
        let mut out: Vec<(ModeIndex, f64, f64)> = Vec::new();
        for t in &self.terms {
            let (re, im) = (t.amplitude * t.phase.cos(), t.amplitude * t.phase.sin());
            match out.iter_mut().find(|(k, _, _)| *k == t.mode) {
                Some(e) => {
                    e.1 += re;
                    e.2 += im;
                }
                None => out.push((t.mode, re, im)),
            }
        }
        out
    }

    /// `sup_t ||f(t)||` in closed form.
    ///
    /// `||f||^2 = c/2 (sum |Z_k|^2 + Re(S e^{2 i theta}))` with `S = sum Z_k^2`,
    /// maximised at `(sum |Z_k|^2 + |S|) / 2`.
    pub fn sup_norm(&self) -> f64 {
        let (mut mod_sq, mut s_re, mut s_im) = (0.0, 0.0, 0.0);
        for (_, re, im) in self.phasors() {
            mod_sq += re * re + im * im;
            s_re += re * re - im * im;
            s_im += 2.0 * re * im;
        }
        (BASIS_NORM_SQ * 0.5 * (mod_sq + s_re.hypot(s_im))).sqrt()
    }

    /// `f(t)` at an arbitrary real time.
    pub fn eval(&self, trunc: TruncationSpec, t: f64) -> Result<SpectralField> {
        let theta = TAU * t / self.period;
        self.field_at_phase(trunc, |phase| (theta + phase).cos())
    }

    /// `f(t_m)` at grid phase `m` of `steps_per_period`.
    pub fn eval_at_phase_index(&self, trunc: TruncationSpec, m: i64, steps_per_period: i64) -> Result<SpectralField> {
        let m = m.rem_euclid(steps_per_period);
        self.field_at_phase(trunc, |phase| phase_cos(m, steps_per_period, phase))
    }

    fn field_at_phase(&self, trunc: TruncationSpec, c: impl Fn(f64) -> f64) -> Result<SpectralField> {
        let mut out = SpectralField::zeros(trunc);
        for t in &self.terms {
            let i = trunc.index_of(t.mode).ok_or(Error::OutOfTruncation {
                mode: t.mode,
                radius: trunc.radius,
            })?;
            out.coeffs_mut()[i] += t.amplitude * c(t.phase);
        }
        Ok(out)
    }
}

#[inline]
fn phase_cos(m: i64, p: i64, phase: f64) -> f64 {
    (TAU * m as f64 / p as f64 + phase).cos()
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub nu: f64,
    pub dt: f64,
    pub trunc: TruncationSpec,
    pub noise: ForcedModeSet,
    pub forcing: ForcingProfile,
    /// Integer phase offset of the forcing in steps (a point of the hull).
    #[serde(default)]
    pub forcing_shift: i64,
    /// Switches `B(Kw, w)` off, leaving a linear (Ornstein-Uhlenbeck) system.
    #[serde(default = "yes")]
    pub nonlinear: bool,
}

fn yes() -> bool {
    true
}

impl SolverConfig {
    pub fn new(nu: f64, dt: f64, trunc: TruncationSpec, noise: ForcedModeSet, forcing: ForcingProfile) -> Result<Self> {
        let cfg = Self {
            nu,
            dt,
            trunc,
            noise,
            forcing,
            forcing_shift: 0,
            nonlinear: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_nonlinear(mut self, on: bool) -> Self {
        self.nonlinear = on;
        self
    }

    pub fn with_forcing_shift(mut self, steps: i64) -> Self {
        self.forcing_shift = steps;
        self
    }

    pub fn with_noise(mut self, noise: ForcedModeSet) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(Error::Config(format!("nu must be nonnegative, got {}", self.nu)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        self.steps_per_period()?;
        for k in self
            .noise
            .modes()
            .iter()
            .chain(self.forcing.terms.iter().map(|t| &t.mode))
        {
            if !self.trunc.contains(*k) {
                return Err(Error::OutOfTruncation {
                    mode: *k,
                    radius: self.trunc.radius,
                });
            }
        }
        Ok(())
    }

    /// `P = T / dt`, which must be an integer.
    pub fn steps_per_period(&self) -> Result<i64> {
        let ratio = self.forcing.period / self.dt;
        let p = ratio.round();
        if !(p >= 1.0 && (ratio - p).abs() <= 1e-9 * p) {
            return Err(Error::Config(format!(
                "period {} is not an integer multiple of dt {}",
                self.forcing.period, self.dt
            )));
        }
        Ok(p as i64)
    }

    /// `B_0`.
    pub fn energy_input(&self) -> f64 {
        self.noise.energy_input()
    }
}

// ---------------------------------------------------------------------------
// Integrator

/// Precomputed per-mode factors plus product scratch for one configuration.
#[derive(Debug)]
pub struct Integrator {
    cfg: SolverConfig,
    period_steps: i64,
    decay: Vec<f64>,
    gain: Vec<f64>,
    noise_slots: Vec<(usize, f64)>,
    forcing_slots: Vec<(usize, f64, f64)>,
    ws: ProductWorkspace,
    scratch: Vec<f64>,
}

/// `(e^z - 1) / z` with the removable singularity filled in.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

impl Integrator {
    pub fn new(cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let trunc = cfg.trunc;
        let modes = trunc.modes();
        let decay = modes
            .iter()
            .map(|k| (-cfg.nu * k.norm_sq() as f64 * cfg.dt).exp())
            .collect();
        let gain = modes
            .iter()
            .map(|k| cfg.dt * phi1(-cfg.nu * k.norm_sq() as f64 * cfg.dt))
            .collect();
        let slot = |k: ModeIndex| trunc.index_of(k).expect("validated");
        let noise_slots = cfg
            .noise
            .modes()
            .iter()
            .zip(cfg.noise.amplitudes())
            .map(|(k, a)| (slot(*k), *a))
            .collect();
        let forcing_slots = cfg
            .forcing
            .terms
            .iter()
            .filter(|t| t.amplitude != 0.0)
            .map(|t| (slot(t.mode), t.amplitude, t.phase))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            period_steps: cfg.steps_per_period()?,
            decay,
            gain,
            noise_slots,
            forcing_slots,
            ws: ProductWorkspace::new(trunc),
            scratch: vec![0.0; trunc.len()],
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn period_steps(&self) -> i64 {
        self.period_steps
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn gain(&self) -> &[f64] {
        &self.gain
    }

    /// Adds `f(t_n)` into `out`.
    fn add_forcing(&self, n: i64, out: &mut [f64]) {
        if self.forcing_slots.is_empty() {
            return;
        }
        let m = (n as i128 + self.cfg.forcing_shift as i128).rem_euclid(self.period_steps as i128) as i64;
        for &(i, a, phase) in &self.forcing_slots {
            out[i] += a * phase_cos(m, self.period_steps, phase);
        }
    }

    /// One step from index `n` to `n + 1`, in place. `increments` are the
    /// channel increments of step `n`; `None` means no noise.
    pub fn step_in_place(&mut self, w: &mut [f64], n: i64, increments: Option<&[f64]>) {
        let mut drift = std::mem::take(&mut self.scratch);
        if self.cfg.nonlinear {
            self.ws.nonlinear_into(w, &mut drift);
            drift.iter_mut().for_each(|x| *x = -*x);
        } else {
            drift.iter_mut().for_each(|x| *x = 0.0);
        }
        self.add_forcing(n, &mut drift);
        if let Some(dw) = increments {
            for (l, &(i, a)) in self.noise_slots.iter().enumerate() {
                w[i] += a * dw[l];
            }
        }
        for i in 0..w.len() {
            w[i] = self.decay[i] * w[i] + self.gain[i] * drift[i];
        }
        self.scratch = drift;
    }

    /// Advances `w` from index `from` to `to`, calling `visit(n, w)` after each
    /// step with the new index.
    pub fn run(
        &mut self,
        w: &mut [f64],
        from: i64,
        to: i64,
        store: Option<&WienerStore>,
        mut visit: impl FnMut(i64, &[f64]),
    ) -> Result<()> {
        if let Some(s) = store {
            if !self.noise_slots.is_empty() {
                s.check_covers(from, to)?;
                if s.channels() != self.noise_slots.len() {
                    return Err(Error::InvalidArgument(format!(
                        "store has {} channels, noise has {}",
                        s.channels(),
                        self.noise_slots.len()
                    )));
                }
            }
        }
        for n in from..to {
            let inc = match store {
                Some(s) if !self.noise_slots.is_empty() => Some(s.increments_at(n)),
                _ => None,
            };
            self.step_in_place(w, n, inc);
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::BlowUp {
                    step: n + 1,
                    last_finite: n,
                });
            }
            visit(n + 1, w);
        }
        Ok(())
    }

    /// `J_{n, n+1}` applied to `xi` in place, linearised at `w_n`.
    pub fn jacobian_step(&mut self, w_n: &[f64], xi: &mut [f64]) {
        let mut lin = std::mem::take(&mut self.scratch);
        if self.cfg.nonlinear {
            self.ws.bracket_into(w_n, xi, &mut lin);
        } else {
            lin.iter_mut().for_each(|x| *x = 0.0);
        }
        for i in 0..xi.len() {
            xi[i] = self.decay[i] * xi[i] + self.gain[i] * lin[i];
        }
        self.scratch = lin;
    }

    /// Transpose of [`jacobian_step`](Self::jacobian_step):
    /// `U_n = E U_{n+1} + L_n^T (D U_{n+1})`.
    pub fn adjoint_step(&mut self, w_n: &[f64], u: &mut [f64]) {
        if !self.cfg.nonlinear {
            for i in 0..u.len() {
                u[i] *= self.decay[i];
            }
            return;
        }
        let scaled: Vec<f64> = u.iter().zip(&self.gain).map(|(a, b)| a * b).collect();
        let mut lt = std::mem::take(&mut self.scratch);
        self.ws.bracket_transpose_into(w_n, &scaled, &mut lt);
        for i in 0..u.len() {
            u[i] = self.decay[i] * u[i] + lt[i];
        }
        self.scratch = lt;
    }
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: SolverConfig,
    pub start_index: i64,
    pub frames: Vec<SpectralField>,
}

impl Trajectory {
    pub fn end_index(&self) -> i64 {
        self.start_index + self.frames.len() as i64 - 1
    }

    pub fn frame(&self, n: i64) -> Option<&SpectralField> {
        if n < self.start_index {
            return None;
        }
        self.frames.get((n - self.start_index) as usize)
    }

    pub fn last(&self) -> &SpectralField {
        self.frames.last().expect("trajectory has at least one frame")
    }

    pub(crate) fn check_window(&self, from: i64, to: i64) -> Result<()> {
        if from < self.start_index || to > self.end_index() || from > to {
            return Err(Error::WindowNotCovered {
                have_min: self.start_index,
                have_max: self.end_index(),
                need_min: from,
                need_max: to,
            });
        }
        Ok(())
    }
}

fn check_field(w: &SpectralField, cfg: &SolverConfig) -> Result<()> {
    cfg.trunc.check_same(&w.trunc())?;
    if !w.is_finite() {
        return Err(Error::NonFinite("initial condition".into()));
    }
    Ok(())
}

/// A single step from index `t_index`.
pub fn step(w: &SpectralField, t_index: i64, cfg: &SolverConfig, store: &WienerStore) -> Result<SpectralField> {
    let traj = simulate(w, t_index, 1, cfg, store)?;
    Ok(traj.frames[1].clone())
}

/// `n_steps` steps from index `s_index`, keeping every frame.
pub fn simulate(
    w0: &SpectralField,
    s_index: i64,
    n_steps: usize,
    cfg: &SolverConfig,
    store: &WienerStore,
) -> Result<Trajectory> {
    check_field(w0, cfg)?;
    let mut integ = Integrator::new(cfg)?;
    let mut frames = Vec::with_capacity(n_steps + 1);
    frames.push(w0.clone());
    let mut w = w0.coeffs().to_vec();
    integ.run(&mut w, s_index, s_index + n_steps as i64, Some(store), |_, x| {
        frames.push(SpectralField::from_raw(cfg.trunc, x.to_vec()))
    })?;
    Ok(Trajectory {
        config: cfg.clone(),
        start_index: s_index,
        frames,
    })
}

/// The end state only; no frames are kept.
pub fn evolve(
    w0: &SpectralField,
    s_index: i64,
    n_steps: usize,
    cfg: &SolverConfig,
    store: Option<&WienerStore>,
) -> Result<SpectralField> {
    check_field(w0, cfg)?;
    let mut integ = Integrator::new(cfg)?;
    let mut w = w0.coeffs().to_vec();
    integ.run(&mut w, s_index, s_index + n_steps as i64, store, |_, _| {})?;
    Ok(SpectralField::from_raw(cfg.trunc, w))
}

#[derive(Debug, Clone)]
pub struct SharedNoisePair {
    pub first: Trajectory,
    pub second: Trajectory,
    /// `||w1_n - w2_n||` per frame.
    pub error_series: Vec<f64>,
}

pub fn simulate_pair_shared_noise(
    w1: &SpectralField,
    w2: &SpectralField,
    s_index: i64,
    n_steps: usize,
    cfg: &SolverConfig,
    store: &WienerStore,
) -> Result<SharedNoisePair> {
    let first = simulate(w1, s_index, n_steps, cfg, store)?;
    let second = simulate(w2, s_index, n_steps, cfg, store)?;
    let error_series = first
        .frames
        .iter()
        .zip(&second.frames)
        .map(|(a, b)| a.sub(b).norm())
        .collect();
    Ok(SharedNoisePair {
        first,
        second,
        error_series,
    })
}

/// Error norms only, without storing frames.
pub fn shared_noise_error_series(
    w1: &SpectralField,
    w2: &SpectralField,
    s_index: i64,
    n_steps: usize,
    cfg: &SolverConfig,
    store: &WienerStore,
) -> Result<Vec<f64>> {
    check_field(w1, cfg)?;
    check_field(w2, cfg)?;
    let mut a = Integrator::new(cfg)?;
    let mut b = Integrator::new(cfg)?;
    let (mut x, mut y) = (w1.coeffs().to_vec(), w2.coeffs().to_vec());
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(w1.sub(w2).norm());
    store.check_covers(s_index, s_index + n_steps as i64)?;
    for n in s_index..s_index + n_steps as i64 {
        a.run(&mut x, n, n + 1, Some(store), |_, _| {})?;
        b.run(&mut y, n, n + 1, Some(store), |_, _| {})?;
        let d: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
        out.push((BASIS_NORM_SQ * d).sqrt());
    }
    Ok(out)
}

/// `J_{from, to} xi0` along the stored frames.
pub fn propagate_jacobian(
    traj: &Trajectory,
    xi0: &SpectralField,
    from_index: i64,
    to_index: i64,
) -> Result<SpectralField> {
    traj.check_window(from_index, to_index)?;
    traj.config.trunc.check_same(&xi0.trunc())?;
    let mut integ = Integrator::new(&traj.config)?;
    let mut xi = xi0.coeffs().to_vec();
    for n in from_index..to_index {
        let w_n = traj.frame(n).expect("checked window");
        integ.jacobian_step(w_n.coeffs(), &mut xi);
    }
    Ok(SpectralField::from_raw(xi0.trunc(), xi))
}

// ---------------------------------------------------------------------------
// Deterministic periodic orbit

#[derive(Debug, Clone)]
pub struct PeriodicSolution {
    /// One period of `z`, `P + 1` frames starting at index 0 (phase 0).
    pub period: Trajectory,
    /// `||z(nT) - z((n+1)T)||` at the last iteration.
    pub residual: f64,
    pub periods_used: usize,
    /// `max_t ||z_t||` over the returned period.
    pub max_norm: f64,
    /// `||f||_inf / nu`.
    pub norm_bound: f64,
}

impl PeriodicSolution {
    pub fn bound_holds(&self) -> bool {
        self.max_norm <= self.norm_bound * (1.0 + 1e-9) + 1e-300
    }
}

/// Integrates the noiseless equation from `w = 0` one period at a time until
/// successive period maps differ by less than `tol`.
pub fn solve_deterministic_periodic(cfg: &SolverConfig, tol: f64, max_periods: usize) -> Result<PeriodicSolution> {
    let mut integ = Integrator::new(cfg)?;
    let p = integ.period_steps();
    let mut w = vec![0.0; cfg.trunc.len()];
    let mut residual = f64::INFINITY;
    let mut used = 0;
    while used < max_periods {
        let before = w.clone();
        integ.run(&mut w, 0, p, None, |_, _| {})?;
        used += 1;
        let d: f64 = w.iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum();
        residual = (BASIS_NORM_SQ * d).sqrt();
        if residual < tol {
            break;
        }
    }
    if residual >= tol {
        return Err(Error::NoConvergence {
            periods: used,
            residual,
        });
    }
    let start = SpectralField::from_raw(cfg.trunc, w.clone());
    let mut frames = vec![start];
    integ.run(&mut w, 0, p, None, |_, x| {
        frames.push(SpectralField::from_raw(cfg.trunc, x.to_vec()))
    })?;
    let max_norm = frames.iter().map(SpectralField::norm).fold(0.0, f64::max);
    let norm_bound = if cfg.nu > 0.0 {
        cfg.forcing.sup_norm() / cfg.nu
    } else {
        f64::INFINITY
    };
    let mut noiseless = cfg.clone();
    noiseless.noise = ForcedModeSet::empty();
    Ok(PeriodicSolution {
        period: Trajectory {
            config: noiseless,
            start_index: 0,
            frames,
        },
        residual,
        periods_used: used,
        max_norm,
        norm_bound,
    })
}

/// Runs `[s + h, s + h + n]` with the original noise and forcing, and
/// `[s, s + n]` with the noise shifted by `h` and the forcing phase advanced
/// by `h`; returns the largest coefficient difference over all frames.
pub fn verify_translation_identity(
    cfg: &SolverConfig,
    store: &WienerStore,
    w0: &SpectralField,
    s_index: i64,
    h_steps: i64,
    n_steps: usize,
) -> Result<f64> {
    let start = s_index.checked_add(h_steps).ok_or(Error::IndexOverflow(h_steps))?;
    let original = simulate(w0, start, n_steps, cfg, store)?;
    let shifted_cfg = cfg.clone().with_forcing_shift(
        cfg.forcing_shift
            .checked_add(h_steps)
            .ok_or(Error::IndexOverflow(h_steps))?,
    );
    let shifted_store = store.shift(h_steps)?;
    let shifted = simulate(w0, s_index, n_steps, &shifted_cfg, &shifted_store)?;
    Ok(original
        .frames
        .iter()
        .zip(&shifted.frames)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max))
}

/// Fraction of enstrophy in the outer third of the truncation box; a cheap
/// resolution monitor.
pub fn spectral_tail_fraction(w: &SpectralField) -> f64 {
    let k = w.trunc().radius as u32;
    let cut = (2 * k).div_ceil(3);
    let (mut tail, mut total) = (0.0, 0.0);
    for (m, c) in w.trunc().modes().into_iter().zip(w.coeffs()) {
        total += c * c;
        if m.max_norm() > cut {
            tail += c * c;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        tail / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(k1: i32, k2: i32) -> ModeIndex {
        ModeIndex::new(k1, k2)
    }

    fn four_direction() -> ForcedModeSet {
        ForcedModeSet::unit(vec![m(1, 0), m(-1, 0), m(1, 1), m(-1, -1)]).unwrap()
    }

    fn test_config(nu: f64, k: usize) -> SolverConfig {
        let forcing = ForcingProfile::new(
            1.0,
            vec![
                ForcingTerm {
                    mode: m(1, 2),
                    amplitude: 0.3,
                    phase: 0.4,
                },
                ForcingTerm {
                    mode: m(-2, 1),
                    amplitude: 0.2,
                    phase: -1.0,
                },
            ],
        )
        .unwrap();
        SolverConfig::new(
            nu,
            0.01,
            TruncationSpec::new(k),
            four_direction().with_energy_input(1.0).unwrap(),
            forcing,
        )
        .unwrap()
    }

    fn random_field(trunc: TruncationSpec, seed: u64, scale: f64) -> SpectralField {
        let c = (0..trunc.len())
            .map(|i| scale * rng::normal(seed, 99, i as i64) / (1.0 + i as f64).sqrt())
            .collect();
        SpectralField::from_coeffs(trunc, c).unwrap()
    }

    #[test]
    fn store_is_deterministic_and_extends() {
        let a = WienerStore::derive(5, 0.01, 3, -10, 20).unwrap();
        let b = WienerStore::derive(5, 0.01, 3, -10, 20).unwrap();
        assert_eq!(a, b);
        let wide = a.with_range(-50, 100).unwrap();
        for n in -10..=20 {
            for i in 0..3 {
                assert_eq!(a.increment(i, n).to_bits(), wide.increment(i, n).to_bits());
            }
        }
        assert!(WienerStore::derive(5, 0.01, 3, 2, 1).is_err());
        assert!(WienerStore::derive(5, 0.0, 3, 0, 1).is_err());
    }

    #[test]
    fn shift_is_exact_group_action() {
        let a = WienerStore::derive(9, 0.02, 2, 0, 200).unwrap();
        assert_eq!(a.shift(0).unwrap(), a);
        let s = a.shift(37).unwrap();
        for n in -37..=163 {
            assert_eq!(s.increment(1, n).to_bits(), a.increment(1, n + 37).to_bits());
        }
        assert_eq!(s.shift(-37).unwrap(), a);
        // widening after a shift still reads the shifted path
        let sw = s.with_range(-100, 300).unwrap();
        assert_eq!(
            sw.increment(0, 250).to_bits(),
            a.with_range(0, 300).unwrap().increment(0, 287).to_bits()
        );
        assert!(matches!(a.shift(i64::MIN), Err(Error::IndexOverflow(_))));
    }

    #[test]
    fn replica_streams_uncorrelated() {
        let n = 20_000;
        let a = WienerStore::for_replica(1, 0, 1.0, 1, 0, n - 1).unwrap();
        let b = WienerStore::for_replica(1, 1, 1.0, 1, 0, n - 1).unwrap();
        let r: f64 = (0..n).map(|i| a.increment(0, i) * b.increment(0, i)).sum::<f64>() / n as f64;
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "r = {r}");
        let var: f64 = (0..n).map(|i| a.increment(0, i).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn forcing_sup_norm_matches_sampling() {
        let f = test_config(1.0, 3).forcing;
        let tr = TruncationSpec::new(3);
        let sampled = (0..20_000)
            .map(|i| f.eval(tr, i as f64 / 20_000.0).unwrap().norm())
            .fold(0.0, f64::max);
        assert!((f.sup_norm() - sampled).abs() < 1e-6 * sampled);
        // two terms on one mode combine before the maximum is taken
        let g = ForcingProfile::new(
            2.0,
            vec![
                ForcingTerm {
                    mode: m(1, 0),
                    amplitude: 1.0,
                    phase: 0.0,
                },
                ForcingTerm {
                    mode: m(1, 0),
                    amplitude: 1.0,
                    phase: std::f64::consts::PI,
                },
            ],
        )
        .unwrap();
        assert!(g.sup_norm() < 1e-12);
        let h = ForcingProfile::single(1.0, m(0, 1), 2.0, 0.3).unwrap();
        assert!((h.sup_norm() - 2.0 * BASIS_NORM_SQ.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn forcing_is_periodic_on_the_grid() {
        let f = test_config(1.0, 3).forcing;
        let tr = TruncationSpec::new(3);
        let a = f.eval_at_phase_index(tr, 17, 100).unwrap();
        let b = f.eval_at_phase_index(tr, 117, 100).unwrap();
        let c = f.eval_at_phase_index(tr, -83, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.max_abs_diff(&f.eval(tr, 0.17).unwrap()) < 1e-14);
    }

    #[test]
    fn period_must_be_grid_multiple() {
        let mut cfg = test_config(1.0, 3);
        cfg.dt = 0.03;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.dt = 0.001;
        assert_eq!(cfg.steps_per_period().unwrap(), 1000);
    }

    #[test]
    fn heat_flow_single_mode() {
        let tr = TruncationSpec::new(3);
        let cfg = SolverConfig::new(0.7, 0.01, tr, ForcedModeSet::empty(), ForcingProfile::zero(1.0))
            .unwrap()
            .with_nonlinear(false);
        let store = WienerStore::derive(1, 0.01, 0, 0, 10).unwrap();
        let w = SpectralField::basis(tr, m(1, 0)).unwrap();
        let w1 = step(&w, 0, &cfg, &store).unwrap();
        assert!((w1.coeff(m(1, 0)) - (-0.7f64 * 0.01).exp()).abs() < 1e-15);
        // with the nonlinearity on a single mode is still a steady Euler state
        let cfg_nl = cfg.clone().with_nonlinear(true);
        let w2 = step(&w, 0, &cfg_nl, &store).unwrap();
        assert!(w2.max_abs_diff(&w1) < 1e-14);
    }

    #[test]
    fn scalar_ou_update() {
        let tr = TruncationSpec::new(2);
        let noise = ForcedModeSet::new(vec![m(1, 0)], vec![0.8]).unwrap();
        let cfg = SolverConfig::new(0.5, 0.01, tr, noise, ForcingProfile::zero(1.0))
            .unwrap()
            .with_nonlinear(false);
        let store = WienerStore::derive(3, 0.01, 1, 0, 100).unwrap();
        let traj = simulate(&SpectralField::zeros(tr), 0, 100, &cfg, &store).unwrap();
        let e = (-0.5f64 * 0.01).exp();
        let mut x = 0.0;
        for n in 0..100 {
            x = e * (x + 0.8 * store.increment(0, n));
            assert!((traj.frames[n as usize + 1].coeff(m(1, 0)) - x).abs() < 1e-14);
        }
        assert!(traj.frames.iter().all(|f| f.support().iter().all(|k| *k == m(1, 0))));
    }

    #[test]
    fn flow_property_bit_exact() {
        let cfg = test_config(0.3, 4);
        let store = WienerStore::derive(11, cfg.dt, 4, -50, 200).unwrap();
        let w0 = random_field(cfg.trunc, 4, 1.0);
        let whole = simulate(&w0, -20, 150, &cfg, &store).unwrap();
        let a = simulate(&w0, -20, 60, &cfg, &store).unwrap();
        let b = simulate(a.last(), 40, 90, &cfg, &store).unwrap();
        assert_eq!(whole.last(), b.last());
        assert_eq!(whole.frames[60], a.frames[60]);
        let zero = simulate(&w0, 5, 0, &cfg, &store).unwrap();
        assert_eq!(zero.frames, vec![w0.clone()]);
        assert_eq!(evolve(&w0, -20, 150, &cfg, Some(&store)).unwrap(), *whole.last());
    }

    #[test]
    fn uncovered_window_is_an_error() {
        let cfg = test_config(0.3, 3);
        let store = WienerStore::derive(11, cfg.dt, 4, 0, 10).unwrap();
        let w0 = SpectralField::zeros(cfg.trunc);
        assert!(matches!(
            simulate(&w0, 5, 10, &cfg, &store),
            Err(Error::WindowNotCovered { .. })
        ));
    }

    #[test]
    fn blow_up_reports_last_finite_frame() {
        let tr = TruncationSpec::new(2);
        let noise = ForcedModeSet::new(vec![m(1, 0)], vec![1e300]).unwrap();
        let cfg = SolverConfig::new(0.0, 0.01, tr, noise, ForcingProfile::zero(1.0)).unwrap();
        let store = WienerStore::derive(3, 0.01, 1, 0, 100).unwrap();
        let w0 = SpectralField::basis(tr, m(1, 1)).unwrap().scaled(1e200);
        match simulate(&w0, 0, 100, &cfg, &store) {
            Err(Error::BlowUp { step, last_finite }) => assert_eq!(step, last_finite + 1),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn shared_noise_identical_inputs() {
        let cfg = test_config(0.3, 3);
        let store = WienerStore::derive(2, cfg.dt, 4, 0, 100).unwrap();
        let w = random_field(cfg.trunc, 1, 1.0);
        let pair = simulate_pair_shared_noise(&w, &w, 0, 100, &cfg, &store).unwrap();
        assert!(pair.error_series.iter().all(|e| *e == 0.0));
        let w2 = random_field(cfg.trunc, 2, 1.0);
        let pair = simulate_pair_shared_noise(&w, &w2, 0, 100, &cfg, &store).unwrap();
        let fast = shared_noise_error_series(&w, &w2, 0, 100, &cfg, &store).unwrap();
        for (a, b) in pair.error_series.iter().zip(&fast) {
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn noiseless_strong_viscosity_contracts() {
        // linear decay rate is nu |k|^2 >= nu; small amplitude keeps B negligible
        let tr = TruncationSpec::new(4);
        let cfg = SolverConfig::new(1.0, 0.01, tr, ForcedModeSet::empty(), ForcingProfile::zero(1.0)).unwrap();
        let store = WienerStore::derive(2, cfg.dt, 0, 0, 500).unwrap();
        let a = random_field(tr, 1, 1e-3);
        let b = random_field(tr, 2, 1e-3);
        let errs = shared_noise_error_series(&a, &b, 0, 500, &cfg, &store).unwrap();
        let t: f64 = 5.0;
        assert!(errs[500] <= errs[0] * (-t).exp() * 1.01);
    }

    #[test]
    fn jacobian_linear_and_heat_flow() {
        let cfg = test_config(0.4, 3);
        let store = WienerStore::derive(2, cfg.dt, 4, 0, 50).unwrap();
        let traj = simulate(&random_field(cfg.trunc, 3, 1.0), 0, 50, &cfg, &store).unwrap();
        let zero = propagate_jacobian(&traj, &SpectralField::zeros(cfg.trunc), 0, 50).unwrap();
        assert!(zero.norm() == 0.0);
        let a = random_field(cfg.trunc, 5, 1.0);
        let b = random_field(cfg.trunc, 6, 1.0);
        let ja = propagate_jacobian(&traj, &a, 10, 40).unwrap();
        let jb = propagate_jacobian(&traj, &b, 10, 40).unwrap();
        let jab = propagate_jacobian(&traj, &a.axpy(2.0, &b), 10, 40).unwrap();
        assert!(jab.max_abs_diff(&ja.axpy(2.0, &jb)) < 1e-12);
        assert!(propagate_jacobian(&traj, &a, 10, 60).is_err());

        let lin = cfg.clone().with_nonlinear(false);
        let traj = simulate(&random_field(cfg.trunc, 3, 1.0), 0, 50, &lin, &store).unwrap();
        let j = propagate_jacobian(&traj, &a, 0, 50).unwrap();
        for (k, (x, y)) in cfg.trunc.modes().into_iter().zip(j.coeffs().iter().zip(a.coeffs())) {
            let expect = y * (-0.4 * k.norm_sq() as f64 * 0.5).exp();
            assert!((x - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cfg = test_config(0.2, 4);
        let store = WienerStore::derive(8, cfg.dt, 4, 0, 100).unwrap();
        let w0 = random_field(cfg.trunc, 3, 1.0);
        let xi = random_field(cfg.trunc, 4, 1.0);
        let traj = simulate(&w0, 0, 100, &cfg, &store).unwrap();
        let j = propagate_jacobian(&traj, &xi, 0, 100).unwrap();
        let mut errs = Vec::new();
        for eps in [1e-4, 1e-5] {
            let p = evolve(&w0.axpy(eps, &xi), 0, 100, &cfg, Some(&store)).unwrap();
            let fd = p.sub(traj.last()).scaled(1.0 / eps);
            errs.push(fd.sub(&j).norm() / j.norm());
        }
        assert!(errs[0] < 1e-3, "{errs:?}");
        // first-order convergence in eps
        assert!(errs[1] < errs[0] * 0.2, "{errs:?}");
    }

    #[test]
    fn adjoint_step_is_transpose() {
        let cfg = test_config(0.3, 4);
        let mut integ = Integrator::new(&cfg).unwrap();
        let w = random_field(cfg.trunc, 1, 1.0);
        let xi = random_field(cfg.trunc, 2, 1.0);
        let u = random_field(cfg.trunc, 3, 1.0);
        let mut jx = xi.coeffs().to_vec();
        integ.jacobian_step(w.coeffs(), &mut jx);
        let mut au = u.coeffs().to_vec();
        integ.adjoint_step(w.coeffs(), &mut au);
        let lhs: f64 = jx.iter().zip(u.coeffs()).map(|(a, b)| a * b).sum();
        let rhs: f64 = xi.coeffs().iter().zip(&au).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn periodic_solution_unforced_is_zero() {
        let tr = TruncationSpec::new(3);
        let cfg = SolverConfig::new(1.0, 0.01, tr, four_direction(), ForcingProfile::zero(1.0)).unwrap();
        let sol = solve_deterministic_periodic(&cfg, 1e-10, 5).unwrap();
        assert_eq!(sol.periods_used, 1);
        assert!(sol.period.frames.iter().all(|f| f.norm() == 0.0));
        assert!(sol.bound_holds());
    }

    #[test]
    fn periodic_solution_linear_response() {
        // one forced mode is a steady Euler state, so z solves
        // z' = -lam z + A cos(omega t) with periodic answer
        // A (lam cos + omega sin) / (lam^2 + omega^2)
        let tr = TruncationSpec::new(3);
        let k = m(1, 2);
        let (amp, period, nu) = (0.5, 2.0, 0.3);
        let forcing = ForcingProfile::single(period, k, amp, 0.0).unwrap();
        let cfg = SolverConfig::new(nu, 1e-3, tr, ForcedModeSet::empty(), forcing).unwrap();
        let sol = solve_deterministic_periodic(&cfg, 1e-12, 200).unwrap();
        let lam = nu * 5.0;
        let omega = TAU / period;
        let mut worst: f64 = 0.0;
        for (n, f) in sol.period.frames.iter().enumerate() {
            let t = n as f64 * cfg.dt;
            let z = amp * (lam * (omega * t).cos() + omega * (omega * t).sin()) / (lam * lam + omega * omega);
            worst = worst.max((f.coeff(k) - z).abs());
            let off = f.sub(&SpectralField::make(tr, &[(k, f.coeff(k))]).unwrap()).norm();
            assert!(off < 1e-14, "{off}");
        }
        // first-order scheme: error O(dt) relative to the amplitude
        assert!(worst < 2e-3 * amp / omega, "{worst}");
    }

    #[test]
    fn periodic_solution_respects_bound_and_converges() {
        let cfg = test_config(0.5, 3);
        let sol = solve_deterministic_periodic(&cfg, 1e-11, 200).unwrap();
        assert!(sol.residual < 1e-11);
        assert!(sol.bound_holds(), "{} > {}", sol.max_norm, sol.norm_bound);
        let again = evolve(sol.period.last(), 0, 100, &sol.period.config, None).unwrap();
        assert!(again.sub(sol.period.last()).norm() < 1e-10);
        assert!(solve_deterministic_periodic(&cfg, 1e-11, 1).is_err());
    }

    #[test]
    fn translation_identity_bit_exact() {
        let cfg = test_config(0.3, 4);
        let p = cfg.steps_per_period().unwrap();
        let store = WienerStore::derive(21, cfg.dt, 4, -100, 3 * p + 400).unwrap();
        let w0 = random_field(cfg.trunc, 7, 1.0);
        for h in [0, 1, p, 3 * p + 7] {
            let r = verify_translation_identity(&cfg, &store, &w0, 0, h, 150).unwrap();
            assert_eq!(r, 0.0, "h = {h}");
        }
    }

    #[test]
    fn tail_fraction_bounds() {
        let tr = TruncationSpec::new(6);
        assert_eq!(spectral_tail_fraction(&SpectralField::basis(tr, m(1, 0)).unwrap()), 0.0);
        assert_eq!(spectral_tail_fraction(&SpectralField::basis(tr, m(6, 0)).unwrap()), 1.0);
        assert_eq!(spectral_tail_fraction(&SpectralField::zeros(tr)), 0.0);
    }
}
