//! Grashof numbers and the contraction rate `delta0`, regime classification,
//! shared-noise synchronisation, and the pullback construction of the random
//! periodic solution.

use serde::{Deserialize, Serialize};

use crate::bracket::ForcedModeSet;
use crate::dynamics::{
    evolve, simulate, ForcingProfile, ForcingTerm, Integrator, PeriodicSolution, SolverConfig, Trajectory, WienerStore,
};
use crate::ergodic::linear_fit;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::rng;
use crate::spectral::{ModeIndex, SpectralField, TruncationSpec, BASIS_NORM_SQ};

/// Ladyzhenskaya constant shipped as the default: the estimator's lower
/// bound at radius 8 with 10^4 samples and seed 0.
pub const DEFAULT_C0: f64 = 0.249_124_130_228_341_12;

/// Share of a fit window discarded as transient.
pub const TRANSIENT_FRACTION: f64 = 0.2;

/// Errors below this multiple of the state norm are treated as round-off.
pub const ROUNDOFF_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum C0Provenance {
    Configured,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `G2 < 1/c0`.
    Laminar,
    /// `G1 < 1/c0 <= G2`.
    MixingOnly,
    /// `G1 >= 1/c0`.
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub c0: f64,
    pub c0_provenance: C0Provenance,
    pub nu: f64,
    pub f_sup: f64,
    pub b0: f64,
    pub g1: f64,
    pub g2: f64,
    pub alpha: f64,
    pub delta0: f64,
    pub classification: Regime,
    /// For `alpha = 1`: whether `delta0 > 0` and `G2 < 1/c0` agree.
    pub equivalence_holds: Option<bool>,
}

/// Regime quantities from the scalar inputs.
pub fn regime_from_values(
    nu: f64,
    f_sup: f64,
    b0: f64,
    c0: f64,
    alpha: f64,
    provenance: C0Provenance,
) -> Result<RegimeReport> {
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(Error::InvalidArgument(format!("c0 must be positive, got {c0}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !(nu >= 0.0 && f_sup >= 0.0 && b0 >= 0.0) {
        return Err(Error::InvalidArgument("nu, |f|, B0 must be nonnegative".into()));
    }
    let g1 = f_sup / (nu * nu);
    let g2 = (g1 * g1 + b0 / (nu * nu * nu)).sqrt();
    let delta0 = nu - c0 * c0 / ((2.0 - alpha) * nu * nu) * (f_sup * f_sup / (alpha * nu) + b0);
    let inv = 1.0 / c0;
    let classification = if !(g1 < inv) {
        Regime::Unresolved
    } else if g2 < inv {
        Regime::Laminar
    } else {
        Regime::MixingOnly
    };
    let equivalence_holds = (alpha == 1.0).then(|| (delta0 > 0.0) == (g2 < inv));
    Ok(RegimeReport {
        c0,
        c0_provenance: provenance,
        nu,
        f_sup,
        b0,
        g1,
        g2,
        alpha,
        delta0,
        classification,
        equivalence_holds,
    })
}

pub fn regime_report(cfg: &SolverConfig, c0: f64, alpha: f64) -> Result<RegimeReport> {
    regime_from_values(
        cfg.nu,
        cfg.forcing.sup_norm(),
        cfg.energy_input(),
        c0,
        alpha,
        C0Provenance::Configured,
    )
}

// ---------------------------------------------------------------------------
// Slope fits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Fitted slope of `log ||e_t||^2` per unit time.
    pub slope: Option<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub points: usize,
    /// The error fell to round-off (or exactly zero) before the window ended;
    /// the fit stops there.
    pub reached_roundoff: bool,
    /// The requested window start lay past the round-off time, so the fit
    /// used the prefix with its transient share dropped.
    pub used_prefix: bool,
}

/// Least-squares slope of `log e^2` against time on `[t_start, end]`, where
/// the series is cut at the first entry below `floor[n]`.
pub fn fit_log_square_slope(errors: &[f64], floor: &[f64], dt: f64, t_start: f64) -> SlopeFit {
    let cut = errors
        .iter()
        .zip(floor)
        .position(|(e, f)| *e <= *f || *e == 0.0)
        .unwrap_or(errors.len());
    let reached_roundoff = cut < errors.len();
    let t_end = (cut.max(1) - 1) as f64 * dt;
    let mut start = t_start;
    let mut used_prefix = false;
    let first = (t_start / dt).round() as usize;
    if first + 3 > cut {
        start = TRANSIENT_FRACTION * t_end;
        used_prefix = true;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..cut)
        .map(|n| (n as f64 * dt, errors[n]))
        .filter(|(t, _)| *t >= start - 1e-12)
        .map(|(t, e)| (t, (e * e).ln()))
        .unzip();
    SlopeFit {
        slope: linear_fit(&xs, &ys).map(|(_, b)| b),
        t_start: start,
        t_end,
        points: xs.len(),
        reached_roundoff,
        used_prefix,
    }
}

/// Error series of two solutions driven by one store, with a per-step
/// round-off floor `ROUNDOFF_REL * max(||x||, ||y||)`.
fn paired_errors(
    cfg: &SolverConfig,
    w1: &SpectralField,
    w2: &SpectralField,
    from: i64,
    n_steps: usize,
    store: Option<&WienerStore>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Integrator::new(cfg)?;
    let mut b = Integrator::new(cfg)?;
    let (mut x, mut y) = (w1.coeffs().to_vec(), w2.coeffs().to_vec());
    let norm = |v: &[f64]| (BASIS_NORM_SQ * v.iter().map(|c| c * c).sum::<f64>()).sqrt();
    let diff =
        |x: &[f64], y: &[f64]| (BASIS_NORM_SQ * x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()).sqrt();
    let mut errs = vec![diff(&x, &y)];
    let mut floor = vec![ROUNDOFF_REL * norm(&x).max(norm(&y))];
    if let Some(s) = store {
        s.check_covers(from, from + n_steps as i64)?;
    }
    for n in from..from + n_steps as i64 {
        a.run(&mut x, n, n + 1, store, |_, _| {})?;
        b.run(&mut y, n, n + 1, store, |_, _| {})?;
        errs.push(diff(&x, &y));
        floor.push(ROUNDOFF_REL * norm(&x).max(norm(&y)));
    }
    Ok((errs, floor))
}

// ---------------------------------------------------------------------------
// Synchronisation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSeedResult {
    pub seed: u64,
    pub fit: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub regime: RegimeReport,
    pub per_seed: Vec<SyncSeedResult>,
    pub median_slope: Option<f64>,
    /// `-delta0 / 2`.
    pub threshold: f64,
    /// `w1 == w2`: no slope is defined.
    pub degenerate: bool,
}

impl SyncReport {
    /// The contract is only asserted in the laminar regime.
    pub fn contract_holds(&self) -> Option<bool> {
        if self.regime.classification != Regime::Laminar || self.degenerate {
            return None;
        }
        self.median_slope.map(|s| s <= self.threshold)
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// For every seed, two solutions from `w1`, `w2` share one noise path over
/// `[0, horizon]`; the slope of `log ||w1 - w2||^2` is fitted on
/// `[t_start, horizon]`.
pub fn synchronization_experiment(
    cfg: &SolverConfig,
    c0: f64,
    seeds: &[u64],
    w1: &SpectralField,
    w2: &SpectralField,
    horizon: f64,
    t_start: f64,
) -> Result<SyncReport> {
    let regime = regime_report(cfg, c0, 1.0)?;
    let threshold = -regime.delta0 / 2.0;
    if w1 == w2 {
        return Ok(SyncReport {
            regime,
            per_seed: Vec::new(),
            median_slope: None,
            threshold,
            degenerate: true,
        });
    }
    let n_steps = (horizon / cfg.dt).round() as usize;
    let per_seed = exec::map_indexed(seeds.len(), Execution::Parallel, |i| -> Result<SyncSeedResult> {
        let store = crate::ergodic::noise_store(cfg, seeds[i], 0, n_steps as i64)?;
        let (errs, floor) = paired_errors(cfg, w1, w2, 0, n_steps, store.as_ref())?;
        Ok(SyncSeedResult {
            seed: seeds[i],
            fit: fit_log_square_slope(&errs, &floor, cfg.dt, t_start),
        })
    });
    let per_seed: Vec<SyncSeedResult> = per_seed.into_iter().collect::<Result<_>>()?;
    let median_slope = median(per_seed.iter().filter_map(|r| r.fit.slope).collect());
    Ok(SyncReport {
        regime,
        per_seed,
        median_slope,
        threshold,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Pullback

#[derive(Debug, Clone)]
pub struct PullbackResult {
    /// `w*` over `[t_probe, t_probe + T]`.
    pub w_star: Trajectory,
    /// Entry `n - 1` is `||w_n - w_{n+1}||` at `t_probe`, where `w_n` starts
    /// from 0 at `t_probe - nT`.
    pub cauchy_table: Vec<f64>,
    /// `exp` of the fitted slope of `log cauchy` against `n` over the tail
    /// above round-off.
    pub tail_ratio: Option<f64>,
    pub tail_points: usize,
}

impl PullbackResult {
    pub fn geometric(&self) -> bool {
        self.tail_ratio.is_some_and(|r| r < 1.0)
    }
}

/// `w(t_probe; t_probe - nT, 0)` on one noise path.
pub fn pullback_iterate(
    cfg: &SolverConfig,
    store: Option<&WienerStore>,
    n: usize,
    t_probe: i64,
) -> Result<SpectralField> {
    let p = cfg.steps_per_period()?;
    let steps = p * n as i64;
    evolve(
        &SpectralField::zeros(cfg.trunc),
        t_probe - steps,
        steps as usize,
        cfg,
        store,
    )
}

pub fn pullback_periodic_solution(
    cfg: &SolverConfig,
    store: Option<&WienerStore>,
    n_max: usize,
    t_probe: i64,
) -> Result<PullbackResult> {
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be positive".into()));
    }
    let p = cfg.steps_per_period()?;
    if let Some(s) = store {
        s.check_covers(t_probe - p * (n_max as i64 + 1), t_probe + p)?;
    }
    let iterates = exec::map_indexed(n_max + 1, Execution::Parallel, |i| {
        pullback_iterate(cfg, store, i + 1, t_probe)
    });
    let iterates: Vec<SpectralField> = iterates.into_iter().collect::<Result<_>>()?;
    let cauchy_table: Vec<f64> = iterates.windows(2).map(|w| w[0].sub(&w[1]).norm()).collect();
    let last = iterates.last().expect("n_max >= 1");
    let floor = ROUNDOFF_REL * last.norm().max(f64::MIN_POSITIVE);
    let above: Vec<(f64, f64)> = cauchy_table
        .iter()
        .enumerate()
        .take_while(|(_, c)| **c > floor)
        .map(|(i, c)| ((i + 1) as f64, c.ln()))
        .collect();
    let skip = (TRANSIENT_FRACTION * above.len() as f64).floor() as usize;
    let (xs, ys): (Vec<f64>, Vec<f64>) = above[skip..].iter().copied().unzip();
    let tail_ratio = linear_fit(&xs, &ys).map(|(_, b)| b.exp());
    let period = match store {
        Some(s) => simulate(last, t_probe, p as usize, cfg, s)?,
        None => {
            let quiet = cfg.clone().with_noise(ForcedModeSet::empty());
            let empty = WienerStore::derive(0, cfg.dt, 0, t_probe, t_probe + p)?;
            simulate(last, t_probe, p as usize, &quiet, &empty)?
        }
    };
    Ok(PullbackResult {
        w_star: period,
        cauchy_table,
        tail_ratio,
        tail_points: xs.len(),
    })
}

/// Largest `||w*(t) - z(t)||` over the period, matching forcing phases.
pub fn compare_with_periodic(w_star: &Trajectory, z: &PeriodicSolution) -> Result<f64> {
    let p = z.period.frames.len() as i64 - 1;
    let shift = w_star.config.forcing_shift;
    let mut worst: f64 = 0.0;
    for (j, f) in w_star.frames.iter().enumerate() {
        let phase = (w_star.start_index + j as i64 + shift - z.period.config.forcing_shift).rem_euclid(p);
        worst = worst.max(f.sub(&z.period.frames[phase as usize]).norm());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPeriodicityReport {
    /// `||w*_{t+T}(omega) - w*_t(theta_T omega)||` at equal depth.
    pub periodicity_residual: f64,
    pub forward_attraction: SlopeFit,
    pub perturbation: f64,
}

/// Unit-norm direction used to perturb `w*`, fixed by `seed`.
pub fn perturbation_direction(trunc: TruncationSpec, seed: u64) -> SpectralField {
    let c: Vec<f64> = (0..trunc.len()).map(|i| rng::normal(seed, 7, i as i64)).collect();
    let f = SpectralField::from_raw(trunc, c);
    let n = f.norm();
    f.scaled(1.0 / n)
}

/// Builds `w*` at `t_probe + T` on `store` and at `t_probe` on the store
/// shifted by one period, both at depth `n_max`; then follows `w* + r u` and
/// `w*` forward for `attraction_periods` periods on the original store.
pub fn random_periodicity_check(
    cfg: &SolverConfig,
    store: &WienerStore,
    n_max: usize,
    t_probe: i64,
    perturbation: f64,
    attraction_periods: usize,
) -> Result<RandomPeriodicityReport> {
    let p = cfg.steps_per_period()?;
    let later = pullback_iterate(cfg, Some(store), n_max, t_probe + p)?;
    let shifted = store.shift(p)?;
    let earlier = pullback_iterate(cfg, Some(&shifted), n_max, t_probe)?;
    let periodicity_residual = later.sub(&earlier).norm();

    let w_star = pullback_iterate(cfg, Some(store), n_max, t_probe)?;
    let u = perturbation_direction(cfg.trunc, store.master_seed());
    let n_steps = p as usize * attraction_periods;
    let (errs, floor) = paired_errors(
        cfg,
        &w_star.axpy(perturbation, &u),
        &w_star,
        t_probe,
        n_steps,
        Some(store),
    )?;
    let span = n_steps as f64 * cfg.dt;
    Ok(RandomPeriodicityReport {
        periodicity_residual,
        forward_attraction: fit_log_square_slope(&errs, &floor, cfg.dt, TRANSIENT_FRACTION * span),
        perturbation,
    })
}

// ---------------------------------------------------------------------------
// Reference configurations

pub mod reference {
    use super::*;

    /// Separation radius of the mixing pair: `w1 = R u`, `w2 = -R u`.
    pub const MIXING_RADIUS: f64 = 5.0;
    /// Seed of the unit direction `u` of the mixing pair.
    pub const MIXING_DIRECTION_SEED: u64 = 77;
    /// Clip level of the clipped-enstrophy observable.
    pub const CLIP_LEVEL: f64 = 2.0;

    pub fn mixing_pair(cfg: &SolverConfig) -> (SpectralField, SpectralField) {
        let u = crate::ergodic::sphere_sample(cfg, 1.0, MIXING_DIRECTION_SEED);
        (u.scaled(MIXING_RADIUS), u.scaled(-MIXING_RADIUS))
    }

    /// 128 independent runs of 512 periods after 64 burn-in periods.
    pub fn clt_centering() -> crate::ergodic::CenteringPlan {
        crate::ergodic::CenteringPlan {
            replicas: 128,
            periods: 512,
            burn_in: 64,
        }
    }

    pub fn four_direction_modes() -> Vec<ModeIndex> {
        vec![
            ModeIndex::new(1, 0),
            ModeIndex::new(-1, 0),
            ModeIndex::new(1, 1),
            ModeIndex::new(-1, -1),
        ]
    }

    /// Four forced directions, equal amplitudes, total energy input `b0`.
    pub fn four_direction_noise(b0: f64) -> ForcedModeSet {
        ForcedModeSet::unit(four_direction_modes())
            .and_then(|z| z.with_energy_input(b0))
            .expect("valid mode set")
    }

    /// `nu = 2`, no forcing, `B0 = 1`, `T = 1`, `dt = 0.01`, radius 4.
    /// With `c0 = 1`: `delta0 = 1.75`, laminar.
    pub fn laminar() -> SolverConfig {
        SolverConfig::new(
            2.0,
            0.01,
            TruncationSpec::new(4),
            four_direction_noise(1.0),
            ForcingProfile::zero(1.0),
        )
        .expect("valid reference")
    }

    /// `nu = 0.25`, `B0 = 0.5`, a two-mode time-periodic force with
    /// `||f||_inf = 0.1`, `T = 1`, `dt = 0.01`, radius 6. With the default
    /// `c0`: `G1 = 1.6 < 1/c0 ~ 4.0 <= G2 ~ 5.9`, i.e. mixing but not
    /// laminar.
    pub fn mixing() -> SolverConfig {
        let raw = ForcingProfile::new(
            1.0,
            vec![
                ForcingTerm {
                    mode: ModeIndex::new(1, 2),
                    amplitude: 1.0,
                    phase: 0.0,
                },
                ForcingTerm {
                    mode: ModeIndex::new(-2, 1),
                    amplitude: 1.0,
                    phase: std::f64::consts::FRAC_PI_2,
                },
            ],
        )
        .expect("valid forcing");
        let scale = 0.1 / raw.sup_norm();
        let forcing = ForcingProfile::new(
            1.0,
            raw.terms
                .iter()
                .map(|t| ForcingTerm {
                    amplitude: t.amplitude * scale,
                    ..*t
                })
                .collect(),
        )
        .expect("valid forcing");
        SolverConfig::new(0.25, 0.01, TruncationSpec::new(6), four_direction_noise(0.5), forcing)
            .expect("valid reference")
    }
}
