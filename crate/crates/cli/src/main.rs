//! `tsns`: command-line driver.
//!
//! Exit codes: 0 success, 1 a run finished but its contract check failed (or
//! the run itself failed), 2 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tsns_core::bracket::{analyze, Classification, ForcedModeSet};
use tsns_core::dynamics::{simulate, solve_deterministic_periodic, spectral_tail_fraction, SolverConfig, WienerStore};
use tsns_core::ergodic::{
    clt_experiment, ensemble_seed, mixing_decay_experiment, sphere_sample, wlln_estimate, AveragingMode, CenteringPlan,
    MetricConfig, Observable,
};
use tsns_core::exec;
use tsns_core::io::{save_trajectory, write_csv, ConfigFile, RunManifest};
use tsns_core::malliavin::{box_modes, nondegeneracy_probe, ProbeSettings};
use tsns_core::regime::{
    compare_with_periodic, pullback_periodic_solution, random_periodicity_check, reference, regime_from_values,
    regime_report, synchronization_experiment, C0Provenance, Regime, DEFAULT_C0,
};
use tsns_core::spectral::{estimate_ladyzhenskaya_c0, ModeIndex, SpectralField, TruncationSpec};
use tsns_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "tsns",
    version,
    about = "2D stochastic Navier-Stokes on the torus: simulation and statistics"
)]
struct Cli {
    /// TOML run configuration; defaults to the built-in preset of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the `seed` key of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "tsns-out")]
    out: PathBuf,
    /// Built-in configuration used when `--config` is absent.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    Laminar,
    Mixing,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one trajectory and store it.
    Simulate(SimulateArgs),
    /// Bracket span growth and degeneracy classification of a forced mode set.
    Brackets(BracketArgs),
    /// Grashof numbers, delta0 and the regime.
    Regime(RegimeArgs),
    /// Shared-noise synchronisation slopes.
    Sync(SyncArgs),
    /// Pullback random periodic solution and its checks.
    Pullback(PullbackArgs),
    /// Wasserstein decay between ensembles from two initial points.
    Mixing(MixingArgs),
    /// Running averages of the clipped enstrophy on two seeds.
    Wlln(WllnArgs),
    /// Central limit statistics of the clipped enstrophy.
    Clt(CltArgs),
    /// Projected Malliavin Gram matrices over independent samples.
    Malliavin(MalliavinArgs),
    /// Monte-Carlo lower bound of the Ladyzhenskaya constant.
    C0Estimate(C0Args),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    periods: usize,
    /// Norm of the random initial field (0 starts from rest).
    #[arg(long, default_value_t = 0.0)]
    init_radius: f64,
}

#[derive(Args, Debug)]
struct BracketArgs {
    /// Forced modes as `k1,k2;k1,k2;...`.
    #[arg(long)]
    modes: String,
    #[arg(long)]
    trunc: usize,
    #[arg(long, default_value_t = 12)]
    depth: usize,
}

#[derive(Args, Debug)]
struct RegimeArgs {
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    f_sup: Option<f64>,
    #[arg(long)]
    b0: Option<f64>,
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct SyncArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 50.0)]
    horizon: f64,
    #[arg(long, default_value_t = 5.0)]
    t_start: f64,
    #[arg(long)]
    c0: Option<f64>,
}

#[derive(Args, Debug)]
struct PullbackArgs {
    #[arg(long, default_value_t = 40)]
    n_max: usize,
    #[arg(long, default_value_t = 0)]
    t_probe: i64,
    #[arg(long)]
    c0: Option<f64>,
    /// Tolerance of the noise-free periodic solve.
    #[arg(long, default_value_t = 1e-10)]
    solver_tol: f64,
}

#[derive(Args, Debug)]
struct MixingArgs {
    #[arg(long, default_value_t = 128)]
    replicas: usize,
    #[arg(long, default_value_t = 40)]
    periods: usize,
    #[arg(long, default_value_t = reference::MIXING_RADIUS)]
    radius: f64,
    /// Exponent `r` of the weighted metric.
    #[arg(long, default_value_t = 1.0)]
    r: f64,
}

#[derive(Args, Debug)]
struct WllnArgs {
    #[arg(long, default_value_t = 512)]
    periods: usize,
    #[arg(long, default_value_t = reference::CLIP_LEVEL)]
    level: f64,
    /// Seed of the second run; the first uses the master seed.
    #[arg(long)]
    second_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CltArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    replicas: usize,
    #[arg(long, default_value_t = 64)]
    burn_in: usize,
    #[arg(long, default_value_t = reference::clt_centering().replicas)]
    centering_replicas: usize,
    #[arg(long, default_value_t = reference::clt_centering().periods)]
    centering_periods: usize,
    #[arg(long, default_value_t = reference::CLIP_LEVEL)]
    level: f64,
}

#[derive(Args, Debug)]
struct MalliavinArgs {
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    window_periods: usize,
    #[arg(long, default_value_t = 5)]
    burn_in: usize,
    /// Projection onto modes with `|k|_inf` up to this radius.
    #[arg(long, default_value_t = 2)]
    proj_radius: u32,
    /// Complement directions as `k1,k2;...`.
    #[arg(long)]
    complement: Option<String>,
    /// Norm of the initial field (drawn once from the master seed).
    #[arg(long, default_value_t = 0.0)]
    init_radius: f64,
}

#[derive(Args, Debug)]
struct C0Args {
    #[arg(long, default_value_t = 8)]
    trunc: usize,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
}

/// How a finished run ended.
enum Outcome {
    Pass,
    ContractViolated(String),
}

/// Resolved inputs shared by every subcommand.
struct RunContext {
    file: ConfigFile,
    cfg: SolverConfig,
    seed: u64,
    out: PathBuf,
}

impl RunContext {
    fn c0(&self, flag: Option<f64>) -> (f64, C0Provenance) {
        match flag.or(self.file.c0) {
            Some(c) => (c, C0Provenance::Configured),
            None => (DEFAULT_C0, C0Provenance::Estimated),
        }
    }

    fn manifest(&self, provenance: C0Provenance, extra: serde_json::Value) -> RunManifest {
        let echo = json!({ "config": self.file, "arguments": extra });
        RunManifest::new(echo, self.seed, provenance, chrono::Utc::now().to_rfc3339())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn usage(msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow!(UsageError(msg.to_string()))
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_modes(text: &str) -> anyhow::Result<Vec<ModeIndex>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let v: Vec<i32> = pair
                .split(',')
                .map(|x| x.trim().parse::<i32>())
                .collect::<Result<_, _>>()
                .map_err(|e| usage(format!("bad mode `{pair}`: {e}")))?;
            match v.as_slice() {
                [a, b] => Ok(ModeIndex::new(*a, *b)),
                _ => Err(usage(format!("mode `{pair}` needs two components"))),
            }
        })
        .collect()
}

fn f(x: f64) -> String {
    x.to_string()
}

fn default_preset(cmd: &Command) -> Preset {
    match cmd {
        Command::Sync(_) | Command::Pullback(_) => Preset::Laminar,
        _ => Preset::Mixing,
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunContext> {
    let mut file = match &cli.config {
        Some(path) => ConfigFile::load(path).map_err(usage)?,
        None => {
            let cfg = match cli.preset.unwrap_or_else(|| default_preset(&cli.command)) {
                Preset::Laminar => reference::laminar(),
                Preset::Mixing => reference::mixing(),
            };
            ConfigFile::from_solver(&cfg, 0, None)
        }
    };
    if let Some(s) = cli.seed {
        file.seed = s;
    }
    let cfg = file.solver_config().map_err(usage)?;
    cfg.steps_per_period().map_err(usage)?;
    Ok(RunContext {
        seed: file.seed,
        file,
        cfg,
        out: cli.out.clone(),
    })
}

fn finish(
    ctx: &RunContext,
    mut manifest: RunManifest,
    hash: Option<u64>,
    report: serde_json::Value,
) -> anyhow::Result<()> {
    if let Some(h) = hash {
        manifest.content_hash = h;
    }
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let path = ctx.path("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    manifest.write(&ctx.out)?;
    Ok(())
}

fn verdict(ok: bool, what: &str) -> Outcome {
    if ok {
        Outcome::Pass
    } else {
        Outcome::ContractViolated(what.to_string())
    }
}

// ---------------------------------------------------------------------------

fn run_simulate(ctx: &RunContext, a: &SimulateArgs) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.steps_per_period()? as usize;
    let n = p * a.periods;
    let w0 = if a.init_radius > 0.0 {
        sphere_sample(&ctx.cfg, a.init_radius, ctx.seed)
    } else {
        SpectralField::zeros(ctx.cfg.trunc)
    };
    let store = WienerStore::derive(ctx.seed, ctx.cfg.dt, ctx.cfg.noise.channels(), 0, n.max(1) as i64 - 1)?;
    let traj = simulate(&w0, 0, n, &ctx.cfg, &store)?;
    let manifest = ctx.manifest(
        C0Provenance::Estimated,
        json!({ "periods": a.periods, "init_radius": a.init_radius }),
    );
    let manifest = save_trajectory(&traj, &manifest, &ctx.path("trajectory.trj"))?;
    let rows = traj.frames.iter().enumerate().map(|(j, w)| {
        let energy: f64 = w.neg_laplacian_pow(-0.5).norm_sq();
        vec![
            j.to_string(),
            f(j as f64 * ctx.cfg.dt),
            f(w.norm_sq()),
            f(energy),
            f(spectral_tail_fraction(w)),
        ]
    });
    write_csv(
        &ctx.path("series.csv"),
        &["step", "time", "enstrophy", "energy", "tail_fraction"],
        rows,
    )?;
    let last = traj.last();
    println!("steps = {n}");
    println!("final enstrophy = {}", last.norm_sq());
    println!("final tail fraction = {:e}", spectral_tail_fraction(last));
    finish(
        ctx,
        manifest.clone(),
        None,
        json!({ "steps": n, "final_enstrophy": last.norm_sq() }),
    )?;
    Ok(Outcome::Pass)
}

fn run_brackets(ctx: &RunContext, a: &BracketArgs) -> anyhow::Result<Outcome> {
    let modes = parse_modes(&a.modes)?;
    let z0 = ForcedModeSet::unit(modes).map_err(usage)?;
    let rep = analyze(&z0, TruncationSpec::new(a.trunc), a.depth).map_err(usage)?;
    println!("classification: {:?}", rep.classification);
    println!("span dimensions: {:?}", rep.span_dims);
    println!("truncated dimension: {}", rep.truncated_dimension);
    if let Some(b) = &rep.degenerate_basis {
        println!("degenerate subspace dimension: {}", b.len());
    }
    let rows = rep
        .span_dims
        .iter()
        .enumerate()
        .map(|(d, n)| vec![(d + 1).to_string(), n.to_string()]);
    let hash = write_csv(&ctx.path("span_dims.csv"), &["depth", "dimension"], rows)?;
    let manifest = ctx.manifest(
        C0Provenance::Estimated,
        json!({ "modes": a.modes, "trunc": a.trunc, "depth": a.depth }),
    );
    finish(ctx, manifest, Some(hash), serde_json::to_value(&rep)?)?;
    Ok(verdict(
        rep.classification != Classification::Indeterminate,
        "span did not saturate",
    ))
}

fn run_regime(ctx: &RunContext, a: &RegimeArgs) -> anyhow::Result<Outcome> {
    let (c0, prov) = ctx.c0(a.c0);
    let rep = match (a.nu, a.f_sup, a.b0) {
        (None, None, None) => {
            let mut r = regime_report(&ctx.cfg, c0, a.alpha).map_err(usage)?;
            r.c0_provenance = prov;
            r
        }
        (Some(nu), Some(fs), Some(b0)) => regime_from_values(nu, fs, b0, c0, a.alpha, prov).map_err(usage)?,
        _ => return Err(usage("--nu, --f-sup and --b0 go together")),
    };
    let name = match rep.classification {
        Regime::Laminar => "laminar",
        Regime::MixingOnly => "mixing_only",
        Regime::Unresolved => "unresolved",
    };
    println!("G1 = {}", rep.g1);
    println!("G2 = {}", rep.g2);
    println!("delta0 = {}", rep.delta0);
    println!("c0 = {} ({:?})", rep.c0, rep.c0_provenance);
    println!("regime: {name}");
    let manifest = ctx.manifest(
        prov,
        json!({ "nu": a.nu, "f_sup": a.f_sup, "b0": a.b0, "c0": c0, "alpha": a.alpha }),
    );
    finish(ctx, manifest, None, serde_json::to_value(rep)?)?;
    Ok(verdict(
        rep.equivalence_holds != Some(false),
        "delta0 sign disagrees with G2 < 1/c0",
    ))
}

fn run_sync(ctx: &RunContext, a: &SyncArgs) -> anyhow::Result<Outcome> {
    let (c0, prov) = ctx.c0(a.c0);
    let w1 = sphere_sample(&ctx.cfg, 1.0, ensemble_seed(ctx.seed, 9, 0));
    let w2 = w1.scaled(-1.0);
    let seeds: Vec<u64> = (0..a.seeds).map(|i| ensemble_seed(ctx.seed, 0, i)).collect();
    let rep = synchronization_experiment(&ctx.cfg, c0, &seeds, &w1, &w2, a.horizon, a.t_start)?;
    let rows = rep.per_seed.iter().map(|r| {
        vec![
            r.seed.to_string(),
            r.fit.slope.map_or("nan".into(), f),
            f(r.fit.t_start),
            f(r.fit.t_end),
            r.fit.reached_roundoff.to_string(),
        ]
    });
    let hash = write_csv(
        &ctx.path("sync_slopes.csv"),
        &["seed", "slope", "t_start", "t_end", "reached_roundoff"],
        rows,
    )?;
    println!("delta0 = {}", rep.regime.delta0);
    println!("threshold = {}", rep.threshold);
    println!("median slope = {:?}", rep.median_slope);
    let holds = rep.contract_holds();
    println!(
        "contract: {}",
        holds.map_or("not asserted (regime is not laminar)".into(), |h| h.to_string())
    );
    let manifest = ctx.manifest(
        prov,
        json!({ "seeds": a.seeds, "horizon": a.horizon, "t_start": a.t_start, "c0": c0 }),
    );
    finish(ctx, manifest, Some(hash), serde_json::to_value(&rep)?)?;
    Ok(verdict(holds != Some(false), "median slope above -delta0/2"))
}

fn run_pullback(ctx: &RunContext, a: &PullbackArgs) -> anyhow::Result<Outcome> {
    let (c0, prov) = ctx.c0(a.c0);
    let cfg = &ctx.cfg;
    let p = cfg.steps_per_period()?;
    let lo = a.t_probe - p * (a.n_max as i64 + 2);
    let store = WienerStore::derive(ctx.seed, cfg.dt, cfg.noise.channels(), lo, a.t_probe + 12 * p)?;
    let rep = pullback_periodic_solution(cfg, Some(&store), a.n_max, a.t_probe)?;
    let periodicity = random_periodicity_check(cfg, &store, a.n_max, a.t_probe, 1.0, 10)?;
    let regime = regime_report(cfg, c0, 1.0)?;
    let bound = (-regime.delta0 * cfg.forcing.period / 4.0).exp();
    let quiet = cfg.clone().with_noise(ForcedModeSet::empty());
    let cross = match solve_deterministic_periodic(&quiet, a.solver_tol, 2000) {
        Ok(z) => {
            let det = pullback_periodic_solution(&quiet, None, a.n_max, a.t_probe)?;
            Some(compare_with_periodic(&det.w_star, &z)?)
        }
        Err(Error::NoConvergence { periods, residual }) => {
            println!("noise-free periodic solve did not converge in {periods} periods (residual {residual:e})");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let rows = rep
        .cauchy_table
        .iter()
        .enumerate()
        .map(|(i, c)| vec![(i + 1).to_string(), f(*c)]);
    let hash = write_csv(&ctx.path("cauchy_table.csv"), &["n", "increment_norm"], rows)?;
    println!("tail ratio = {:?} (bound {bound})", rep.tail_ratio);
    println!("periodicity residual = {:e}", periodicity.periodicity_residual);
    println!("forward attraction slope = {:?}", periodicity.forward_attraction.slope);
    if let Some(c) = cross {
        println!("noise-free cross-check = {c:e}");
    }
    let laminar = regime.classification == Regime::Laminar;
    let ok = periodicity.periodicity_residual <= 1e-6
        && (!laminar || rep.tail_ratio.is_some_and(|r| r <= bound))
        && cross.is_none_or(|c| c <= 10.0 * a.solver_tol);
    let manifest = ctx.manifest(prov, json!({ "n_max": a.n_max, "t_probe": a.t_probe, "c0": c0 }));
    let report = json!({
        "tail_ratio": rep.tail_ratio,
        "tail_bound": bound,
        "regime": regime,
        "periodicity": periodicity,
        "noise_free_cross_check": cross,
        "w_star_initial": rep.w_star.frames[0].coeffs(),
    });
    finish(ctx, manifest, Some(hash), report)?;
    Ok(verdict(ok, "pullback checks failed"))
}

fn run_mixing(ctx: &RunContext, a: &MixingArgs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let m = MetricConfig::for_config(cfg, a.r).map_err(usage)?;
    let u = sphere_sample(cfg, 1.0, reference::MIXING_DIRECTION_SEED);
    let rep = mixing_decay_experiment(
        &u.scaled(a.radius),
        &u.scaled(-a.radius),
        cfg,
        ctx.seed,
        a.replicas,
        a.periods,
        &m,
    )?;
    let rows = rep.table.iter().map(|r| {
        vec![
            r.period_index.to_string(),
            f(r.lower_dist),
            f(r.upper_dist),
            f(r.floor_lower),
            f(r.floor_upper),
        ]
    });
    let hash = write_csv(
        &ctx.path("decay_table.csv"),
        &["period_index", "lower_dist", "upper_dist", "floor_lower", "floor_upper"],
        rows,
    )?;
    let ratio = rep.final_over_initial();
    println!("gamma_hat = {:?} over {} rows", rep.gamma_hat, rep.rows_fitted);
    println!("final/initial upper distance = {ratio:e}");
    if let Some(last) = rep.table.last() {
        println!(
            "final upper distance = {} (same-law floor {})",
            last.upper_dist, last.floor_upper
        );
    }
    let (c0, prov) = ctx.c0(None);
    let regime = regime_report(cfg, c0, 1.0)?;
    let manifest = ctx.manifest(
        prov,
        json!({ "replicas": a.replicas, "periods": a.periods, "radius": a.radius, "r": a.r }),
    );
    finish(
        ctx,
        manifest,
        Some(hash),
        json!({ "report": rep, "metric": m, "regime": regime }),
    )?;
    Ok(verdict(
        rep.gamma_hat.is_some_and(|g| g > 0.0) && ratio <= 0.01,
        "no decay to 1% of the initial distance",
    ))
}

fn run_wlln(ctx: &RunContext, a: &WllnArgs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let psi = Observable::ClippedEnstrophy { level: a.level };
    let w0 = SpectralField::zeros(cfg.trunc);
    let s2 = a.second_seed.unwrap_or_else(|| ensemble_seed(ctx.seed, 1, 0));
    let runs = exec::map_indexed(2, exec::Execution::Parallel, |i| {
        wlln_estimate(
            &w0,
            cfg,
            if i == 0 { ctx.seed } else { s2 },
            &psi,
            a.periods,
            AveragingMode::Continuous,
        )
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows = (0..a.periods).map(|j| vec![(j + 1).to_string(), f(runs[0].by_period[j]), f(runs[1].by_period[j])]);
    let hash = write_csv(
        &ctx.path("running_averages.csv"),
        &["periods", "average_1", "average_2"],
        rows,
    )?;
    let quarter = (a.periods / 4).max(1);
    let d_full = (runs[0].last() - runs[1].last()).abs();
    let d_quarter = (runs[0].at(quarter) - runs[1].at(quarter)).abs();
    println!("averages = {} / {}", runs[0].last(), runs[1].last());
    println!(
        "|A1 - A2| at {quarter} periods = {d_quarter:e}, at {} = {d_full:e}",
        a.periods
    );
    let manifest = ctx.manifest(
        C0Provenance::Estimated,
        json!({ "periods": a.periods, "level": a.level, "second_seed": s2 }),
    );
    let report =
        json!({ "observable": psi.name(), "gap_full": d_full, "gap_quarter": d_quarter, "seeds": [ctx.seed, s2] });
    finish(ctx, manifest, Some(hash), report)?;
    Ok(verdict(
        d_full <= 0.5 * d_quarter,
        "running averages did not halve their gap",
    ))
}

fn run_clt(ctx: &RunContext, a: &CltArgs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let psi = Observable::ClippedEnstrophy { level: a.level };
    let plan = CenteringPlan {
        replicas: a.centering_replicas,
        periods: a.centering_periods,
        burn_in: a.burn_in,
    };
    let w0 = SpectralField::zeros(cfg.trunc);
    let rep = clt_experiment(&w0, cfg, ctx.seed, &psi, &a.n, a.replicas, a.burn_in, plan).map_err(|e| match e {
        Error::InvalidArgument(_) => usage(e),
        e => e.into(),
    })?;
    let rows = rep.series.iter().flat_map(|s| {
        s.samples
            .iter()
            .enumerate()
            .map(move |(r, x)| vec![s.n.to_string(), r.to_string(), f(*x)])
    });
    let hash = write_csv(&ctx.path("clt_samples.csv"), &["n", "replica", "sample"], rows)?;
    let critical = 1.36 / (a.replicas as f64).sqrt();
    println!("mu_hat = {} +- {}", rep.mu_hat, rep.mu_standard_error);
    for s in &rep.series {
        println!(
            "N = {}: sigma2 = {}, KS = {} (critical {critical:.4})",
            s.n, s.sigma2_hat, s.ks_statistic
        );
    }
    let ks_ok = rep.series.first().is_some_and(|s| s.ks_statistic <= critical);
    let stable = match (rep.series.first(), rep.series.last()) {
        (Some(x), Some(y)) => (y.sigma2_hat / x.sigma2_hat - 1.0).abs() <= 0.2,
        _ => false,
    };
    let manifest = ctx.manifest(
        C0Provenance::Estimated,
        json!({ "n": a.n, "replicas": a.replicas, "burn_in": a.burn_in, "centering": plan, "level": a.level }),
    );
    finish(ctx, manifest, Some(hash), serde_json::to_value(&rep)?)?;
    Ok(verdict(ks_ok && stable, "KS above critical value or unstable variance"))
}

fn run_malliavin(ctx: &RunContext, a: &MalliavinArgs) -> anyhow::Result<Outcome> {
    let cfg = &ctx.cfg;
    let complement = a.complement.as_deref().map(parse_modes).transpose()?;
    let settings = ProbeSettings {
        samples: a.samples,
        window_periods: a.window_periods,
        burn_in_periods: a.burn_in,
        projection_modes: box_modes(cfg.trunc, a.proj_radius),
        complement_modes: complement,
        epsilon: None,
    };
    let w0 = if a.init_radius > 0.0 {
        sphere_sample(cfg, a.init_radius, ctx.seed)
    } else {
        SpectralField::zeros(cfg.trunc)
    };
    let rep = nondegeneracy_probe(cfg, ctx.seed, &w0, &settings).map_err(|e| match e {
        Error::InvalidArgument(_) | Error::OutOfTruncation { .. } | Error::DuplicateMode(_) => usage(e),
        e => e.into(),
    })?;
    let rows = rep.samples.iter().enumerate().map(|(i, s)| {
        vec![
            i.to_string(),
            s.seed.to_string(),
            f(s.min_eigenvalue),
            f(s.max_eigenvalue),
            f(s.trace),
            s.full_rank.to_string(),
        ]
    });
    let hash = write_csv(
        &ctx.path("min_eigenvalues.csv"),
        &[
            "sample",
            "seed",
            "min_eigenvalue",
            "max_eigenvalue",
            "trace",
            "full_rank",
        ],
        rows,
    )?;
    println!(
        "min eigenvalue quantiles (0, .1, .5, .9, 1) = {:?}",
        rep.min_eig_quantiles
    );
    println!("full-rank fraction = {}", rep.full_rank_fraction);
    println!("degenerate fraction (eps = 1e-8 trace/p) = {}", rep.degenerate_fraction);
    if let Some(c) = rep.complement_max_quadform {
        println!("complement max quadratic form = {c:e}");
    }
    let psd = rep.samples.iter().all(|s| s.psd);
    let manifest = ctx.manifest(
        C0Provenance::Estimated,
        json!({ "settings": settings, "init_radius": a.init_radius }),
    );
    finish(ctx, manifest, Some(hash), serde_json::to_value(&rep)?)?;
    Ok(verdict(psd, "Gram matrix not positive semidefinite"))
}

fn run_c0(ctx: &RunContext, a: &C0Args) -> anyhow::Result<Outcome> {
    let est = estimate_ladyzhenskaya_c0(TruncationSpec::new(a.trunc), a.samples, ctx.seed).map_err(usage)?;
    println!("c0 lower bound = {}", est.lower_bound);
    println!("1/c0 = {}", 1.0 / est.lower_bound);
    let manifest = ctx.manifest(
        C0Provenance::Estimated,
        json!({ "trunc": a.trunc, "samples": a.samples }),
    );
    finish(ctx, manifest, None, serde_json::to_value(est)?)?;
    Ok(Outcome::Pass)
}

fn dispatch(cli: &Cli) -> anyhow::Result<Outcome> {
    let ctx = resolve(cli)?;
    match &cli.command {
        Command::Simulate(a) => run_simulate(&ctx, a),
        Command::Brackets(a) => run_brackets(&ctx, a),
        Command::Regime(a) => run_regime(&ctx, a),
        Command::Sync(a) => run_sync(&ctx, a),
        Command::Pullback(a) => run_pullback(&ctx, a),
        Command::Mixing(a) => run_mixing(&ctx, a),
        Command::Wlln(a) => run_wlln(&ctx, a),
        Command::Clt(a) => run_clt(&ctx, a),
        Command::Malliavin(a) => run_malliavin(&ctx, a),
        Command::C0Estimate(a) => run_c0(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    exec::init_thread_pool();
    match dispatch(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::ContractViolated(what)) => {
            eprintln!("contract violated: {what}");
            ExitCode::from(1)
        }
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
