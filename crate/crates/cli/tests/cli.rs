use std::path::Path;
use std::process::{Command, Output};

use tsns_core::io::{load_trajectory, ConfigFile, RunManifest, MANIFEST_FILE};
use tsns_core::regime::reference;

fn tsns(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsns"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("TSNS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn brackets_four_direction_full() {
    let dir = tempfile::tempdir().unwrap();
    let o = tsns(
        dir.path(),
        &["brackets", "--modes", "1,0;-1,0;1,1;-1,-1", "--trunc", "3"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("classification: Full"));
    let csv = std::fs::read_to_string(dir.path().join("span_dims.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("depth,dimension"));
    assert!(csv.lines().last().unwrap().ends_with(",48"));
    RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
}

#[test]
fn regime_reports_laminar() {
    let dir = tempfile::tempdir().unwrap();
    let o = tsns(
        dir.path(),
        &["regime", "--nu", "2", "--f-sup", "0", "--b0", "1", "--c0", "1"],
    );
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("delta0 = 1.75"), "{s}");
    assert!(s.contains("regime: laminar"));
    let m = RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(serde_json::to_value(m.c0_provenance).unwrap(), "CONFIGURED");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tsns(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(tsns(dir.path(), &["regime", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        tsns(dir.path(), &["brackets", "--modes", "1,x", "--trunc", "3"])
            .status
            .code(),
        Some(2)
    );

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "nu = 1.0\ndt = 0.01\ntrunc_K = 4\nperiod = 1.0\nviscosity = 3\n").unwrap();
    let o = tsns(dir.path(), &["--config", bad.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(2));

    // period not a multiple of dt
    std::fs::write(&bad, "nu = 1.0\ndt = 0.03\ntrunc_K = 4\nperiod = 1.0\n").unwrap();
    assert_eq!(
        tsns(dir.path(), &["--config", bad.to_str().unwrap(), "simulate"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn simulate_from_config_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        ConfigFile::from_solver(&reference::laminar(), 11, None).to_toml(),
    )
    .unwrap();
    let mut series = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = tsns(
            &out,
            &["--config", cfg_path.to_str().unwrap(), "simulate", "--init-radius", "1"],
        );
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let (traj, manifest) = load_trajectory(&out.join("trajectory.trj")).unwrap();
        assert_eq!(manifest.master_seed, 11);
        assert_eq!(traj.frames.len(), 101);
        series.push(std::fs::read(out.join("series.csv")).unwrap());
    }
    assert_eq!(series[0], series[1]);
    let text = String::from_utf8(series.pop().unwrap()).unwrap();
    assert_eq!(text.lines().next(), Some("step,time,enstrophy,energy,tail_fraction"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut series = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        let o = tsns(&out, &["--preset", "laminar", "--seed", seed, "simulate"]);
        assert_eq!(o.status.code(), Some(0));
        series.push(std::fs::read(out.join("series.csv")).unwrap());
    }
    assert_ne!(series[0], series[1]);
}
