//! Run manifests, the binary trajectory container, TOML configuration and
//! CSV emitters.
//!
//! Trajectory layout: the 8 bytes `TSNSTRJ1`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then every frame as little-endian `f64`
//! coefficients in the header's mode order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bracket::ForcedModeSet;
use crate::dynamics::{ForcingProfile, ForcingTerm, SolverConfig, Trajectory};
use crate::error::{Error, Result};
use crate::regime::C0Provenance;
use crate::spectral::{ModeIndex, SpectralField, TruncationSpec};

pub const MAGIC: &[u8; 8] = b"TSNSTRJ1";
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// First 8 bytes (little-endian) of the SHA-256 digest.
pub fn content_hash(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_echo: serde_json::Value,
    pub master_seed: u64,
    pub c0_provenance: C0Provenance,
    pub created_at: String,
    /// Hash of the run's binary payload, or of its primary output when the
    /// run writes no trajectory.
    pub content_hash: u64,
}

impl RunManifest {
    pub fn new(
        config_echo: serde_json::Value,
        master_seed: u64,
        c0_provenance: C0Provenance,
        created_at: String,
    ) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config_echo,
            master_seed,
            c0_provenance,
            created_at,
            content_hash: 0,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryHeader {
    manifest: RunManifest,
    config: SolverConfig,
    start_index: i64,
    frame_count: usize,
    modes: Vec<ModeIndex>,
}

fn payload_bytes(traj: &Trajectory, modes: &[ModeIndex]) -> Vec<u8> {
    let trunc = traj.config.trunc;
    let slots: Vec<usize> = modes.iter().map(|k| trunc.index_of(*k).expect("own modes")).collect();
    let mut out = Vec::with_capacity(traj.frames.len() * slots.len() * 8);
    for f in &traj.frames {
        for &i in &slots {
            out.extend_from_slice(&f.coeffs()[i].to_le_bytes());
        }
    }
    out
}

/// Writes `traj`; the manifest's `content_hash` is set from the payload and
/// the completed manifest is returned.
pub fn save_trajectory(traj: &Trajectory, manifest: &RunManifest, path: &Path) -> Result<RunManifest> {
    let modes = traj.config.trunc.modes();
    let payload = payload_bytes(traj, &modes);
    let mut manifest = manifest.clone();
    manifest.content_hash = content_hash(&payload);
    let header = TrajectoryHeader {
        manifest: manifest.clone(),
        config: traj.config.clone(),
        start_index: traj.start_index,
        frame_count: traj.frames.len(),
        modes,
    };
    let text = serde_json::to_vec(&header).expect("header serialises");
    let len = u32::try_from(text.len()).map_err(|_| format_err(path, "header longer than 4 GiB"))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(MAGIC)
        .and_then(|_| file.write_all(&len.to_le_bytes()))
        .and_then(|_| file.write_all(&text))
        .and_then(|_| file.write_all(&payload))
        .map_err(io_err(path))?;
    Ok(manifest)
}

pub fn load_trajectory(path: &Path) -> Result<(Trajectory, RunManifest)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "missing TSNSTRJ1 tag"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(format_err(path, format!("header of {len} bytes is cut short")));
    }
    let header: TrajectoryHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| format_err(path, format!("header: {e}")))?;
    header.config.validate()?;
    let trunc = header.config.trunc;
    if header.modes.len() != trunc.len() {
        return Err(format_err(
            path,
            format!("{} modes listed, truncation has {}", header.modes.len(), trunc.len()),
        ));
    }
    let mut slots = Vec::with_capacity(trunc.len());
    for (j, k) in header.modes.iter().enumerate() {
        let i = trunc
            .index_of(*k)
            .ok_or_else(|| format_err(path, format!("mode {k} outside truncation")))?;
        if header.modes[..j].contains(k) {
            return Err(format_err(path, format!("mode {k} listed twice")));
        }
        slots.push(i);
    }
    let payload = &body[len..];
    let frame_bytes = 8 * trunc.len();
    let need = header.frame_count * frame_bytes;
    if payload.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            frame: payload.len() / frame_bytes.max(1),
            frames: header.frame_count,
        });
    }
    if payload.len() > need {
        return Err(format_err(path, format!("{} trailing bytes", payload.len() - need)));
    }
    let actual = content_hash(payload);
    if actual != header.manifest.content_hash {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            stored: header.manifest.content_hash,
            actual,
        });
    }
    let frames = payload
        .chunks_exact(frame_bytes.max(1))
        .take(header.frame_count)
        .map(|chunk| {
            let mut c = vec![0.0; trunc.len()];
            for (j, b) in chunk.chunks_exact(8).enumerate() {
                c[slots[j]] = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
            SpectralField::from_raw(trunc, c)
        })
        .collect();
    Ok((
        Trajectory {
            config: header.config,
            start_index: header.start_index,
            frames,
        },
        header.manifest,
    ))
}

// ---------------------------------------------------------------------------
// Configuration file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingEntry {
    pub mode: [i32; 2],
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    #[serde(default)]
    pub modes: Vec<[i32; 2]>,
    #[serde(default)]
    pub amps: Vec<f64>,
}

/// The TOML run configuration. See the README for the grammar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub nu: f64,
    pub dt: f64,
    #[serde(rename = "trunc_K")]
    pub trunc_k: usize,
    #[serde(default = "yes")]
    pub dealias: bool,
    pub period: f64,
    #[serde(default)]
    pub forcing: Vec<ForcingEntry>,
    #[serde(default)]
    pub noise: NoiseEntry,
    #[serde(default)]
    pub seed: u64,
    /// Ladyzhenskaya constant; absent means the shipped estimate.
    #[serde(default)]
    pub c0: Option<f64>,
    #[serde(default = "yes")]
    pub nonlinear: bool,
}

fn yes() -> bool {
    true
}

fn mode(m: [i32; 2]) -> ModeIndex {
    ModeIndex::new(m[0], m[1])
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_solver(cfg: &SolverConfig, seed: u64, c0: Option<f64>) -> Self {
        Self {
            nu: cfg.nu,
            dt: cfg.dt,
            trunc_k: cfg.trunc.radius,
            dealias: cfg.trunc.dealias,
            period: cfg.forcing.period,
            forcing: cfg
                .forcing
                .terms
                .iter()
                .map(|t| ForcingEntry {
                    mode: [t.mode.k1, t.mode.k2],
                    amplitude: t.amplitude,
                    phase: t.phase,
                })
                .collect(),
            noise: NoiseEntry {
                modes: cfg.noise.modes().iter().map(|k| [k.k1, k.k2]).collect(),
                amps: cfg.noise.amplitudes().to_vec(),
            },
            seed,
            c0,
            nonlinear: cfg.nonlinear,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let trunc = TruncationSpec::new(self.trunc_k).with_dealias(self.dealias);
        let noise = ForcedModeSet::new(
            self.noise.modes.iter().copied().map(mode).collect(),
            self.noise.amps.clone(),
        )?;
        let terms = self
            .forcing
            .iter()
            .map(|f| ForcingTerm {
                mode: mode(f.mode),
                amplitude: f.amplitude,
                phase: f.phase,
            })
            .collect();
        let forcing = ForcingProfile::new(self.period, terms)?;
        Ok(SolverConfig::new(self.nu, self.dt, trunc, noise, forcing)?.with_nonlinear(self.nonlinear))
    }
}

// ---------------------------------------------------------------------------
// CSV

/// Writes `rows` under a one-line `header`. Floats use the shortest
/// round-trip representation, so identical runs give identical bytes.
pub fn write_csv<R, I>(path: &Path, header: &[&str], rows: I) -> Result<u64>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| format_err(path, e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| format_err(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, &bytes).map_err(io_err(path))?;
    Ok(content_hash(&bytes))
}
