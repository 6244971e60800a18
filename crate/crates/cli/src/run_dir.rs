use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use ccaf::archive::sha256_hex;
use ccaf::trainer::CHECKPOINT_DIR;
use ccaf::Config;

use crate::{Failure, EXIT_NOT_EMPTY, EXIT_USAGE};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const FINGERPRINT: &str = "fingerprint.toml";
pub const REPORTS: &str = "reports";

/// A config file as read from disk: the bytes are what gets snapshotted.
pub struct LoadedConfig {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
    pub config: Config,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, Failure> {
    let bytes = fs::read(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let config = Config::load(path).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    Ok(LoadedConfig {
        path: path.to_path_buf(),
        bytes,
        config,
    })
}

fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Refuse a non-empty `dir` unless `force`, or unless it is already a run
/// directory for byte-identical config when `same_run_ok`.
pub fn claim(dir: &Path, cfg: &LoadedConfig, force: bool, same_run_ok: bool) -> Result<(), Failure> {
    if !is_non_empty(dir) || force {
        return Ok(());
    }
    if same_run_ok && fs::read(dir.join(CONFIG_SNAPSHOT)).is_ok_and(|b| b == cfg.bytes) {
        return Ok(());
    }
    Err(Failure::new(
        EXIT_NOT_EMPTY,
        anyhow!("{} is not empty; pass --force to write into it", dir.display()),
    ))
}

/// Write the config snapshot and fingerprint.
pub fn initialise(dir: &Path, cfg: &LoadedConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir.join(REPORTS)).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join(CONFIG_SNAPSHOT), &cfg.bytes)?;
    let mut fingerprint = format!(
        "seed = {}\nprecision = \"{}\"\nversion = \"{}\"\nconfig_sha256 = \"{}\"\nsource_config = {:?}\n",
        cfg.config.run.seed,
        match cfg.config.run.precision {
            ccaf::Precision::F32 => "f32",
            ccaf::Precision::F64 => "f64",
        },
        env!("CARGO_PKG_VERSION"),
        sha256_hex(&cfg.bytes),
        cfg.path.display().to_string(),
    );
    let overrides = active_overrides();
    if !overrides.is_empty() {
        fingerprint.push_str("\n[overrides]\n");
        for (k, v) in overrides {
            fingerprint.push_str(&format!("{k} = {v:?}\n"));
        }
    }
    fs::write(dir.join(FINGERPRINT), fingerprint)?;
    Ok(())
}

/// Environment overrides applied on top of the config file, sorted.
fn active_overrides() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ccaf::config::ENV_PREFIX) && k.contains("__"))
        .collect();
    v.sort();
    v
}

/// `<run>/checkpoints/x.ckpt` -> `<run>`.
pub fn run_dir_of(ckpt: &Path) -> Option<PathBuf> {
    let parent = ckpt.parent()?;
    if parent.file_name()? == CHECKPOINT_DIR {
        parent.parent().map(Path::to_path_buf)
    } else {
        Some(parent.to_path_buf())
    }
}
