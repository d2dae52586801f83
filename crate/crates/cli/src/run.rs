//! Run directories: config echo, seed and version files, plus helpers for
//! writing outputs into them.

use std::fs;
use std::path::{Path, PathBuf};

use scalar_ebm::presets::{BenchmarkPreset, PRESET_NAMES};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

/// Preset name that selects the two-expert composition benchmark.
pub const FIG2_PRESET: &str = "fig2";

pub fn version_string() -> String {
    option_env!("SCALAR_EBM_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub struct RunContext {
    pub dir: PathBuf,
    pub seed: u64,
    pub preset_name: Option<String>,
    /// Resolved dataset preset; `None` for no preset or for `fig2`.
    pub preset: Option<BenchmarkPreset>,
}

impl RunContext {
    pub fn create(cfg: &ExperimentConfig, dir: PathBuf) -> Result<Self, CliError> {
        let preset = match cfg.preset.as_deref() {
            None | Some(FIG2_PRESET) => None,
            Some(name) => Some(BenchmarkPreset::by_name(name).map_err(|_| {
                CliError::Config(format!(
                    "unknown `preset` {name:?} (expected one of {}, {FIG2_PRESET})",
                    PRESET_NAMES.join(", ")
                ))
            })?),
        };
        fs::create_dir_all(&dir)?;
        let ctx = Self { dir, seed: cfg.seed.unwrap_or(0), preset_name: cfg.preset.clone(), preset };
        ctx.write_json("config_echo.json", cfg)?;
        fs::write(ctx.path("seed"), format!("{}\n", ctx.seed))?;
        fs::write(ctx.path("version"), version_string() + "\n")?;
        Ok(ctx)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        write_json(&self.path(name), value)
    }

    pub fn is_fig2(&self) -> bool {
        self.preset_name.as_deref() == Some(FIG2_PRESET)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
