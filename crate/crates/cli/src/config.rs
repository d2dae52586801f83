//! Experiment configuration: one strict JSON document with a section per
//! subcommand. Every field is optional; unset fields fall back to the preset
//! and then to the library defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use scalar_ebm::lyapunov::BandwidthRule;
use scalar_ebm::ood::UnsafeSet;
use scalar_ebm::sampler::SamplerKind;
use scalar_ebm::training::Loss;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub output_dir: Option<PathBuf>,
    /// Training points (CSV or binary); defaults to the preset's generator.
    pub dataset: Option<PathBuf>,
    /// Energy JSON used by sample, stop-scan, ood and diagnose; defaults to
    /// the preset's generating mixture.
    pub energy: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub stop_scan: StopScanSection,
    #[serde(default)]
    pub compose: ComposeSection,
    #[serde(default)]
    pub ood: OodSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub loss: Option<Loss>,
    pub dsm_sigma: Option<f64>,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub widths: Option<Vec<usize>>,
    /// KDE bandwidth of the training target.
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub kind: Option<SamplerKind>,
    pub step_size: Option<f64>,
    pub steps: Option<usize>,
    pub snapshot_stride: Option<usize>,
    pub particles: Option<usize>,
    pub prior_variance: Option<f64>,
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopScanSection {
    pub step_size: Option<f64>,
    pub steps: Option<usize>,
    pub snapshot_stride: Option<usize>,
    pub particles: Option<usize>,
    pub prior_variance: Option<f64>,
    pub box_half_width: Option<f64>,
    pub kl_bandwidth: Option<BandwidthRule>,
    pub epsilon: Option<f64>,
    /// Also write every snapshot as CSV.
    pub write_snapshots: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpName {
    Conjunction,
    Disjunction,
    Negation,
    Additive,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeSection {
    pub op: Option<OpName>,
    /// Energy JSON paths; when absent, the two experts are trained first.
    pub operands: Option<Vec<PathBuf>>,
    pub lambda: Option<f64>,
    pub coefficients: Option<Vec<f64>>,
    pub samples: Option<usize>,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub prior_variance: Option<f64>,
    pub box_half_width: Option<f64>,
    pub radius: Option<f64>,
    pub centers_a: Option<Vec<Vec<f64>>>,
    pub centers_b: Option<Vec<Vec<f64>>>,
    pub gibbs_check: Option<GibbsCheckSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsCheckSection {
    pub particles: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodSetSpec {
    /// Uniform noise on the bounding box of the in-distribution points.
    Uniform { count: usize },
    /// Fresh draws from the preset generator, translated by `shift`.
    Shifted { count: usize, shift: Vec<f64> },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSection {
    /// In-distribution points; defaults to held-out generator draws.
    pub id: Option<PathBuf>,
    pub id_count: Option<usize>,
    pub sets: Option<BTreeMap<String, OodSetSpec>>,
    pub flow_steps: Option<usize>,
    pub step_size: Option<f64>,
    pub subtract_log_z: Option<bool>,
    pub barrier: Option<BarrierSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub unsafe_set: UnsafeSet,
    pub beta: f64,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
    pub snapshot_stride: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    /// Points where `h` should be positive; defaults to the preset centers.
    pub modes: Option<Vec<Vec<f64>>>,
    pub radius: Option<f64>,
    pub ring_points: Option<usize>,
    pub probe_resolution: Option<usize>,
    pub curl_points: Option<usize>,
    pub box_half_width: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }
}
