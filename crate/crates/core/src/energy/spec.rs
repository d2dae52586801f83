//! JSON energy documents.
//!
//! ```json
//! {"kind": "gaussian_mixture", "centers": [[0, 4]], "weights": [1.0], "variance": 0.25}
//! {"kind": "scalar_net", "widths": [2, 64, 64, 1], "activation": "softplus", "params_path": "u.params.bin"}
//! {"kind": "composed", "mode": "additive", "terms": [{"coefficient": 1.0, "energy": "a.json"}]}
//! ```
//!
//! Network parameters are stored as raw little-endian `f64` in a sidecar file
//! whose path is resolved relative to the JSON document.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Activation, ComposedEnergy, CompositionMode, EnergyField, GaussianMixtureEnergy, ScalarNetEnergy, Term};
use crate::error::{Error, Result};
use crate::points::PointSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergySpec {
    GaussianMixture {
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        variance: f64,
    },
    ScalarNet {
        widths: Vec<usize>,
        #[serde(default)]
        activation: Activation,
        params_path: String,
    },
    Composed {
        mode: CompositionMode,
        terms: Vec<TermSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub coefficient: f64,
    pub energy: TermSource,
}

/// A term is either a path to another energy document or an inline one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TermSource {
    Path(String),
    Inline(Box<EnergySpec>),
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_params(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_params(path: &Path, params: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

impl EnergySpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Instantiates the field; relative paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<Arc<dyn EnergyField>> {
        match self {
            EnergySpec::GaussianMixture { centers, weights, variance } => Ok(Arc::new(GaussianMixtureEnergy::new(
                PointSet::from_rows(centers)?,
                weights.clone(),
                *variance,
            )?)),
            EnergySpec::ScalarNet { widths, activation: _, params_path } => {
                let params = read_params(&resolve(base_dir, params_path))?;
                Ok(Arc::new(ScalarNetEnergy::new(widths.clone(), params)?))
            }
            EnergySpec::Composed { mode, terms } => {
                let terms = terms
                    .iter()
                    .map(|t| {
                        let field = match &t.energy {
                            TermSource::Path(p) => load_energy(&resolve(base_dir, p))?,
                            TermSource::Inline(spec) => spec.build(base_dir)?,
                        };
                        Ok(Term { coefficient: t.coefficient, field })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Arc::new(ComposedEnergy::new(terms, *mode)?))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Loads an energy document from disk.
pub fn load_energy(path: &Path) -> Result<Arc<dyn EnergyField>> {
    let spec = EnergySpec::from_path(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    spec.build(base)
}

impl GaussianMixtureEnergy {
    pub fn to_spec(&self) -> EnergySpec {
        EnergySpec::GaussianMixture {
            centers: self.centers().rows().map(|r| r.to_vec()).collect(),
            weights: self.weights().to_vec(),
            variance: self.variance(),
        }
    }
}

impl ScalarNetEnergy {
    /// Writes `<json_path>` and the parameter sidecar next to it.
    pub fn save(&self, json_path: &Path) -> Result<()> {
        let stem = json_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad energy path {}", json_path.display())))?;
        let blob = format!("{stem}.params.bin");
        let dir = json_path.parent().unwrap_or(Path::new("."));
        write_params(&dir.join(&blob), self.params())?;
        EnergySpec::ScalarNet { widths: self.widths().to_vec(), activation: self.activation(), params_path: blob }
            .save(json_path)
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        match EnergySpec::from_path(json_path)? {
            EnergySpec::ScalarNet { widths, params_path, .. } => {
                let base = json_path.parent().unwrap_or(Path::new("."));
                ScalarNetEnergy::new(widths, read_params(&resolve(base, &params_path))?)
            }
            _ => Err(Error::Format(format!("{} is not a scalar_net document", json_path.display()))),
        }
    }
}
