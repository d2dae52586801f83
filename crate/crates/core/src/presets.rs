//! Benchmark datasets and their default settings.

use serde::Serialize;

use crate::energy::GaussianMixtureEnergy;
use crate::error::{Error, Result};
use crate::grid::BoxBounds;
use crate::lyapunov::BandwidthRule;
use crate::points::PointSet;
use crate::rng::{NoiseStream, Purpose};
use crate::target::{scott_bandwidth, EmpiricalDataset, KdeTarget};
use crate::training::{Loss, TrainConfig};

/// Radius of the eight-Gaussian ring.
pub const EIGHT_GAUSSIANS_RADIUS: f64 = 4.0;

/// Eight equally spaced centers on the radius-4 circle, starting at angle 0.
pub fn eight_gaussian_centers() -> PointSet {
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|k| {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            vec![EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin()]
        })
        .collect();
    PointSet::from_rows(&rows).expect("static centers")
}

/// Equal-weight mixture on the eight-Gaussian centers.
pub fn eight_gaussians_energy(variance: f64) -> GaussianMixtureEnergy {
    GaussianMixtureEnergy::equal_weights(eight_gaussian_centers(), variance).expect("static mixture")
}

pub fn expert_a_centers() -> PointSet {
    PointSet::from_rows(&[vec![3.0, 3.0], vec![3.0, -3.0], vec![-3.0, 3.0], vec![-3.0, -3.0]]).expect("static centers")
}

pub fn expert_b_centers() -> PointSet {
    PointSet::from_rows(&[vec![0.0, 4.0], vec![0.0, -4.0], vec![4.0, 0.0], vec![-4.0, 0.0]]).expect("static centers")
}

/// A named synthetic benchmark: a Gaussian mixture dataset plus the defaults
/// used when training on it and sampling from the result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkPreset {
    pub name: &'static str,
    pub centers: Vec<Vec<f64>>,
    /// Per-mode standard deviation of the generated data.
    pub spread: f64,
    pub count: usize,
    /// KDE bandwidth of the training target; `None` selects Scott's rule.
    pub bandwidth: Option<f64>,
    /// Network widths and training settings used by default on this dataset.
    pub widths: Vec<usize>,
    pub train: TrainConfig,
    /// KDE bandwidth of the KL estimator in stop-scans.
    pub kl_bandwidth: BandwidthRule,
    /// Variance of the isotropic Gaussian prior the samplers start from.
    pub prior_variance: f64,
    /// Half-width of the square box used for grids and quadrature.
    pub box_half_width: f64,
}

pub const PRESET_NAMES: [&str; 4] = ["eight_gaussians", "expert_A", "expert_B", "ou"];

impl BenchmarkPreset {
    pub fn by_name(name: &str) -> Result<Self> {
        let rows = |p: PointSet| p.rows().map(|r| r.to_vec()).collect::<Vec<_>>();
        let preset = match name {
            "eight_gaussians" => Self {
                name: "eight_gaussians",
                centers: rows(eight_gaussian_centers()),
                spread: 0.5,
                count: 800,
                bandwidth: Some(0.45),
                widths: vec![2, 64, 64, 1],
                train: TrainConfig { loss: Loss::Dsm, dsm_sigma: 0.3, learning_rate: 0.025, steps: 5000, batch_size: 1024, seed: 0 },
                kl_bandwidth: BandwidthRule::Fixed(0.15),
                prior_variance: 4.0,
                box_half_width: 8.0,
            },
            "expert_A" => Self {
                name: "expert_A",
                centers: rows(expert_a_centers()),
                spread: 0.35,
                count: 2000,
                bandwidth: Some(0.2),
                widths: vec![2, 64, 64, 1],
                train: TrainConfig { loss: Loss::Dsm, dsm_sigma: 0.15, learning_rate: 0.01, steps: 3000, batch_size: 256, seed: 0 },
                kl_bandwidth: BandwidthRule::Scott,
                prior_variance: 4.0,
                box_half_width: 8.0,
            },
            "expert_B" => Self {
                name: "expert_B",
                centers: rows(expert_b_centers()),
                spread: 0.35,
                count: 2000,
                bandwidth: Some(0.2),
                widths: vec![2, 64, 64, 1],
                train: TrainConfig { loss: Loss::Dsm, dsm_sigma: 0.15, learning_rate: 0.01, steps: 3000, batch_size: 256, seed: 0 },
                kl_bandwidth: BandwidthRule::Scott,
                prior_variance: 4.0,
                box_half_width: 8.0,
            },
            "ou" => Self {
                name: "ou",
                centers: vec![vec![0.0, 0.0]],
                spread: 1.0,
                count: 2000,
                bandwidth: None,
                widths: vec![2, 64, 64, 1],
                train: TrainConfig { loss: Loss::Dsm, dsm_sigma: 0.3, learning_rate: 0.025, steps: 5000, batch_size: 256, seed: 0 },
                kl_bandwidth: BandwidthRule::Scott,
                prior_variance: 4.0,
                box_half_width: 8.0,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(preset)
    }

    pub fn center_set(&self) -> PointSet {
        PointSet::from_rows(&self.centers).expect("preset centers are well formed")
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// The generating mixture (equal weights, variance `spread²`).
    pub fn generator(&self) -> GaussianMixtureEnergy {
        GaussianMixtureEnergy::equal_weights(self.center_set(), self.spread * self.spread)
            .expect("preset mixture is well formed")
    }

    /// KDE bandwidth for a dataset: the preset's value or Scott's rule.
    pub fn bandwidth_for(&self, data: &EmpiricalDataset) -> f64 {
        self.bandwidth.unwrap_or_else(|| scott_bandwidth(data.points()))
    }

    pub fn target(&self, data: &EmpiricalDataset) -> Result<KdeTarget> {
        KdeTarget::new(data, self.bandwidth_for(data))
    }

    /// The square simulation and quadrature box.
    pub fn bounds(&self) -> BoxBounds {
        BoxBounds::cube(self.dim(), -self.box_half_width, self.box_half_width)
    }

    /// `count` points drawn from the generator.
    pub fn dataset(&self, seed: u64) -> EmpiricalDataset {
        let pts = self.generator().sample(self.count, NoiseStream::new(seed, Purpose::Generator));
        EmpiricalDataset::new(pts).expect("generated data is finite")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_centers_on_circle() {
        let c = eight_gaussian_centers();
        assert_eq!(c.len(), 8);
        for r in c.rows() {
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn presets_resolve() {
        for name in PRESET_NAMES {
            let p = BenchmarkPreset::by_name(name).unwrap();
            assert_eq!(p.dataset(1).len(), p.count);
        }
        assert!(BenchmarkPreset::by_name("nope").is_err());
    }
}
