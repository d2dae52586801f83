use rand::Rng;
use rand_distr::StandardNormal;

use super::EnergyField;
use crate::error::{Error, Result};
use crate::points::{dist2, PointSet};
use crate::rng::NoiseStream;

/// `U(x) = -log Σ wᵢ N(x; μᵢ, σ²I)`, normalized so that its Gibbs density is
/// the mixture itself (`log Z = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureEnergy {
    centers: PointSet,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    variance: f64,
    log_norm: f64,
}

impl GaussianMixtureEnergy {
    pub fn new(centers: PointSet, weights: Vec<f64>, variance: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("mixture needs at least one center"));
        }
        if weights.len() != centers.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} centers",
                weights.len(),
                centers.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid(format!("variance must be positive, got {variance}")));
        }
        let d = centers.dim() as f64;
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            centers,
            weights,
            log_weights,
            variance,
            log_norm: 0.5 * d * (2.0 * std::f64::consts::PI * variance).ln(),
        })
    }

    pub fn equal_weights(centers: PointSet, variance: f64) -> Result<Self> {
        let n = centers.len().max(1);
        Self::new(centers, vec![1.0 / n as f64; n], variance)
    }

    pub fn centers(&self) -> &PointSet {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Component log-terms `log wᵢ - ‖x-μᵢ‖²/(2σ²)` and their max.
    fn log_terms(&self, x: &[f64], out: &mut Vec<f64>) -> f64 {
        out.clear();
        let mut m = f64::NEG_INFINITY;
        for (c, lw) in self.centers.rows().zip(&self.log_weights) {
            let t = lw - 0.5 * dist2(x, c) / self.variance;
            m = m.max(t);
            out.push(t);
        }
        m
    }

    /// Responsibilities (softmax of the log-terms) and the log mixture sum.
    fn responsibilities(&self, x: &[f64], r: &mut Vec<f64>) -> f64 {
        let m = self.log_terms(x, r);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        r.iter_mut().for_each(|v| *v /= s);
        m + s.ln()
    }

    /// Mixture density.
    pub fn density(&self, x: &[f64]) -> f64 {
        (-self.energy(x)).exp()
    }

    /// Exact draws from the mixture.
    pub fn sample(&self, n: usize, stream: NoiseStream) -> PointSet {
        let d = self.centers.dim();
        let sd = self.variance.sqrt();
        let mut data = vec![0.0; n * d];
        for (i, out) in data.chunks_exact_mut(d).enumerate() {
            let mut rng = stream.rng(i as u64, 0);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            for (o, c) in out.iter_mut().zip(self.centers.row(k)) {
                let z: f64 = rng.sample(StandardNormal);
                *o = c + sd * z;
            }
        }
        PointSet::new(d, data).expect("well-formed by construction")
    }
}

impl EnergyField for GaussianMixtureEnergy {
    fn dim(&self) -> usize {
        self.centers.dim()
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let mut t = Vec::with_capacity(self.weights.len());
        let m = self.log_terms(x, &mut t);
        let s: f64 = t.iter().map(|v| (v - m).exp()).sum();
        -(m + s.ln()) + self.log_norm
    }

    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut r = Vec::with_capacity(self.weights.len());
        let lse = self.responsibilities(x, &mut r);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (c, ri) in self.centers.rows().zip(&r) {
            for k in 0..grad.len() {
                grad[k] += ri * (x[k] - c[k]);
            }
        }
        grad.iter_mut().for_each(|g| *g /= self.variance);
        -lse + self.log_norm
    }

    fn laplacian(&self, x: &[f64]) -> f64 {
        // ΔU = d/σ² - (E_r‖x-μ‖² - ‖E_r(x-μ)‖²)/σ⁴
        let d = x.len();
        let mut r = Vec::with_capacity(self.weights.len());
        self.responsibilities(x, &mut r);
        let mut mean = vec![0.0; d];
        let mut second = 0.0;
        for (c, ri) in self.centers.rows().zip(&r) {
            let mut sq = 0.0;
            for k in 0..d {
                let diff = x[k] - c[k];
                mean[k] += ri * diff;
                sq += diff * diff;
            }
            second += ri * sq;
        }
        let m2: f64 = mean.iter().map(|v| v * v).sum();
        d as f64 / self.variance - (second - m2) / (self.variance * self.variance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{fd_energy_laplacian, fd_gradient, GRADIENT_CHECK_STEP, SECOND_ORDER_STEP};
    use crate::presets;
    use crate::rng::Purpose;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn single_component_is_quadratic() {
        let e = GaussianMixtureEnergy::equal_weights(PointSet::from_rows(&[vec![0.0, 0.0]]).unwrap(), 1.0).unwrap();
        let c = (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(e.energy(&[1.0, 2.0]), 2.5 + c, epsilon = 1e-12);
        let mut g = [0.0; 2];
        e.energy_and_gradient(&[1.0, 2.0], &mut g);
        assert_eq!(g, [1.0, 2.0]);
        assert_relative_eq!(e.laplacian(&[1.0, 2.0]), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let c = PointSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(GaussianMixtureEnergy::new(c.clone(), vec![0.5, 0.6], 1.0).is_err());
        assert!(GaussianMixtureEnergy::new(c.clone(), vec![1.0, 0.0], 1.0).is_err());
        assert!(GaussianMixtureEnergy::new(c, vec![0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn sampling_matches_moments() {
        let e = presets::eight_gaussians_energy(0.25);
        let s = e.sample(20_000, NoiseStream::new(3, Purpose::Generator));
        let m = s.mean();
        assert!(m[0].abs() < 0.1 && m[1].abs() < 0.1);
        // Per-axis variance: 16/2 from the ring plus σ².
        for v in s.axis_variance() {
            assert!((v - 8.25).abs() < 0.25, "{v}");
        }
    }

    proptest! {
        #[test]
        fn gradient_and_laplacian_match_finite_differences(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            prop_assume!(x * x + y * y <= 100.0);
            let e = presets::eight_gaussians_energy(0.5);
            let p = [x, y];
            let mut g = [0.0; 2];
            e.energy_and_gradient(&p, &mut g);
            let fd = fd_gradient(&e, &p, GRADIENT_CHECK_STEP);
            for k in 0..2 {
                prop_assert!((g[k] - fd[k]).abs() <= 1e-4 * g[k].abs().max(1.0));
            }
            let tr = fd_energy_laplacian(&e, &p, SECOND_ORDER_STEP);
            let lap = e.laplacian(&p);
            prop_assert!((lap - tr).abs() <= 1e-3 * lap.abs().max(1.0));
        }
    }
}
