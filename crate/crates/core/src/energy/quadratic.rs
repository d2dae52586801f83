use super::EnergyField;
use crate::error::{Error, Result};

/// `U(x) = ½ Σ aₖ xₖ²` with a diagonal precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticEnergy {
    precision: Vec<f64>,
}

impl QuadraticEnergy {
    pub fn new(precision: Vec<f64>) -> Result<Self> {
        if precision.is_empty() || precision.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("quadratic precision must be nonempty and finite"));
        }
        Ok(Self { precision })
    }

    pub fn isotropic(dim: usize, a: f64) -> Self {
        Self { precision: vec![a; dim] }
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }
}

impl EnergyField for QuadraticEnergy {
    fn dim(&self) -> usize {
        self.precision.len()
    }

    fn energy(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().zip(&self.precision).map(|(v, a)| a * v * v).sum::<f64>()
    }

    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for ((g, v), a) in grad.iter_mut().zip(x).zip(&self.precision) {
            *g = a * v;
        }
        self.energy(x)
    }

    fn laplacian(&self, _x: &[f64]) -> f64 {
        self.precision.iter().sum()
    }
}
