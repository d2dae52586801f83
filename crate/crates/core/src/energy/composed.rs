use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::EnergyField;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMode {
    /// `U = Σ αᵢ Uᵢ`
    Additive,
    /// `U = -log Σ exp(-αᵢ Uᵢ)`
    LogSumExp,
}

#[derive(Clone)]
pub struct Term {
    pub coefficient: f64,
    pub field: Arc<dyn EnergyField>,
}

/// A composition of existing fields. The operands are shared, never copied
/// or modified.
#[derive(Clone)]
pub struct ComposedEnergy {
    terms: Vec<Term>,
    mode: CompositionMode,
    dim: usize,
}

impl std::fmt::Debug for ComposedEnergy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ComposedEnergy")
            .field("mode", &self.mode)
            .field("coefficients", &self.coefficients())
            .field("dim", &self.dim)
            .finish()
    }
}

impl ComposedEnergy {
    pub fn new(terms: Vec<Term>, mode: CompositionMode) -> Result<Self> {
        let dim = terms.first().map(|t| t.field.dim()).ok_or_else(|| Error::invalid("composition needs at least one term"))?;
        for t in &terms {
            if t.field.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: t.field.dim() });
            }
            if !t.coefficient.is_finite() {
                return Err(Error::invalid("composition coefficients must be finite"));
            }
        }
        Ok(Self { terms, mode, dim })
    }

    pub fn additive(terms: Vec<(f64, Arc<dyn EnergyField>)>) -> Result<Self> {
        Self::new(
            terms.into_iter().map(|(coefficient, field)| Term { coefficient, field }).collect(),
            CompositionMode::Additive,
        )
    }

    pub fn mode(&self) -> CompositionMode {
        self.mode
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.coefficient).collect()
    }

    /// Softmax weights of `-αᵢUᵢ(x)` (log-sum-exp mode).
    fn lse_weights(&self, scaled: &[f64]) -> (Vec<f64>, f64) {
        let m = scaled.iter().map(|f| -f).fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = scaled.iter().map(|f| (-f - m).exp()).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
        (r, m + s.ln())
    }
}

impl EnergyField for ComposedEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[f64]) -> f64 {
        match self.mode {
            CompositionMode::Additive => self.terms.iter().map(|t| t.coefficient * t.field.energy(x)).sum(),
            CompositionMode::LogSumExp => {
                let scaled: Vec<f64> = self.terms.iter().map(|t| t.coefficient * t.field.energy(x)).collect();
                -self.lse_weights(&scaled).1
            }
        }
    }

    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut g = vec![0.0; self.dim];
        match self.mode {
            CompositionMode::Additive => {
                grad.iter_mut().for_each(|v| *v = 0.0);
                let mut u = 0.0;
                for t in &self.terms {
                    u += t.coefficient * t.field.energy_and_gradient(x, &mut g);
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += t.coefficient * b;
                    }
                }
                u
            }
            CompositionMode::LogSumExp => {
                let mut grads = Vec::with_capacity(self.terms.len());
                let mut scaled = Vec::with_capacity(self.terms.len());
                for t in &self.terms {
                    scaled.push(t.coefficient * t.field.energy_and_gradient(x, &mut g));
                    grads.push(g.iter().map(|v| t.coefficient * v).collect::<Vec<_>>());
                }
                let (r, lse) = self.lse_weights(&scaled);
                grad.iter_mut().for_each(|v| *v = 0.0);
                for (ri, gi) in r.iter().zip(&grads) {
                    for (a, b) in grad.iter_mut().zip(gi) {
                        *a += ri * b;
                    }
                }
                -lse
            }
        }
    }

    fn laplacian(&self, x: &[f64]) -> f64 {
        match self.mode {
            CompositionMode::Additive => self.terms.iter().map(|t| t.coefficient * t.field.laplacian(x)).sum(),
            CompositionMode::LogSumExp => {
                // ΔU = Σ rᵢ Δfᵢ - Σ rᵢ‖∇fᵢ‖² + ‖Σ rᵢ∇fᵢ‖² with fᵢ = αᵢUᵢ.
                let mut g = vec![0.0; self.dim];
                let mut scaled = Vec::with_capacity(self.terms.len());
                let mut grads = Vec::with_capacity(self.terms.len());
                let mut laps = Vec::with_capacity(self.terms.len());
                for t in &self.terms {
                    scaled.push(t.coefficient * t.field.energy_and_gradient(x, &mut g));
                    grads.push(g.iter().map(|v| t.coefficient * v).collect::<Vec<_>>());
                    laps.push(t.coefficient * t.field.laplacian(x));
                }
                let (r, _) = self.lse_weights(&scaled);
                let mut mean = vec![0.0; self.dim];
                let mut acc = 0.0;
                for ((ri, gi), li) in r.iter().zip(&grads).zip(&laps) {
                    acc += ri * (li - gi.iter().map(|v| v * v).sum::<f64>());
                    for (m, v) in mean.iter_mut().zip(gi) {
                        *m += ri * v;
                    }
                }
                acc + mean.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{fd_energy_laplacian, fd_gradient, QuadraticEnergy, GRADIENT_CHECK_STEP, SECOND_ORDER_STEP};
    use crate::presets;
    use approx::assert_relative_eq;

    #[test]
    fn log_sum_exp_of_two_terms() {
        let a: Arc<dyn EnergyField> = Arc::new(QuadraticEnergy::isotropic(2, 1.0));
        let b: Arc<dyn EnergyField> = Arc::new(presets::eight_gaussians_energy(0.3));
        let c = ComposedEnergy::new(
            vec![Term { coefficient: 1.0, field: a.clone() }, Term { coefficient: 1.0, field: b.clone() }],
            CompositionMode::LogSumExp,
        )
        .unwrap();
        for x in [[0.1, 0.2], [3.0, -1.0], [-4.0, 0.5]] {
            let want = -((-a.energy(&x)).exp() + (-b.energy(&x)).exp()).ln();
            assert_relative_eq!(c.energy(&x), want, max_relative = 1e-12);
            let mut g = [0.0; 2];
            c.energy_and_gradient(&x, &mut g);
            let fd = fd_gradient(&c, &x, GRADIENT_CHECK_STEP);
            for k in 0..2 {
                assert!((g[k] - fd[k]).abs() < 1e-5 * g[k].abs().max(1.0));
            }
            let lap = c.laplacian(&x);
            let fdl = fd_energy_laplacian(&c, &x, SECOND_ORDER_STEP);
            assert!((lap - fdl).abs() < 1e-3 * lap.abs().max(1.0), "{lap} vs {fdl}");
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a: Arc<dyn EnergyField> = Arc::new(QuadraticEnergy::isotropic(2, 1.0));
        let b: Arc<dyn EnergyField> = Arc::new(QuadraticEnergy::isotropic(3, 1.0));
        assert!(matches!(
            ComposedEnergy::additive(vec![(1.0, a), (1.0, b)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
