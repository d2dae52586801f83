//! Compositions of trained energies and the checks that go with them.
//!
//! Additive compositions `Σ αᵢUᵢ` stay gradient fields, so Langevin sampling
//! of the composite targets `e^{-U_comp}/Z` with no retraining.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::energy::{ComposedEnergy, CompositionMode, EnergyField, Term};
use crate::error::{Error, Result};
use crate::grid::{kde_grid, l1_distance, smooth, BoxBounds, Grid};
use crate::lyapunov::{BandwidthRule, GibbsReference};
use crate::points::{dist2, PointSet};
use crate::sampler::{gaussian_prior, simulate, SamplerConfig, SamplerKind};

/// Default weight of the negated operand.
pub const DEFAULT_NEGATION_LAMBDA: f64 = 0.35;
/// Largest Gibbs mass fraction the integrability guard accepts in the edge band.
pub const CONFINEMENT_TOLERANCE: f64 = 1e-3;
/// Width of the edge band as a fraction of the box width per side.
pub const EDGE_BAND: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompositionOp {
    /// `Σ Uᵢ`.
    Conjunction,
    /// `-log(e^{-U_A} + e^{-U_B})`.
    Disjunction,
    /// `U_B - λ U_A` for operands `[A, B]`.
    Negation {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Additive { coefficients: Vec<f64> },
}

fn default_lambda() -> f64 {
    DEFAULT_NEGATION_LAMBDA
}

#[derive(Clone)]
pub struct Operand {
    pub name: String,
    pub field: Arc<dyn EnergyField>,
}

impl Operand {
    pub fn new(name: impl Into<String>, field: Arc<dyn EnergyField>) -> Self {
        Self { name: name.into(), field }
    }
}

#[derive(Clone)]
pub struct CompositionSpec {
    pub operands: Vec<Operand>,
    pub op: CompositionOp,
}

/// Builds the composed field; operands are shared, never modified.
pub fn build_composition(spec: &CompositionSpec) -> Result<ComposedEnergy> {
    let ops = &spec.operands;
    if ops.is_empty() {
        return Err(Error::invalid("composition needs at least one operand"));
    }
    let terms = |coeffs: Vec<f64>| -> Vec<Term> {
        coeffs.into_iter().zip(ops).map(|(coefficient, o)| Term { coefficient, field: o.field.clone() }).collect()
    };
    let exactly_two = |what: &str| -> Result<()> {
        if ops.len() != 2 {
            return Err(Error::invalid(format!("{what} takes exactly two operands, got {}", ops.len())));
        }
        Ok(())
    };
    match &spec.op {
        CompositionOp::Conjunction => ComposedEnergy::new(terms(vec![1.0; ops.len()]), CompositionMode::Additive),
        CompositionOp::Disjunction => {
            exactly_two("disjunction")?;
            ComposedEnergy::new(terms(vec![1.0, 1.0]), CompositionMode::LogSumExp)
        }
        CompositionOp::Negation { lambda } => {
            exactly_two("negation")?;
            ComposedEnergy::new(terms(vec![-lambda, 1.0]), CompositionMode::Additive)
        }
        CompositionOp::Additive { coefficients } => {
            if coefficients.len() != ops.len() {
                return Err(Error::invalid(format!(
                    "{} coefficients for {} operands",
                    coefficients.len(),
                    ops.len()
                )));
            }
            ComposedEnergy::new(terms(coefficients.clone()), CompositionMode::Additive)
        }
    }
}

/// Refuses fields whose Gibbs density is not concentrated away from the box
/// boundary (negative coefficients can destroy confinement).
pub fn integrability_guard(field: &dyn EnergyField, grid: &Grid) -> Result<GibbsReference> {
    let gibbs = GibbsReference::new(field, grid)?;
    let edge = gibbs.density().edge_mass(EDGE_BAND);
    if !(edge < CONFINEMENT_TOLERANCE) {
        return Err(Error::NotConfining(format!(
            "{edge:.3e} of the Gibbs mass lies in the outer band of the box (tolerance {CONFINEMENT_TOLERANCE:.0e})"
        )));
    }
    Ok(gibbs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsCheckOptions {
    pub step_size: f64,
    /// Variance of the broad Gaussian the chains start from.
    pub prior_variance: f64,
    pub bounds: BoxBounds,
    pub resolution: usize,
    pub bandwidth: BandwidthRule,
}

impl GibbsCheckOptions {
    pub fn new(bounds: BoxBounds) -> Self {
        Self { step_size: 0.01, prior_variance: 4.0, bounds, resolution: 128, bandwidth: BandwidthRule::Scott }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsCheck {
    pub l1: f64,
    pub bandwidth: f64,
    pub particles: usize,
    pub steps: usize,
    pub boundary_ratio: f64,
}

/// Runs Langevin for `steps` steps from a broad Gaussian and returns the grid
/// L¹ distance between the final ensemble's KDE and the normalized Gibbs
/// density. The Gibbs density is smoothed with the same kernel before the
/// comparison, so the kernel's widening does not count as a discrepancy.
pub fn gibbs_invariance_check(
    field: &dyn EnergyField,
    n: usize,
    steps: usize,
    seed: u64,
    opts: &GibbsCheckOptions,
) -> Result<GibbsCheck> {
    if field.dim() > 2 {
        return Err(Error::invalid("gibbs_invariance_check supports d <= 2"));
    }
    let grid = Grid::new(opts.bounds.clone(), opts.resolution)?;
    let gibbs = integrability_guard(field, &grid)?;
    let init = gaussian_prior(n, field.dim(), opts.prior_variance, seed);
    let cfg = SamplerConfig {
        kind: SamplerKind::Langevin,
        step_size: opts.step_size,
        steps,
        snapshot_stride: steps.max(1),
        seed,
        lipschitz: None,
    };
    let log = simulate(&init, field, &cfg)?;
    let pts = &log.last().points;
    let h = opts.bandwidth.bandwidth(pts);
    let mut est = kde_grid(pts, h, &grid)?;
    est.normalize()?;
    let mut reference = smooth(&gibbs.density(), h);
    reference.normalize()?;
    Ok(GibbsCheck { l1: l1_distance(&est, &reference)?, bandwidth: h, particles: n, steps, boundary_ratio: gibbs.boundary_ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub radius: f64,
    pub total: usize,
    pub near_a: usize,
    pub near_b: usize,
    pub near_neither: usize,
}

/// Number of points within `radius` of any center.
pub fn count_near(points: &PointSet, centers: &PointSet, radius: f64) -> usize {
    let r2 = radius * radius;
    points.rows().filter(|x| centers.rows().any(|c| dist2(x, c) <= r2)).count()
}

/// Counts of points near the A centers and near the B centers.
pub fn separation_report(points: &PointSet, centers_a: &PointSet, centers_b: &PointSet, radius: f64) -> Result<SeparationReport> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    let r2 = radius * radius;
    let (mut near_a, mut near_b, mut near_neither) = (0, 0, 0);
    for x in points.rows() {
        let a = centers_a.rows().any(|c| dist2(x, c) <= r2);
        let b = centers_b.rows().any(|c| dist2(x, c) <= r2);
        near_a += a as usize;
        near_b += b as usize;
        near_neither += (!a && !b) as usize;
    }
    Ok(SeparationReport {
        radius,
        total: points.len(),
        near_a,
        near_b,
        near_neither,
    })
}

/// Grid mean of `U - min U`.
fn shifted_mean(field: &dyn EnergyField, grid: &Grid) -> (f64, f64) {
    let u = grid.map_nodes(|x| field.energy(x));
    let min = u.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    (mean - min, mean)
}

/// Difference (B minus A) of the grid-mean energies after shifting each to
/// zero minimum: the normalization mismatch that tilts a disjunction.
pub fn alignment_offset(a: &dyn EnergyField, b: &dyn EnergyField, grid: &Grid) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(shifted_mean(b, grid).0 - shifted_mean(a, grid).0)
}

/// Difference (B minus A) of the raw grid-mean energies.
pub fn raw_mean_offset(a: &dyn EnergyField, b: &dyn EnergyField, grid: &Grid) -> Result<f64> {
    if a.dim() != b.dim() || a.dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(shifted_mean(b, grid).1 - shifted_mean(a, grid).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{GaussianMixtureEnergy, QuadraticEnergy, Shifted};
    use crate::presets::{expert_a_centers, expert_b_centers};
    use approx::assert_relative_eq;

    fn experts() -> (Arc<dyn EnergyField>, Arc<dyn EnergyField>) {
        (
            Arc::new(GaussianMixtureEnergy::equal_weights(expert_a_centers(), 0.25).unwrap()),
            Arc::new(GaussianMixtureEnergy::equal_weights(expert_b_centers(), 0.25).unwrap()),
        )
    }

    fn spec(op: CompositionOp) -> CompositionSpec {
        let (a, b) = experts();
        CompositionSpec { operands: vec![Operand::new("A", a), Operand::new("B", b)], op }
    }

    #[test]
    fn negation_with_zero_lambda_is_b() {
        let c = build_composition(&spec(CompositionOp::Negation { lambda: 0.0 })).unwrap();
        let (_, b) = experts();
        for x in [[0.1, 2.0], [-3.0, 5.0]] {
            assert_eq!(c.energy(&x), b.energy(&x));
        }
        assert_eq!(c.coefficients(), vec![-0.0, 1.0]);
    }

    #[test]
    fn disjunction_of_identical_operands() {
        let q: Arc<dyn EnergyField> = Arc::new(QuadraticEnergy::isotropic(2, 1.0));
        let s = CompositionSpec {
            operands: vec![Operand::new("U", q.clone()), Operand::new("U", q.clone())],
            op: CompositionOp::Disjunction,
        };
        let c = build_composition(&s).unwrap();
        let x = [1.5, -0.5];
        assert_relative_eq!(c.energy(&x), q.energy(&x) - 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn arity_is_enforced() {
        let (a, _) = experts();
        let one = CompositionSpec { operands: vec![Operand::new("A", a)], op: CompositionOp::Disjunction };
        assert!(build_composition(&one).is_err());
        assert!(build_composition(&spec(CompositionOp::Additive { coefficients: vec![1.0] })).is_err());
    }

    #[test]
    fn separation_counts() {
        let a = expert_a_centers();
        let b = expert_b_centers();
        let at_a = PointSet::new(2, [3.0, 3.0].repeat(10)).unwrap();
        let r = separation_report(&at_a, &a, &b, 1.5).unwrap();
        assert_eq!((r.near_a, r.near_b, r.total), (10, 0, 10));
        let r = separation_report(&PointSet::empty(2), &a, &b, 1.5).unwrap();
        assert_eq!((r.near_a, r.near_b, r.near_neither), (0, 0, 0));
        assert!(separation_report(&at_a, &a, &b, 0.0).is_err());
    }

    #[test]
    fn offsets() {
        let g = Grid::new(BoxBounds::cube(2, -6.0, 6.0), 32).unwrap();
        let (a, _) = experts();
        let shifted = Shifted { inner: a.clone(), shift: 2.5 };
        assert_eq!(alignment_offset(&*a, &*a, &g).unwrap(), 0.0);
        assert_relative_eq!(raw_mean_offset(&*a, &shifted, &g).unwrap(), 2.5, epsilon = 1e-10);
        assert!(alignment_offset(&*a, &shifted, &g).unwrap().abs() < 1e-10);
    }

    #[test]
    fn guard_refuses_unconfined_negation() {
        let g = Grid::new(BoxBounds::cube(2, -8.0, 8.0), 64).unwrap();
        let c = build_composition(&spec(CompositionOp::Negation { lambda: 1.5 })).unwrap();
        assert!(matches!(integrability_guard(&c, &g), Err(Error::NotConfining(_))));
        let ok = build_composition(&spec(CompositionOp::Negation { lambda: 0.35 })).unwrap();
        assert!(integrability_guard(&ok, &g).is_ok());
    }
}
