//! Scalar energy fields `U: R^d -> R` and the pointwise diagnostics built on
//! them.
//!
//! Every field exposes its value, gradient and Laplacian. Analytic fields
//! override the Laplacian with a closed form; the network falls back to the
//! central-difference divergence of its analytic gradient.

mod composed;
mod mixture;
mod net;
mod quadratic;
mod spec;

use std::sync::Arc;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gibbs_grid, BoxBounds, Grid};
use crate::points::{norm2, PointSet};

pub use composed::{ComposedEnergy, CompositionMode, Term};
pub use mixture::GaussianMixtureEnergy;
pub use net::{Activation, ScalarNetEnergy};
pub use quadratic::QuadraticEnergy;
pub use spec::{load_energy, EnergySpec, TermSource, TermSpec};

/// Step for finite-difference gradient checks.
pub const GRADIENT_CHECK_STEP: f64 = 1e-4;
/// Step for finite-difference Laplacians, Hessians and curls.
pub const SECOND_ORDER_STEP: f64 = 1e-3;

/// A scalar potential with first- and second-order access.
///
/// Implementations are immutable once built and must be safe to evaluate
/// from several threads at once.
pub trait EnergyField: Send + Sync {
    fn dim(&self) -> usize;

    fn energy(&self, x: &[f64]) -> f64;

    /// Writes `∇U(x)` into `grad` and returns `U(x)`.
    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        self.energy_and_gradient(x, grad);
    }

    fn laplacian(&self, x: &[f64]) -> f64 {
        fd_laplacian(self, x, SECOND_ORDER_STEP)
    }
}

impl<T: EnergyField + ?Sized> EnergyField for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn energy(&self, x: &[f64]) -> f64 {
        (**self).energy(x)
    }
    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (**self).energy_and_gradient(x, grad)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        (**self).gradient(x, grad)
    }
    fn laplacian(&self, x: &[f64]) -> f64 {
        (**self).laplacian(x)
    }
}

impl<T: EnergyField + ?Sized> EnergyField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn energy(&self, x: &[f64]) -> f64 {
        (**self).energy(x)
    }
    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (**self).energy_and_gradient(x, grad)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        (**self).gradient(x, grad)
    }
    fn laplacian(&self, x: &[f64]) -> f64 {
        (**self).laplacian(x)
    }
}

/// A field shifted by a constant. Gradients and Laplacians are unchanged.
#[derive(Clone)]
pub struct Shifted<E> {
    pub inner: E,
    pub shift: f64,
}

impl<E: EnergyField> EnergyField for Shifted<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn energy(&self, x: &[f64]) -> f64 {
        self.inner.energy(x) + self.shift
    }
    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.inner.energy_and_gradient(x, grad) + self.shift
    }
    fn laplacian(&self, x: &[f64]) -> f64 {
        self.inner.laplacian(x)
    }
}

/// `ΔU(x)` as the central-difference divergence of the gradient (2d gradient calls).
pub fn fd_laplacian<E: EnergyField + ?Sized>(field: &E, x: &[f64], step: f64) -> f64 {
    let d = x.len();
    let mut xp = x.to_vec();
    let mut g = vec![0.0; d];
    let mut acc = 0.0;
    for k in 0..d {
        xp[k] = x[k] + step;
        field.gradient(&xp, &mut g);
        let plus = g[k];
        xp[k] = x[k] - step;
        field.gradient(&xp, &mut g);
        acc += (plus - g[k]) / (2.0 * step);
        xp[k] = x[k];
    }
    acc
}

/// Symmetrized central-difference Hessian of the analytic gradient, row-major.
pub fn fd_hessian<E: EnergyField + ?Sized>(field: &E, x: &[f64], step: f64) -> Vec<f64> {
    let d = x.len();
    let mut h = vec![0.0; d * d];
    let mut xp = x.to_vec();
    let mut gp = vec![0.0; d];
    let mut gm = vec![0.0; d];
    for j in 0..d {
        xp[j] = x[j] + step;
        field.gradient(&xp, &mut gp);
        xp[j] = x[j] - step;
        field.gradient(&xp, &mut gm);
        xp[j] = x[j];
        for i in 0..d {
            h[i * d + j] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = s;
            h[j * d + i] = s;
        }
    }
    h
}

/// Trace of the second-difference Hessian of `energy` alone.
pub fn fd_energy_laplacian<E: EnergyField + ?Sized>(field: &E, x: &[f64], step: f64) -> f64 {
    let u0 = field.energy(x);
    let mut xp = x.to_vec();
    let mut acc = 0.0;
    for k in 0..x.len() {
        xp[k] = x[k] + step;
        let up = field.energy(&xp);
        xp[k] = x[k] - step;
        let um = field.energy(&xp);
        xp[k] = x[k];
        acc += (up - 2.0 * u0 + um) / (step * step);
    }
    acc
}

/// Central-difference gradient of `energy`, for checking analytic gradients.
pub fn fd_gradient<E: EnergyField + ?Sized>(field: &E, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            xp[k] = x[k] + step;
            let up = field.energy(&xp);
            xp[k] = x[k] - step;
            let um = field.energy(&xp);
            xp[k] = x[k];
            (up - um) / (2.0 * step)
        })
        .collect()
}

fn check_dim(field: &dyn EnergyField, x: &[f64]) -> Result<()> {
    if x.len() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: x.len() });
    }
    Ok(())
}

/// The stationarity residual `h(x) = ΔU(x) - ‖∇U(x)‖²` of the deterministic
/// flow at the Gibbs density: `∇·(ρ∇U) = ρ h`.
pub fn residual_h(field: &dyn EnergyField, x: &[f64]) -> Result<f64> {
    check_dim(field, x)?;
    let mut g = vec![0.0; x.len()];
    let u = field.energy_and_gradient(x, &mut g);
    if !u.is_finite() {
        return Err(Error::NonFinite { what: "energy", point: x.to_vec() });
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", point: x.to_vec() });
    }
    let lap = field.laplacian(x);
    if !lap.is_finite() {
        return Err(Error::NonFinite { what: "laplacian", point: x.to_vec() });
    }
    Ok(lap - norm2(&g))
}

/// Smallest Hessian eigenvalue over a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianBound {
    pub value: f64,
    pub argmin: Vec<f64>,
    /// True when `value > 0`, i.e. the Bakry-Emery criterion certifies a
    /// log-Sobolev constant on the probed region.
    pub certified: bool,
}

impl HessianBound {
    /// The certified constant, or the error carrying the nonpositive estimate.
    pub fn lsi_constant(&self) -> Result<f64> {
        if self.certified {
            Ok(self.value)
        } else {
            Err(Error::NoLsiCertificate(self.value))
        }
    }
}

pub fn min_hessian_eigenvalue(field: &dyn EnergyField, sample_points: &PointSet) -> Result<HessianBound> {
    if sample_points.is_empty() {
        return Err(Error::invalid("min_hessian_eigenvalue needs at least one point"));
    }
    let d = field.dim();
    if sample_points.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: sample_points.dim() });
    }
    let mut best = HessianBound { value: f64::INFINITY, argmin: Vec::new(), certified: false };
    for x in sample_points.rows() {
        let h = fd_hessian(field, x, SECOND_ORDER_STEP);
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "hessian", point: x.to_vec() });
        }
        let eig = DMatrix::from_row_slice(d, d, &h).symmetric_eigenvalues();
        let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if lo < best.value {
            best.value = lo;
            best.argmin = x.to_vec();
        }
    }
    best.certified = best.value > 0.0;
    Ok(best)
}

/// Curl magnitude of an arbitrary vector field by central differences.
///
/// In d = 2 this is `|∂₁F₂ - ∂₂F₁|`; in higher dimension, the Frobenius norm
/// of the antisymmetric part of the Jacobian times √2 (which reduces to the
/// same value in the plane).
pub fn curl_of<F>(field: F, x: &[f64], step: f64) -> f64
where
    F: Fn(&[f64], &mut [f64]),
{
    let d = x.len();
    let mut jac = vec![0.0; d * d];
    let mut xp = x.to_vec();
    let mut f = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    // Five-point central stencil: the second-order stencil's truncation error
    // is not symmetric in (i, j) and would show up as spurious curl.
    for j in 0..d {
        for (k, off) in [2.0, 1.0, -1.0, -2.0].iter().enumerate() {
            xp[j] = x[j] + off * step;
            field(&xp, &mut f[k]);
        }
        xp[j] = x[j];
        for i in 0..d {
            jac[i * d + j] = (-f[0][i] + 8.0 * f[1][i] - 8.0 * f[2][i] + f[3][i]) / (12.0 * step);
        }
    }
    let mut acc = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            let a = jac[i * d + j] - jac[j * d + i];
            acc += a * a;
        }
    }
    acc.sqrt()
}

/// Curl of the drift `F = -∇U`; zero up to discretization for any scalar field.
pub fn curl_residual(field: &dyn EnergyField, x: &[f64]) -> Result<f64> {
    check_dim(field, x)?;
    if x.len() < 2 {
        return Err(Error::invalid("curl needs d >= 2"));
    }
    let c = curl_of(
        |p, out| {
            field.gradient(p, out);
            out.iter_mut().for_each(|v| *v = -*v);
        },
        x,
        SECOND_ORDER_STEP,
    );
    if !c.is_finite() {
        return Err(Error::NonFinite { what: "curl", point: x.to_vec() });
    }
    Ok(c)
}

/// `log ∫ exp(-U)` over a box, with the boundary diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogPartition {
    pub value: f64,
    /// Largest boundary density relative to the peak.
    pub boundary_ratio: f64,
}

/// Largest tolerated boundary-to-peak density ratio.
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

impl LogPartition {
    pub fn boundary_ok(&self) -> bool {
        self.boundary_ratio < BOUNDARY_TOLERANCE
    }
}

pub fn log_partition(field: &dyn EnergyField, bounds: &BoxBounds, resolution: usize) -> Result<LogPartition> {
    if bounds.dim() > 3 {
        return Err(Error::invalid("log_partition supports d <= 3"));
    }
    if resolution < 8 {
        return Err(Error::invalid(format!("resolution {resolution} < 8 per axis")));
    }
    let grid = Grid::new(bounds.clone(), resolution)?;
    let g = gibbs_grid(field, &grid)?;
    let lp = LogPartition { value: g.log_z, boundary_ratio: g.boundary_ratio };
    if !lp.boundary_ok() {
        warn!(
            "log_partition: boundary density is {:.3e} of the peak; box may be too small",
            lp.boundary_ratio
        );
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_relative_eq;

    fn quad() -> QuadraticEnergy {
        QuadraticEnergy::isotropic(2, 1.0)
    }

    #[test]
    fn residual_on_quadratic() {
        assert_relative_eq!(residual_h(&quad(), &[0.0, 0.0]).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(residual_h(&quad(), &[2.0, 0.0]).unwrap(), -2.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_sign_change_on_eight_gaussians() {
        let e = presets::eight_gaussians_energy(0.25);
        for c in e.centers().rows() {
            assert!(residual_h(&e, c).unwrap() > 0.0);
        }
        for k in 0..16 {
            let a = k as f64 * std::f64::consts::PI / 8.0;
            assert!(residual_h(&e, &[20.0 * a.cos(), 20.0 * a.sin()]).unwrap() < 0.0);
        }
    }

    #[test]
    fn residual_reports_nonfinite_point() {
        struct Bad;
        impl EnergyField for Bad {
            fn dim(&self) -> usize {
                1
            }
            fn energy(&self, _: &[f64]) -> f64 {
                f64::NAN
            }
            fn energy_and_gradient(&self, _: &[f64], g: &mut [f64]) -> f64 {
                g[0] = 0.0;
                f64::NAN
            }
        }
        match residual_h(&Bad, &[1.5]) {
            Err(Error::NonFinite { point, .. }) => assert_eq!(point, vec![1.5]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hessian_bounds() {
        let pts = PointSet::from_rows(&[vec![0.0, 0.0], vec![1.0, -2.0], vec![3.0, 3.0]]).unwrap();
        let b = min_hessian_eigenvalue(&quad(), &pts).unwrap();
        assert_relative_eq!(b.value, 1.0, epsilon = 1e-6);
        assert!(b.certified);
        let aniso = QuadraticEnergy::new(vec![1.0, 4.0]).unwrap();
        assert_relative_eq!(min_hessian_eigenvalue(&aniso, &pts).unwrap().value, 1.0, epsilon = 1e-6);

        let e = presets::eight_gaussians_energy(0.25);
        // Midpoint between two neighbouring modes is a saddle.
        let c0 = e.centers().row(0).to_vec();
        let c1 = e.centers().row(1).to_vec();
        let mid = PointSet::from_rows(&[vec![(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0]]).unwrap();
        let b = min_hessian_eigenvalue(&e, &mid).unwrap();
        assert!(b.value < 0.0 && !b.certified);
        assert!(matches!(b.lsi_constant(), Err(Error::NoLsiCertificate(_))));
    }

    #[test]
    fn curl_of_rotation_field() {
        let c = curl_of(
            |p, out| {
                out[0] = -p[1];
                out[1] = p[0];
            },
            &[0.7, -1.3],
            SECOND_ORDER_STEP,
        );
        assert_relative_eq!(c, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn gradient_fields_are_curl_free() {
        let e = presets::eight_gaussians_energy(0.25);
        for x in [[0.3, 0.2], [4.0, 0.1], [-2.5, 3.3], [7.0, -6.0]] {
            let c = curl_residual(&e, &x).unwrap();
            assert!(c <= 1e-6, "{c} at {x:?}");
        }
    }

    #[test]
    fn log_partition_values() {
        let b = BoxBounds::cube(2, -8.0, 8.0);
        let lz = log_partition(&quad(), &b, 256).unwrap();
        assert!((lz.value - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-4);
        assert!(lz.boundary_ok());

        let zero = QuadraticEnergy::new(vec![0.0, 0.0]).unwrap();
        let b2 = BoxBounds::new(vec![-1.0, 0.0], vec![2.0, 5.0]).unwrap();
        assert_relative_eq!(log_partition(&zero, &b2, 16).unwrap().value, 15f64.ln(), epsilon = 1e-12);

        assert!(log_partition(&quad(), &b, 7).is_err());
    }

    #[test]
    fn log_partition_shift() {
        let b = BoxBounds::cube(2, -8.0, 8.0);
        let e = presets::eight_gaussians_energy(0.25);
        let base = log_partition(&e, &b, 128).unwrap().value;
        let shifted = Shifted { inner: &e, shift: 3.7 };
        let moved = log_partition(&shifted, &b, 128).unwrap().value;
        assert_relative_eq!(moved, base - 3.7, epsilon = 1e-10);
    }
}
