use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major N x d matrix of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("point dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Format(format!(
                "{} coordinates do not form rows of length {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("no rows"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased per-axis sample variance.
    pub fn axis_variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for r in self.rows() {
            for k in 0..self.dim {
                let d = r[k] - m[k];
                v[k] += d * d;
            }
        }
        let n = (self.len().max(2) - 1) as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// Unbiased sample covariance, row-major d x d.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for r in self.rows() {
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] += (r[i] - m[i]) * (r[j] - m[j]);
                }
            }
        }
        let n = (self.len().max(2) - 1) as f64;
        c.iter_mut().for_each(|x| *x /= n);
        c
    }

    /// Per-axis (min, max).
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for r in self.rows() {
            for (bk, &x) in b.iter_mut().zip(r) {
                bk.0 = bk.0.min(x);
                bk.1 = bk.1.max(x);
            }
        }
        b
    }
}

/// Weighted-equal particle approximation of a density at time `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub points: PointSet,
    pub time: f64,
    pub provenance: String,
}

impl ParticleEnsemble {
    pub fn new(points: PointSet, provenance: impl Into<String>) -> Self {
        Self { points, time: 0.0, provenance: provenance.into() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}
