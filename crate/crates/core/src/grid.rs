//! Tensor-product quadrature grids (d <= 3) and densities sampled on them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyField;
use crate::error::{Error, Result};
use crate::points::PointSet;
use crate::rng::NoiseStream;

/// Kernel support is cut at this many bandwidths.
const KERNEL_CUTOFF: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("box bounds must be nonempty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::invalid(format!("degenerate box {lo:?} .. {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// The cube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Self { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }
}

/// Regular grid with `resolution` nodes per axis, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bounds: BoxBounds,
    pub resolution: usize,
}

impl Grid {
    pub fn new(bounds: BoxBounds, resolution: usize) -> Result<Self> {
        if bounds.dim() > 3 {
            return Err(Error::invalid(format!(
                "grid quadrature supports d <= 3, got d = {}",
                bounds.dim()
            )));
        }
        if resolution < 2 {
            return Err(Error::invalid("grid needs at least 2 nodes per axis"));
        }
        Ok(Self { bounds, resolution })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.bounds.hi[axis] - self.bounds.lo[axis]) / (self.resolution - 1) as f64
    }

    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.bounds.lo[axis] + i as f64 * self.spacing(axis)
    }

    /// Per-axis indices of a flat node index; axis 0 varies slowest.
    #[inline]
    pub fn unflatten(&self, mut flat: usize, idx: &mut [usize]) {
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.resolution;
            flat /= self.resolution;
        }
    }

    pub fn node(&self, flat: usize, x: &mut [f64]) {
        let mut idx = [0usize; 3];
        self.unflatten(flat, &mut idx[..self.dim()]);
        for k in 0..self.dim() {
            x[k] = self.coord(k, idx[k]);
        }
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        let mut idx = [0usize; 3];
        self.unflatten(flat, &mut idx[..self.dim()]);
        idx[..self.dim()].iter().any(|&i| i == 0 || i + 1 == self.resolution)
    }

    /// Trapezoid weight of a node.
    pub fn weight(&self, flat: usize) -> f64 {
        let mut idx = [0usize; 3];
        self.unflatten(flat, &mut idx[..self.dim()]);
        (0..self.dim())
            .map(|k| {
                let h = self.spacing(k);
                if idx[k] == 0 || idx[k] + 1 == self.resolution {
                    0.5 * h
                } else {
                    h
                }
            })
            .product()
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        values.iter().enumerate().map(|(i, v)| v * self.weight(i)).sum()
    }

    /// All nodes as a point set, in node order.
    pub fn nodes(&self) -> PointSet {
        let d = self.dim();
        let mut data = vec![0.0; self.len() * d];
        for (i, row) in data.chunks_exact_mut(d).enumerate() {
            self.node(i, row);
        }
        PointSet::new(d, data).expect("well-formed by construction")
    }

    /// Evaluates `f` at every node, in node order.
    pub fn map_nodes<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let d = self.dim();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut x = [0.0; 3];
                self.node(i, &mut x[..d]);
                f(&x[..d])
            })
            .collect()
    }

    /// Multilinear interpolation of node values; points outside are clamped.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for k in 0..d {
            let s = ((x[k] - self.bounds.lo[k]) / self.spacing(k)).clamp(0.0, (self.resolution - 1) as f64);
            let i = (s.floor() as usize).min(self.resolution - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut flat = 0;
            let mut w = 1.0;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                flat = flat * self.resolution + base[k] + bit;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                acc += w * values[flat];
            }
        }
        acc
    }
}

/// Nonnegative node values of a density on a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl DensityGrid {
    pub fn integral(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn normalize(&mut self) -> Result<()> {
        let z = self.integral();
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::invalid(format!("cannot normalize density with mass {z}")));
        }
        self.values.iter_mut().for_each(|v| *v /= z);
        self.normalized = true;
        Ok(())
    }

    /// Largest boundary value relative to the largest value overall.
    pub fn boundary_ratio(&self) -> f64 {
        let peak = self.values.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return 0.0;
        }
        let edge = (0..self.values.len())
            .filter(|&i| self.grid.is_boundary(i))
            .map(|i| self.values[i])
            .fold(0.0, f64::max);
        edge / peak
    }

    /// Fraction of the total mass on nodes within `band · (hi - lo)` of the
    /// box boundary along any axis.
    pub fn edge_mass(&self, band: f64) -> f64 {
        let total = self.integral();
        if !(total > 0.0) {
            return 0.0;
        }
        let d = self.grid.dim();
        let b = &self.grid.bounds;
        let mut x = vec![0.0; d];
        let mut edge = 0.0;
        for i in 0..self.values.len() {
            self.grid.node(i, &mut x);
            let near = (0..d).any(|k| {
                let w = band * (b.hi[k] - b.lo[k]);
                x[k] - b.lo[k] < w || b.hi[k] - x[k] < w
            });
            if near {
                edge += self.values[i] * self.grid.weight(i);
            }
        }
        edge / total
    }

    /// Draws `n` points: a node by its trapezoid mass, then uniform jitter
    /// within the node's cell (clamped to the box).
    pub fn sample(&self, n: usize, stream: NoiseStream) -> PointSet {
        let d = self.grid.dim();
        let mut cdf = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            acc += v * self.grid.weight(i);
            cdf.push(acc);
        }
        let total = acc;
        let mut data = vec![0.0; n * d];
        data.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            let mut rng = stream.rng(i as u64, 0);
            let u: f64 = rng.random::<f64>() * total;
            let node = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            self.grid.node(node, out);
            for (k, o) in out.iter_mut().enumerate() {
                let h = self.grid.spacing(k);
                let j: f64 = rng.random::<f64>() - 0.5;
                *o = (*o + j * h).clamp(self.grid.bounds.lo[k], self.grid.bounds.hi[k]);
            }
        });
        PointSet::new(d, data).expect("well-formed by construction")
    }
}

/// Normalized Gibbs density `exp(-U)/Z` on a grid.
#[derive(Debug, Clone)]
pub struct GibbsGrid {
    pub density: DensityGrid,
    pub log_z: f64,
    pub boundary_ratio: f64,
}

pub fn gibbs_grid(field: &dyn EnergyField, grid: &Grid) -> Result<GibbsGrid> {
    if field.dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: grid.dim() });
    }
    let energies = grid.map_nodes(|x| field.energy(x));
    if let Some(i) = energies.iter().position(|u| !u.is_finite()) {
        let mut x = vec![0.0; grid.dim()];
        grid.node(i, &mut x);
        return Err(Error::NonFinite { what: "energy", point: x });
    }
    let min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut values: Vec<f64> = energies.iter().map(|u| (min - u).exp()).collect();
    let z = grid.integrate(&values);
    values.iter_mut().for_each(|v| *v /= z);
    let density = DensityGrid { grid: grid.clone(), values, normalized: true };
    let boundary_ratio = density.boundary_ratio();
    Ok(GibbsGrid { density, log_z: z.ln() - min, boundary_ratio })
}

/// Per-axis 1-D Gaussian kernel factors over the nodes within the cutoff.
struct AxisKernel {
    start: usize,
    values: Vec<f64>,
    derivs: Vec<f64>,
}

fn axis_kernel(grid: &Grid, axis: usize, center: f64, h: f64, with_deriv: bool) -> AxisKernel {
    let step = grid.spacing(axis);
    let lo = grid.bounds.lo[axis];
    let last = (grid.resolution - 1) as f64;
    let a = ((center - KERNEL_CUTOFF * h - lo) / step).ceil().clamp(0.0, last + 1.0) as usize;
    let b = ((center + KERNEL_CUTOFF * h - lo) / step).floor().clamp(-1.0, last) as isize;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h);
    let mut values = Vec::new();
    let mut derivs = Vec::new();
    if b >= a as isize {
        for i in a..=(b as usize) {
            let t = grid.coord(axis, i) - center;
            let k = norm * (-0.5 * t * t / (h * h)).exp();
            values.push(k);
            if with_deriv {
                derivs.push(-t / (h * h) * k);
            }
        }
    }
    AxisKernel { start: a, values, derivs }
}

/// Gaussian KDE of `points` evaluated on every grid node, optionally with its
/// spatial gradient (one extra node array per axis).
pub(crate) fn kde_on_grid(
    points: &PointSet,
    h: f64,
    grid: &Grid,
    with_gradient: bool,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = grid.dim();
    if points.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: points.dim() });
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
    }
    let n = grid.len();
    let res = grid.resolution;
    // Fixed-size chunks reduced in order keep the sum order independent of threads.
    let chunk = 4096;
    let partials: Vec<(Vec<f64>, Vec<Vec<f64>>)> = points
        .as_slice()
        .par_chunks(chunk * d)
        .map(|block| {
            let mut dens = vec![0.0; n];
            let mut grads = if with_gradient { vec![vec![0.0; n]; d] } else { Vec::new() };
            for p in block.chunks_exact(d) {
                let ks: Vec<AxisKernel> =
                    (0..d).map(|k| axis_kernel(grid, k, p[k], h, with_gradient)).collect();
                if ks.iter().any(|k| k.values.is_empty()) {
                    continue;
                }
                accumulate(&ks, res, d, &mut dens, &mut grads, with_gradient);
            }
            (dens, grads)
        })
        .collect();
    let mut dens = vec![0.0; n];
    let mut grads = if with_gradient { vec![vec![0.0; n]; d] } else { Vec::new() };
    for (pd, pg) in partials {
        dens.iter_mut().zip(&pd).for_each(|(a, b)| *a += b);
        for (ga, gb) in grads.iter_mut().zip(&pg) {
            ga.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / points.len().max(1) as f64;
    dens.iter_mut().for_each(|v| *v *= inv);
    grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= inv));
    Ok((dens, grads))
}

fn accumulate(
    ks: &[AxisKernel],
    res: usize,
    d: usize,
    dens: &mut [f64],
    grads: &mut [Vec<f64>],
    with_gradient: bool,
) {
    match d {
        1 => {
            for (a, &v) in ks[0].values.iter().enumerate() {
                let f = ks[0].start + a;
                dens[f] += v;
                if with_gradient {
                    grads[0][f] += ks[0].derivs[a];
                }
            }
        }
        2 => {
            for (a, &vx) in ks[0].values.iter().enumerate() {
                let row = (ks[0].start + a) * res + ks[1].start;
                let out = &mut dens[row..row + ks[1].values.len()];
                for (o, &vy) in out.iter_mut().zip(&ks[1].values) {
                    *o += vx * vy;
                }
                if with_gradient {
                    let dx = ks[0].derivs[a];
                    for (b, &vy) in ks[1].values.iter().enumerate() {
                        grads[0][row + b] += dx * vy;
                        grads[1][row + b] += vx * ks[1].derivs[b];
                    }
                }
            }
        }
        _ => {
            for (a, &vx) in ks[0].values.iter().enumerate() {
                for (b, &vy) in ks[1].values.iter().enumerate() {
                    let row = ((ks[0].start + a) * res + ks[1].start + b) * res + ks[2].start;
                    for (c, &vz) in ks[2].values.iter().enumerate() {
                        dens[row + c] += vx * vy * vz;
                        if with_gradient {
                            grads[0][row + c] += ks[0].derivs[a] * vy * vz;
                            grads[1][row + c] += vx * ks[1].derivs[b] * vz;
                            grads[2][row + c] += vx * vy * ks[2].derivs[c];
                        }
                    }
                }
            }
        }
    }
}

/// KDE of a point set as a grid density (not renormalized).
pub fn kde_grid(points: &PointSet, h: f64, grid: &Grid) -> Result<DensityGrid> {
    let (values, _) = kde_on_grid(points, h, grid, false)?;
    Ok(DensityGrid { grid: grid.clone(), values, normalized: false })
}

/// `∫ |a - b|` by trapezoid quadrature; both grids must coincide.
pub fn l1_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::invalid("L1 distance needs densities on the same grid"));
    }
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect();
    Ok(a.grid.integrate(&diff))
}

/// Smooths grid node values with a Gaussian of bandwidth `h` (separable,
/// discrete convolution renormalized per node so mass is kept away from the
/// boundary).
pub fn smooth(density: &DensityGrid, h: f64) -> DensityGrid {
    let grid = &density.grid;
    let d = grid.dim();
    let res = grid.resolution;
    let mut values = density.values.clone();
    for axis in 0..d {
        let step = grid.spacing(axis);
        let reach = ((KERNEL_CUTOFF * h) / step).ceil() as isize;
        let taps: Vec<f64> = (-reach..=reach)
            .map(|j| {
                let t = j as f64 * step;
                (-0.5 * t * t / (h * h)).exp()
            })
            .collect();
        let tap_sum: f64 = taps.iter().sum();
        let stride = res.pow((d - 1 - axis) as u32);
        let mut out = vec![0.0; values.len()];
        for (flat, o) in out.iter_mut().enumerate() {
            let i = ((flat / stride) % res) as isize;
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let j = i + t as isize - reach;
                if j >= 0 && j < res as isize {
                    let src = (flat as isize + (j - i) * stride as isize) as usize;
                    acc += w * values[src];
                }
            }
            *o = acc / tap_sum;
        }
        values = out;
    }
    DensityGrid { grid: grid.clone(), values, normalized: false }
}
