//! The smoothed training target `ρ* = ρ̂_data ∗ K_h` with a Gaussian kernel.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use log::warn;

use crate::energy::{EnergyField, GaussianMixtureEnergy, BOUNDARY_TOLERANCE};
use crate::error::{Error, Result};
use crate::grid::{kde_grid, l1_distance, DensityGrid, Grid};
use crate::points::{ParticleEnsemble, PointSet};
use crate::rng::{NoiseStream, Purpose};

/// A finite, nonempty point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDataset {
    points: PointSet,
}

const BINARY_MAGIC: &[u8; 4] = b"EDTS";

impl EmpiricalDataset {
    pub fn new(points: PointSet) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("dataset needs at least one point"));
        }
        if !points.is_finite() {
            return Err(Error::Format("dataset contains non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &PointSet {
        &self.points
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

    /// One point per row, comma separated, no header.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
        let mut dim = None;
        let mut data = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            match dim {
                None => dim = Some(rec.len()),
                Some(d) if d != rec.len() => {
                    return Err(Error::Format(format!("row {} has {} columns, expected {d}", line + 1, rec.len())))
                }
                _ => {}
            }
            for field in rec.iter() {
                data.push(
                    field.parse::<f64>().map_err(|e| Error::Format(format!("row {}: `{field}`: {e}", line + 1)))?,
                );
            }
        }
        let dim = dim.ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
        Self::new(PointSet::new(dim, data)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_points_csv(&self.points, path)
    }

    /// `"EDTS"`, u32 N, u32 d, four reserved zero bytes, then N·d
    /// little-endian f64 values.
    pub fn load_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != BINARY_MAGIC {
            return Err(Error::Format(format!("{}: missing EDTS header", path.display())));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != n * d * 8 {
            return Err(Error::Format(format!(
                "{}: header declares {n}x{d} values but body has {} bytes",
                path.display(),
                body.len()
            )));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(PointSet::new(d, data)?)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        for v in self.points.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Picks the binary reader when the file starts with the EDTS magic.
    pub fn load(path: &Path) -> Result<Self> {
        let mut head = [0u8; 4];
        let is_binary = File::open(path)?.read_exact(&mut head).is_ok() && &head == BINARY_MAGIC;
        if is_binary {
            Self::load_binary(path)
        } else {
            Self::load_csv(path)
        }
    }
}

pub(crate) fn write_points_csv(points: &PointSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in points.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// `N^{-1/(d+4)}` times the geometric mean of the per-axis standard
/// deviations. Falls back to 1 for degenerate data.
pub fn scott_bandwidth(points: &PointSet) -> f64 {
    let n = points.len() as f64;
    let d = points.dim();
    let var = if points.len() > 1 { points.axis_variance() } else { vec![1.0; d] };
    let log_gm = var.iter().map(|v| if *v > 0.0 { 0.5 * v.ln() } else { 0.0 }).sum::<f64>() / d as f64;
    n.powf(-1.0 / (d as f64 + 4.0)) * log_gm.exp()
}

/// Gaussian KDE of a dataset. As an [`EnergyField`] it is `-log ρ*`, so it can
/// stand in for an exactly trained energy.
#[derive(Debug, Clone)]
pub struct KdeTarget {
    mixture: GaussianMixtureEnergy,
    bandwidth: f64,
}

impl KdeTarget {
    pub fn new(dataset: &EmpiricalDataset, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let mixture = GaussianMixtureEnergy::equal_weights(dataset.points().clone(), bandwidth * bandwidth)?;
        Ok(Self { mixture, bandwidth })
    }

    pub fn with_scott_bandwidth(dataset: &EmpiricalDataset) -> Result<Self> {
        Self::new(dataset, scott_bandwidth(dataset.points()))
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn points(&self) -> &PointSet {
        self.mixture.centers()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        -self.mixture.energy(x)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// `∇ log ρ*(x) = Σ rᵢ (xᵢ - x) / h²`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.mixture.energy_and_gradient(x, &mut g);
        g.iter_mut().for_each(|v| *v = -*v);
        g
    }

    /// Uniformly chosen data point plus `h·z`.
    pub fn sample(&self, n: usize, seed: u64) -> ParticleEnsemble {
        self.sample_with(n, NoiseStream::new(seed, Purpose::KdeSample))
    }

    pub(crate) fn sample_with(&self, n: usize, stream: NoiseStream) -> ParticleEnsemble {
        ParticleEnsemble::new(self.mixture.sample(n, stream), "kde")
    }

    pub fn density_grid(&self, grid: &Grid) -> Result<DensityGrid> {
        kde_grid(self.points(), self.bandwidth, grid)
    }
}

impl EnergyField for KdeTarget {
    fn dim(&self) -> usize {
        EnergyField::dim(&self.mixture)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        self.mixture.energy(x)
    }

    fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.mixture.energy_and_gradient(x, grad)
    }

    fn laplacian(&self, x: &[f64]) -> f64 {
        self.mixture.laplacian(x)
    }
}

pub fn kde_density(target: &KdeTarget, x: &[f64]) -> f64 {
    target.density(x)
}

pub fn kde_score(target: &KdeTarget, x: &[f64]) -> Vec<f64> {
    target.score(x)
}

pub fn sample_kde(target: &KdeTarget, n: usize, seed: u64) -> ParticleEnsemble {
    target.sample(n, seed)
}

/// A distribution with an evaluable density that can also be sampled.
pub trait DensitySampler: Sync {
    fn dim(&self) -> usize;
    fn density(&self, x: &[f64]) -> f64;
    fn sample(&self, n: usize, seed: u64) -> PointSet;
}

impl DensitySampler for GaussianMixtureEnergy {
    fn dim(&self) -> usize {
        EnergyField::dim(self)
    }

    fn density(&self, x: &[f64]) -> f64 {
        GaussianMixtureEnergy::density(self, x)
    }

    fn sample(&self, n: usize, seed: u64) -> PointSet {
        GaussianMixtureEnergy::sample(self, n, NoiseStream::new(seed, Purpose::Generator))
    }
}

/// For each `N`, the grid L¹ distance between the KDE of `N` generator draws
/// (bandwidth `h_rule(N)`) and the generator's density.
pub fn l1_error_trend(
    generator: &dyn DensitySampler,
    ns: &[usize],
    h_rule: impl Fn(usize) -> f64,
    grid: &Grid,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if generator.dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: generator.dim(), got: grid.dim() });
    }
    let truth = DensityGrid { grid: grid.clone(), values: grid.map_nodes(|x| generator.density(x)), normalized: true };
    let ratio = truth.boundary_ratio();
    if ratio >= BOUNDARY_TOLERANCE {
        warn!("true density reaches {ratio:.2e} of its peak on the grid boundary; L1 errors are truncated");
    }
    ns.iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::invalid("sample counts must be positive"));
            }
            let pts = generator.sample(n, seed);
            let est = kde_grid(&pts, h_rule(n), grid)?;
            Ok((n, l1_distance(&est, &truth)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxBounds;
    use approx::assert_relative_eq;

    fn single(d: usize) -> EmpiricalDataset {
        EmpiricalDataset::new(PointSet::new(d, vec![0.0; d]).unwrap()).unwrap()
    }

    #[test]
    fn kernel_peak_and_shoulder() {
        let t = KdeTarget::new(&single(2), 1.0).unwrap();
        let tau = 2.0 * std::f64::consts::PI;
        assert_relative_eq!(t.density(&[0.0, 0.0]), 1.0 / tau, max_relative = 1e-14);
        assert_relative_eq!(t.density(&[1.0, 0.0]), (-0.5f64).exp() / tau, max_relative = 1e-14);
    }

    #[test]
    fn two_point_symmetry() {
        let ds = EmpiricalDataset::new(PointSet::new(1, vec![-1.0, 1.0]).unwrap()).unwrap();
        let t = KdeTarget::new(&ds, 1.0).unwrap();
        for x in [0.3, 1.7, 4.0] {
            assert_relative_eq!(t.density(&[x]), t.density(&[-x]), max_relative = 1e-14);
        }
        assert!(t.score(&[0.0])[0].abs() < 1e-15);
    }

    #[test]
    fn single_point_score_is_minus_x() {
        let t = KdeTarget::new(&single(2), 1.0).unwrap();
        let s = t.score(&[0.7, -2.0]);
        assert_relative_eq!(s[0], -0.7, epsilon = 1e-14);
        assert_relative_eq!(s[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn far_queries_stay_positive() {
        let t = KdeTarget::new(&single(2), 0.1).unwrap();
        assert!(t.log_density(&[50.0, 0.0]).is_finite());
        assert!(t.score(&[50.0, 0.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = EmpiricalDataset::new(PointSet::new(2, vec![0.1, -2.5, 1e-300, 3.0]).unwrap()).unwrap();
        let b = dir.path().join("d.bin");
        ds.save_binary(&b).unwrap();
        assert_eq!(EmpiricalDataset::load(&b).unwrap(), ds);
        let c = dir.path().join("d.csv");
        ds.save_csv(&c).unwrap();
        assert_eq!(EmpiricalDataset::load(&c).unwrap(), ds);
    }

    #[test]
    fn ragged_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(EmpiricalDataset::load_csv(&p).is_err());
    }

    #[test]
    fn scott_rule_for_unit_data() {
        let pts = PointSet::new(1, vec![-1.0, 1.0]).unwrap();
        // unbiased variance of {-1, 1} is 2
        assert_relative_eq!(scott_bandwidth(&pts), 2f64.powf(-0.2) * 2f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn l1_of_single_kernel_is_large() {
        let far = GaussianMixtureEnergy::equal_weights(PointSet::new(1, vec![0.0]).unwrap(), 1e-4).unwrap();
        let g = Grid::new(BoxBounds::cube(1, -1.0, 1.0), 2001).unwrap();
        let trend = l1_error_trend(&far, &[1], |_| 0.5, &g, 3).unwrap();
        // a width-0.01 spike against a width-0.5 kernel: nearly disjoint mass
        assert!(trend[0].1 > 1.5);
    }
}
