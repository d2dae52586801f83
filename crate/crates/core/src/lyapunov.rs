//! Lyapunov functionals along particle trajectories and the stopping rules
//! built on them.
//!
//! `V(ρ) = KL(ρ ‖ e^{-U}/Z)` is estimated by KDE plus grid quadrature; the
//! relative Fisher information by KDE scores at the particles; the ratio
//! `R = E[ΔU]/E[‖∇U‖²]` directly from the particles. Along the deterministic
//! flow `dV/dt = E[ΔU] - E[‖∇U‖²]`, so `R = 1` marks the KL turning point.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{min_hessian_eigenvalue, EnergyField, BOUNDARY_TOLERANCE};
use crate::error::{Error, Result};
use crate::grid::{kde_grid, kde_on_grid, BoxBounds, DensityGrid, Grid};
use crate::points::{ParticleEnsemble, PointSet};
use crate::rng::{NoiseStream, Purpose};
use crate::sampler::{gaussian_prior, simulate, SamplerConfig, SamplerKind, TrajectoryLog};
use crate::target::scott_bandwidth;

/// Grid resolution per axis of the KL estimator.
pub const KL_RESOLUTION: usize = 128;
/// KDE cells below this value are dropped from the KL sum.
pub const DENSITY_CLAMP: f64 = 1e-300;
/// Minimum ensemble size for the KDE-based estimators.
pub const MIN_PARTICLES: usize = 100;

fn check(ens: &ParticleEnsemble, field: &dyn EnergyField) -> Result<()> {
    if ens.dim() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: ens.dim() });
    }
    Ok(())
}

/// The normalized Gibbs density of a field on a grid, kept in log form so
/// that cells where `e^{-U}` underflows still compare finitely.
#[derive(Debug, Clone)]
pub struct GibbsReference {
    pub grid: Grid,
    pub log_density: Vec<f64>,
    pub log_z: f64,
    pub boundary_ratio: f64,
}

impl GibbsReference {
    pub fn new(field: &dyn EnergyField, grid: &Grid) -> Result<Self> {
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
        let shifted: Vec<f64> = energies.iter().map(|u| (min - u).exp()).collect();
        let log_z = grid.integrate(&shifted).ln() - min;
        let boundary_ratio = DensityGrid { grid: grid.clone(), values: shifted, normalized: false }.boundary_ratio();
        if boundary_ratio >= BOUNDARY_TOLERANCE {
            warn!("Gibbs density reaches {boundary_ratio:.2e} of its peak on the grid boundary");
        }
        let log_density = energies.iter().map(|u| -u - log_z).collect();
        Ok(Self { grid: grid.clone(), log_density, log_z, boundary_ratio })
    }

    pub fn density(&self) -> DensityGrid {
        DensityGrid {
            grid: self.grid.clone(),
            values: self.log_density.iter().map(|l| l.exp()).collect(),
            normalized: true,
        }
    }

    /// Approximate Gibbs draws: grid node by mass, jittered within its cell.
    pub fn sample(&self, n: usize, seed: u64) -> PointSet {
        self.density().sample(n, NoiseStream::new(seed, Purpose::GridSample))
    }

    /// `∫ ρ̂ log(ρ̂/ρ_Gibbs)` for a KDE of `points`, renormalized on the grid.
    pub fn kl_of(&self, points: &PointSet, bandwidth: f64) -> Result<f64> {
        if points.len() < MIN_PARTICLES {
            return Err(Error::invalid(format!("KL estimate needs at least {MIN_PARTICLES} particles")));
        }
        let mut est = kde_grid(points, bandwidth, &self.grid)?;
        est.normalize()?;
        let terms: Vec<f64> = est
            .values
            .iter()
            .zip(&self.log_density)
            .map(|(&p, &lq)| if p < DENSITY_CLAMP { 0.0 } else { p * (p.ln() - lq) })
            .collect();
        let kl = self.grid.integrate(&terms);
        if kl < -1e-3 {
            warn!("KL estimate {kl:.4} is negative beyond tolerance; the estimator is biased here");
        }
        Ok(kl)
    }
}

/// Grid KL between the ensemble's KDE and the normalized Gibbs density.
pub fn kl_grid(
    ens: &ParticleEnsemble,
    field: &dyn EnergyField,
    bounds: &BoxBounds,
    resolution: usize,
    bandwidth: f64,
) -> Result<f64> {
    check(ens, field)?;
    if ens.dim() > 2 {
        return Err(Error::invalid("kl_grid supports d <= 2"));
    }
    let grid = Grid::new(bounds.clone(), resolution)?;
    GibbsReference::new(field, &grid)?.kl_of(&ens.points, bandwidth)
}

/// `(1/N) Σ ‖s(xᵢ) + ∇U(xᵢ)‖²` for a caller-supplied score `s`.
pub fn fisher_info_with_score<S>(ens: &ParticleEnsemble, field: &dyn EnergyField, score: S) -> Result<f64>
where
    S: Fn(&[f64]) -> Vec<f64> + Sync,
{
    check(ens, field)?;
    let d = ens.dim();
    let terms: Vec<f64> = ens
        .points
        .as_slice()
        .par_chunks(d)
        .map(|x| {
            let mut g = vec![0.0; d];
            field.gradient(x, &mut g);
            score(x).iter().zip(&g).map(|(s, gi)| (s + gi) * (s + gi)).sum()
        })
        .collect();
    let f = terms.iter().sum::<f64>() / terms.len().max(1) as f64;
    if !f.is_finite() {
        return Err(Error::NonFinite { what: "Fisher information", point: Vec::new() });
    }
    Ok(f)
}

/// Relative Fisher information with the ensemble's own KDE score. In d ≤ 2
/// the KDE and its gradient are tabulated on a grid covering the ensemble and
/// interpolated at the particles; in d = 3 the sum is direct.
pub fn fisher_info(ens: &ParticleEnsemble, field: &dyn EnergyField, bandwidth: f64) -> Result<f64> {
    check(ens, field)?;
    if ens.len() < MIN_PARTICLES {
        return Err(Error::invalid(format!("Fisher estimate needs at least {MIN_PARTICLES} particles")));
    }
    let d = ens.dim();
    if d > 2 {
        let kde = crate::target::KdeTarget::new(
            &crate::target::EmpiricalDataset::new(ens.points.clone())?,
            bandwidth,
        )?;
        return fisher_info_with_score(ens, field, |x| kde.score(x));
    }
    let pad = 4.0 * bandwidth;
    let (lo, hi): (Vec<f64>, Vec<f64>) = ens.points.bounds().into_iter().map(|(a, b)| (a - pad, b + pad)).unzip();
    let bounds = BoxBounds::new(lo, hi)?;
    let widest = (0..d).map(|k| bounds.hi[k] - bounds.lo[k]).fold(0.0, f64::max);
    let cap = if d == 1 { 8192 } else { 1024 };
    let resolution = ((4.0 * widest / bandwidth).ceil() as usize + 1).clamp(64, cap);
    let grid = Grid::new(bounds, resolution)?;
    let (dens, grads) = kde_on_grid(&ens.points, bandwidth, &grid, true)?;
    fisher_info_with_score(ens, field, |x| {
        let p = grid.interpolate(&dens, x).max(f64::MIN_POSITIVE);
        grads.iter().map(|g| grid.interpolate(g, x) / p).collect()
    })
}

/// Ensemble means entering `R = E[ΔU]/E[‖∇U‖²]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub mean_laplacian: f64,
    pub mean_grad2: f64,
    /// `+∞` (serialized as null) when every particle sits at a critical point.
    pub ratio: f64,
}

pub fn ratio_r(ens: &ParticleEnsemble, field: &dyn EnergyField) -> Result<RatioEstimate> {
    check(ens, field)?;
    if ens.is_empty() {
        return Err(Error::invalid("ratio of an empty ensemble"));
    }
    let d = ens.dim();
    let terms: Vec<(f64, f64)> = ens
        .points
        .as_slice()
        .par_chunks(d)
        .map(|x| {
            let mut g = vec![0.0; d];
            field.gradient(x, &mut g);
            (field.laplacian(x), g.iter().map(|v| v * v).sum())
        })
        .collect();
    let n = terms.len() as f64;
    let (mut lap, mut g2) = (0.0, 0.0);
    for (a, b) in terms {
        lap += a;
        g2 += b;
    }
    let (mean_laplacian, mean_grad2) = (lap / n, g2 / n);
    if !(mean_laplacian.is_finite() && mean_grad2.is_finite()) {
        return Err(Error::NonFinite { what: "ensemble Laplacian or gradient", point: Vec::new() });
    }
    let ratio = if mean_grad2 > 0.0 {
        mean_laplacian / mean_grad2
    } else if mean_laplacian > 0.0 {
        warn!("all particles at critical points; R is infinite");
        f64::INFINITY
    } else {
        f64::NAN
    };
    Ok(RatioEstimate { mean_laplacian, mean_grad2, ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingDirection {
    /// R rose through 1 (ensemble contracting onto the modes).
    Upward,
    /// R fell through 1 (started too concentrated).
    Downward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub time: f64,
    /// Fractional step index `time / Δt`.
    pub step: f64,
    pub direction: CrossingDirection,
}

/// First crossing of `r` through 1, linearly interpolated in time.
pub fn first_crossing(times: &[f64], r: &[f64], dt: f64) -> Result<Option<Crossing>> {
    if times.len() != r.len() {
        return Err(Error::invalid("times and ratios differ in length"));
    }
    if times.len() < 2 {
        return Err(Error::invalid("crossing detection needs at least two snapshots"));
    }
    for j in 1..r.len() {
        let (a, b) = (r[j - 1] - 1.0, r[j] - 1.0);
        if a.is_nan() || b.is_nan() || a == 0.0 && j > 1 {
            continue;
        }
        let direction = if a < b { CrossingDirection::Upward } else { CrossingDirection::Downward };
        let time = if a == 0.0 {
            times[j - 1]
        } else if a.signum() != b.signum() || b == 0.0 {
            if b.is_finite() {
                times[j - 1] + (times[j] - times[j - 1]) * a / (a - b)
            } else {
                times[j]
            }
        } else {
            continue;
        };
        return Ok(Some(Crossing { time, step: time / dt, direction }));
    }
    Ok(None)
}

/// `τ_det` from a deterministic log: `R` at every snapshot, first crossing of 1.
pub fn detect_tau_det(log: &TrajectoryLog, field: &dyn EnergyField) -> Result<Option<Crossing>> {
    if log.snapshots.len() < 2 {
        return Err(Error::invalid("detect_tau_det needs at least two snapshots"));
    }
    let mut times = Vec::with_capacity(log.snapshots.len());
    let mut r = Vec::with_capacity(log.snapshots.len());
    for s in &log.snapshots {
        times.push(s.ensemble.time);
        r.push(ratio_r(&s.ensemble, field)?.ratio);
    }
    first_crossing(&times, &r, log.dt())
}

/// `τ_Lang = ln(V₀/ε) / (2 C_LS)`, zero when `V₀ ≤ ε`.
pub fn tau_lang(c_ls: f64, v0: f64, epsilon: f64) -> Result<f64> {
    if !(c_ls > 0.0) {
        return Err(Error::NoLsiCertificate(c_ls));
    }
    if !(epsilon > 0.0) || !(v0 >= 0.0) {
        return Err(Error::invalid(format!("need V0 >= 0 and epsilon > 0, got {v0}, {epsilon}")));
    }
    if v0 <= epsilon {
        return Ok(0.0);
    }
    Ok((v0 / epsilon).ln() / (2.0 * c_ls))
}

/// Running trapezoid integral of `E[‖∇U‖²] - E[ΔU] = E[‖∇U‖²](1 - R)`.
pub fn kl_budget(times: &[f64], mean_laplacian: &[f64], mean_grad2: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    for j in 0..times.len() {
        if j > 0 {
            let f0 = mean_grad2[j - 1] - mean_laplacian[j - 1];
            let f1 = mean_grad2[j] - mean_laplacian[j];
            acc += 0.5 * (f0 + f1) * (times[j] - times[j - 1]);
        }
        out.push(acc);
    }
    out
}

/// Budget series computed from a deterministic log's snapshots.
pub fn kl_budget_of_log(log: &TrajectoryLog, field: &dyn EnergyField) -> Result<Vec<f64>> {
    let mut t = Vec::new();
    let mut lap = Vec::new();
    let mut g2 = Vec::new();
    for s in &log.snapshots {
        let r = ratio_r(&s.ensemble, field)?;
        t.push(s.ensemble.time);
        lap.push(r.mean_laplacian);
        g2.push(r.mean_grad2);
    }
    Ok(kl_budget(&t, &lap, &g2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCheck {
    pub passed: bool,
    /// `min_t (e^{-2Ct} KL(0) + floor - KL(t))`; negative means violated.
    pub worst_margin: f64,
    pub worst_time: f64,
}

/// Checks `KL(t) ≤ e^{-2 C_LS t} KL(0) + floor` at every point of a series.
pub fn verify_exponential_decay(times: &[f64], kl: &[f64], c_ls: f64, floor: f64) -> Result<DecayCheck> {
    if !(c_ls > 0.0) {
        return Err(Error::NoLsiCertificate(c_ls));
    }
    if times.is_empty() || times.len() != kl.len() {
        return Err(Error::invalid("decay check needs a nonempty, aligned series"));
    }
    let (t0, k0) = (times[0], kl[0]);
    let mut worst = DecayCheck { passed: true, worst_margin: f64::INFINITY, worst_time: t0 };
    for (&t, &k) in times.iter().zip(kl) {
        let margin = (-2.0 * c_ls * (t - t0)).exp() * k0 + floor - k;
        if margin < worst.worst_margin {
            worst.worst_margin = margin;
            worst.worst_time = t;
        }
    }
    worst.passed = worst.worst_margin >= 0.0;
    Ok(worst)
}

/// Which bandwidth the KDE-based functionals use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum BandwidthRule {
    /// Scott's rule recomputed on every snapshot.
    Scott,
    Fixed(f64),
}

impl BandwidthRule {
    pub fn bandwidth(&self, points: &PointSet) -> f64 {
        match self {
            BandwidthRule::Scott => scott_bandwidth(points),
            BandwidthRule::Fixed(h) => *h,
        }
    }
}

/// Functionals of one snapshot; one row of the series CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFunctionals {
    pub step: usize,
    pub t: f64,
    pub kl: f64,
    pub fisher: f64,
    pub mean_lap: f64,
    pub mean_grad2: f64,
    #[serde(rename = "R")]
    pub r: f64,
}

/// KL, Fisher information and `R` at every snapshot of a log.
pub fn functional_series(
    log: &TrajectoryLog,
    field: &dyn EnergyField,
    gibbs: &GibbsReference,
    bandwidth: BandwidthRule,
) -> Result<Vec<SnapshotFunctionals>> {
    log.snapshots
        .iter()
        .map(|s| {
            let h = bandwidth.bandwidth(&s.ensemble.points);
            let r = ratio_r(&s.ensemble, field)?;
            Ok(SnapshotFunctionals {
                step: s.step,
                t: s.ensemble.time,
                kl: gibbs.kl_of(&s.ensemble.points, h)?,
                fisher: fisher_info(&s.ensemble, field, h)?,
                mean_lap: r.mean_laplacian,
                mean_grad2: r.mean_grad2,
                r: r.ratio,
            })
        })
        .collect()
}

/// KL of `n` Gibbs draws against their own density: the estimator's floor.
pub fn calibrate_floor(gibbs: &GibbsReference, n: usize, bandwidth: BandwidthRule, seed: u64) -> Result<f64> {
    let pts = gibbs.sample(n, seed);
    Ok(gibbs.kl_of(&pts, bandwidth.bandwidth(&pts))?.max(0.0))
}

pub fn write_series_csv(series: &[SnapshotFunctionals], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,kl,fisher,mean_lap,mean_grad2,R")?;
    for s in series {
        writeln!(w, "{},{},{},{},{},{}", s.t, s.kl, s.fisher, s.mean_lap, s.mean_grad2, s.r)?;
    }
    w.flush()?;
    Ok(())
}

/// The `τ_Lang` estimate and the inputs it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinHorizon {
    pub c_ls: f64,
    pub c_ls_certified: bool,
    pub v0: f64,
    pub epsilon: f64,
    /// Absent when the Bakry–Emery estimate is not positive.
    pub tau: Option<f64>,
}

/// Everything a stop-scan produces for one energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    pub step_size: f64,
    pub steps: usize,
    pub kl_floor: f64,
    pub deterministic: Vec<SnapshotFunctionals>,
    pub langevin: Vec<SnapshotFunctionals>,
    pub tau_det: Option<Crossing>,
    /// Step of the smallest deterministic KL estimate.
    pub kl_argmin_step: usize,
    pub kl_budget: Vec<f64>,
    pub tau_lang: LangevinHorizon,
    pub decay_check: Option<DecayCheck>,
}

impl StoppingReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Settings of a stop-scan: one deterministic and one Langevin run from a
/// shared Gaussian initialization, with functionals at every snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopScanConfig {
    pub step_size: f64,
    pub steps: usize,
    pub snapshot_stride: usize,
    pub particles: usize,
    pub prior_variance: f64,
    pub bounds: BoxBounds,
    pub kl_bandwidth: BandwidthRule,
    /// KL tolerance `ε` of the Langevin horizon.
    pub epsilon: f64,
    pub seed: u64,
}

impl StopScanConfig {
    pub fn new(bounds: BoxBounds) -> Self {
        Self {
            step_size: 0.01,
            steps: 200,
            snapshot_stride: 5,
            particles: 10_000,
            prior_variance: 4.0,
            bounds,
            kl_bandwidth: BandwidthRule::Scott,
            epsilon: 0.05,
            seed: 0,
        }
    }

    fn sampler(&self, kind: SamplerKind) -> SamplerConfig {
        SamplerConfig {
            kind,
            step_size: self.step_size,
            steps: self.steps,
            snapshot_stride: self.snapshot_stride,
            seed: self.seed,
            lipschitz: None,
        }
    }
}

/// A stop-scan's report together with the two trajectories it was built from.
pub struct StopScan {
    pub report: StoppingReport,
    pub deterministic: TrajectoryLog,
    pub langevin: TrajectoryLog,
}

/// Runs both samplers from the same prior draw and assembles the stopping
/// report. `C_LS` comes from the Bakry–Emery bound on a 64² probe grid.
pub fn stop_scan(field: &dyn EnergyField, cfg: &StopScanConfig) -> Result<StopScan> {
    if cfg.particles < MIN_PARTICLES {
        return Err(Error::invalid(format!("stop-scan needs at least {MIN_PARTICLES} particles")));
    }
    let d = field.dim();
    if cfg.bounds.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: cfg.bounds.dim() });
    }
    let det_cfg = cfg.sampler(SamplerKind::Deterministic);
    det_cfg.validate()?;
    let gibbs = GibbsReference::new(field, &Grid::new(cfg.bounds.clone(), KL_RESOLUTION)?)?;
    let init = gaussian_prior(cfg.particles, d, cfg.prior_variance, cfg.seed);
    let deterministic = simulate(&init, field, &det_cfg)?;
    let langevin = simulate(&init, field, &cfg.sampler(SamplerKind::Langevin))?;
    let det_series = functional_series(&deterministic, field, &gibbs, cfg.kl_bandwidth)?;
    let lang_series = functional_series(&langevin, field, &gibbs, cfg.kl_bandwidth)?;
    let kl_floor = calibrate_floor(&gibbs, cfg.particles, cfg.kl_bandwidth, cfg.seed)?;

    let tau_det = detect_tau_det(&deterministic, field)?;
    let det_kl: Vec<f64> = det_series.iter().map(|s| s.kl).collect();
    let kl_argmin_step = det_series[argmin(&det_kl).unwrap_or(0)].step;
    let times: Vec<f64> = det_series.iter().map(|s| s.t).collect();
    let lap: Vec<f64> = det_series.iter().map(|s| s.mean_lap).collect();
    let g2: Vec<f64> = det_series.iter().map(|s| s.mean_grad2).collect();
    let budget = kl_budget(&times, &lap, &g2);

    let probe = Grid::new(cfg.bounds.clone(), 64)?.nodes();
    let bound = min_hessian_eigenvalue(field, &probe)?;
    let v0 = lang_series[0].kl.max(0.0);
    let (tau, decay_check) = if bound.certified {
        let lt: Vec<f64> = lang_series.iter().map(|s| s.t).collect();
        let lk: Vec<f64> = lang_series.iter().map(|s| s.kl).collect();
        (
            Some(tau_lang(bound.value, v0, cfg.epsilon)?),
            Some(verify_exponential_decay(&lt, &lk, bound.value, kl_floor)?),
        )
    } else {
        (None, None)
    };
    let report = StoppingReport {
        step_size: cfg.step_size,
        steps: cfg.steps,
        kl_floor,
        deterministic: det_series,
        langevin: lang_series,
        tau_det,
        kl_argmin_step,
        kl_budget: budget,
        tau_lang: LangevinHorizon { c_ls: bound.value, c_ls_certified: bound.certified, v0, epsilon: cfg.epsilon, tau },
        decay_check,
    };
    Ok(StopScan { report, deterministic, langevin })
}

/// Index of the smallest finite value.
pub fn argmin(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
}
