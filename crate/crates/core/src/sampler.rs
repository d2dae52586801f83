//! Particle integrators for the Langevin SDE `dx = -∇U dt + √2 dW` and the
//! deterministic gradient flow `ẋ = -∇U`.

use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyField;
use crate::error::{Error, Result};
use crate::points::{ParticleEnsemble, PointSet};
use crate::rng::{NoiseStream, Purpose};
use crate::target::{write_points_csv, EmpiricalDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Langevin,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub step_size: f64,
    pub steps: usize,
    pub snapshot_stride: usize,
    pub seed: u64,
    /// Optional gradient Lipschitz bound for the `Δt·L < 2` stability check.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Langevin, step_size: 0.01, steps: 200, snapshot_stride: 10, seed: 0, lipschitz: None }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::invalid("snapshot_stride must be positive"));
        }
        if self.steps > 0 && self.snapshot_stride > self.steps {
            return Err(Error::invalid(format!(
                "snapshot_stride {} exceeds the number of steps {}",
                self.snapshot_stride, self.steps
            )));
        }
        if let Some(l) = self.lipschitz {
            if self.step_size * l >= 2.0 {
                warn!("step size {} times Lipschitz bound {l} is >= 2; the explicit scheme may be unstable", self.step_size);
            }
        }
        Ok(())
    }
}

/// Ensemble means of `U` and `‖∇U‖²` at the positions a step started from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub mean_energy: f64,
    pub mean_grad2: f64,
}

fn stats(vals: &[(f64, f64)]) -> StepStats {
    let n = vals.len().max(1) as f64;
    let (mut u, mut g) = (0.0, 0.0);
    for (a, b) in vals {
        u += a;
        g += b;
    }
    StepStats { mean_energy: u / n, mean_grad2: g / n }
}

fn check_field(ens: &ParticleEnsemble, field: &dyn EnergyField, dt: f64) -> Result<()> {
    if ens.dim() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: ens.dim() });
    }
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {dt}")));
    }
    Ok(())
}

fn step_impl(
    ens: &mut ParticleEnsemble,
    field: &dyn EnergyField,
    dt: f64,
    noise: Option<NoiseStream>,
    step: usize,
) -> Result<StepStats> {
    check_field(ens, field, dt)?;
    let d = ens.dim();
    let amp = (2.0 * dt).sqrt();
    let vals: Vec<Option<(f64, f64)>> = ens
        .points
        .as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .map(|(i, x)| {
            let mut g = vec![0.0; d];
            let u = field.energy_and_gradient(x, &mut g);
            let g2: f64 = g.iter().map(|v| v * v).sum();
            match noise {
                Some(stream) => {
                    let mut rng = stream.rng(i as u64, step as u64);
                    for (xk, gk) in x.iter_mut().zip(&g) {
                        let z: f64 = rng.sample(StandardNormal);
                        *xk += -dt * gk + amp * z;
                    }
                }
                None => x.iter_mut().zip(&g).for_each(|(xk, gk)| *xk -= dt * gk),
            }
            (x.iter().all(|v| v.is_finite()) && u.is_finite()).then_some((u, g2))
        })
        .collect();
    let mut out = Vec::with_capacity(vals.len());
    for (index, v) in vals.into_iter().enumerate() {
        out.push(v.ok_or(Error::NonFiniteParticle { index, step })?);
    }
    ens.time += dt;
    Ok(stats(&out))
}

/// One Euler–Maruyama step `x ← x - Δt∇U(x) + √(2Δt) z`; the noise for
/// particle `i` is drawn from substream `i` at counter `step`.
pub fn langevin_step(
    ens: &mut ParticleEnsemble,
    field: &dyn EnergyField,
    dt: f64,
    noise: NoiseStream,
    step: usize,
) -> Result<StepStats> {
    step_impl(ens, field, dt, Some(noise), step)
}

/// One explicit Euler step `x ← x - Δt∇U(x)` of the gradient flow.
pub fn deterministic_step(ens: &mut ParticleEnsemble, field: &dyn EnergyField, dt: f64, step: usize) -> Result<StepStats> {
    step_impl(ens, field, dt, None, step)
}

/// Ensemble statistics without moving the particles.
pub fn ensemble_stats(ens: &ParticleEnsemble, field: &dyn EnergyField) -> Result<StepStats> {
    let d = ens.dim();
    let vals: Vec<(f64, f64)> = ens
        .points
        .as_slice()
        .par_chunks(d)
        .map(|x| {
            let mut g = vec![0.0; d];
            let u = field.energy_and_gradient(x, &mut g);
            (u, g.iter().map(|v| v * v).sum())
        })
        .collect();
    Ok(stats(&vals))
}

/// Isotropic Gaussian prior `N(0, variance·I)`.
pub fn gaussian_prior(n: usize, dim: usize, variance: f64, seed: u64) -> ParticleEnsemble {
    let stream = NoiseStream::new(seed, Purpose::Prior);
    let sd = variance.sqrt();
    let mut data = vec![0.0; n * dim];
    data.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
        let mut rng = stream.rng(i as u64, 0);
        row.iter_mut().for_each(|v| *v = sd * rng.sample::<f64, _>(StandardNormal));
    });
    ParticleEnsemble::new(PointSet::new(dim, data).expect("well-formed by construction"), "gaussian_prior")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub ensemble: ParticleEnsemble,
}

/// Snapshots plus per-step means; `mean_energy[k]` and `mean_grad2[k]` refer
/// to the ensemble after `k` steps, for `k = 0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub config: SamplerConfig,
    pub snapshots: Vec<Snapshot>,
    pub mean_energy: Vec<f64>,
    pub mean_grad2: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryManifest {
    config: SamplerConfig,
    seed: u64,
    provenance: String,
    snapshot_steps: Vec<usize>,
    snapshot_times: Vec<f64>,
    mean_energy: Vec<f64>,
    mean_grad2: Vec<f64>,
}

impl TrajectoryLog {
    pub fn dt(&self) -> f64 {
        self.config.step_size
    }

    pub fn last(&self) -> &ParticleEnsemble {
        &self.snapshots.last().expect("a log always holds the initial snapshot").ensemble
    }

    pub fn snapshot_at(&self, step: usize) -> Option<&ParticleEnsemble> {
        self.snapshots.iter().find(|s| s.step == step).map(|s| &s.ensemble)
    }

    /// Writes `snap_{k}.csv` for every snapshot and a `trajectory.json`
    /// manifest into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for s in &self.snapshots {
            write_points_csv(&s.ensemble.points, &dir.join(format!("snap_{}.csv", s.step)))?;
        }
        let manifest = TrajectoryManifest {
            config: self.config.clone(),
            seed: self.config.seed,
            provenance: self.snapshots.first().map(|s| s.ensemble.provenance.clone()).unwrap_or_default(),
            snapshot_steps: self.snapshots.iter().map(|s| s.step).collect(),
            snapshot_times: self.snapshots.iter().map(|s| s.ensemble.time).collect(),
            mean_energy: self.mean_energy.clone(),
            mean_grad2: self.mean_grad2.clone(),
        };
        fs::write(dir.join("trajectory.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let m: TrajectoryManifest = serde_json::from_str(&fs::read_to_string(dir.join("trajectory.json"))?)?;
        if m.snapshot_steps.len() != m.snapshot_times.len() {
            return Err(Error::Format("snapshot steps and times differ in length".into()));
        }
        let snapshots = m
            .snapshot_steps
            .iter()
            .zip(&m.snapshot_times)
            .map(|(&step, &time)| {
                let pts = EmpiricalDataset::load_csv(&dir.join(format!("snap_{step}.csv")))?.points().clone();
                let mut ensemble = ParticleEnsemble::new(pts, m.provenance.clone());
                ensemble.time = time;
                Ok(Snapshot { step, ensemble })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: m.config, snapshots, mean_energy: m.mean_energy, mean_grad2: m.mean_grad2 })
    }
}

/// Runs `cfg.steps` steps from `init`, keeping snapshots every
/// `cfg.snapshot_stride` steps and at `k = 0` and `k = K`.
pub fn simulate(init: &ParticleEnsemble, field: &dyn EnergyField, cfg: &SamplerConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    check_field(init, field, cfg.step_size)?;
    let noise = NoiseStream::new(cfg.seed, Purpose::Langevin);
    let mut ens = init.clone();
    let mut snapshots = vec![Snapshot { step: 0, ensemble: ens.clone() }];
    let mut mean_energy = Vec::with_capacity(cfg.steps + 1);
    let mut mean_grad2 = Vec::with_capacity(cfg.steps + 1);
    for k in 0..cfg.steps {
        let s = match cfg.kind {
            SamplerKind::Langevin => langevin_step(&mut ens, field, cfg.step_size, noise, k)?,
            SamplerKind::Deterministic => deterministic_step(&mut ens, field, cfg.step_size, k)?,
        };
        mean_energy.push(s.mean_energy);
        mean_grad2.push(s.mean_grad2);
        // exact time accounting, free of accumulated rounding
        ens.time = init.time + (k + 1) as f64 * cfg.step_size;
        if (k + 1) % cfg.snapshot_stride == 0 || k + 1 == cfg.steps {
            snapshots.push(Snapshot { step: k + 1, ensemble: ens.clone() });
        }
    }
    let s = ensemble_stats(&ens, field)?;
    mean_energy.push(s.mean_energy);
    mean_grad2.push(s.mean_grad2);
    Ok(TrajectoryLog { config: cfg.clone(), snapshots, mean_energy, mean_grad2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::QuadraticEnergy;
    use approx::assert_relative_eq;

    struct Flat;
    impl EnergyField for Flat {
        fn dim(&self) -> usize {
            2
        }
        fn energy(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn energy_and_gradient(&self, _: &[f64], g: &mut [f64]) -> f64 {
            g.iter_mut().for_each(|v| *v = 0.0);
            0.0
        }
    }

    fn at(rows: &[Vec<f64>]) -> ParticleEnsemble {
        ParticleEnsemble::new(PointSet::from_rows(rows).unwrap(), "test")
    }

    #[test]
    fn deterministic_contraction() {
        let q = QuadraticEnergy::isotropic(2, 1.0);
        let mut e = at(&[vec![2.0, 0.0], vec![0.0, 0.0]]);
        deterministic_step(&mut e, &q, 0.1, 0).unwrap();
        assert_relative_eq!(e.points.row(0)[0], 1.8, epsilon = 1e-15);
        assert_eq!(e.points.row(1), &[0.0, 0.0]);
        assert_relative_eq!(e.time, 0.1);
    }

    #[test]
    fn pure_diffusion_variance() {
        let n = 20_000;
        let mut e = ParticleEnsemble::new(PointSet::new(2, vec![0.0; 2 * n]).unwrap(), "origin");
        langevin_step(&mut e, &Flat, 1.0, NoiseStream::new(4, Purpose::Langevin), 0).unwrap();
        for v in e.points.axis_variance() {
            assert!((v - 2.0).abs() < 0.1, "{v}");
        }
    }

    #[test]
    fn snapshots_include_endpoints() {
        let q = QuadraticEnergy::isotropic(2, 1.0);
        let init = gaussian_prior(50, 2, 4.0, 1);
        let cfg = SamplerConfig { steps: 25, snapshot_stride: 10, ..Default::default() };
        let log = simulate(&init, &q, &cfg).unwrap();
        let steps: Vec<usize> = log.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
        assert_eq!(log.mean_energy.len(), 26);
        assert_eq!(log.last().time, 25.0 * 0.01);
        assert_eq!(log.last().len(), 50);
    }

    #[test]
    fn zero_steps_keep_initial_only() {
        let q = QuadraticEnergy::isotropic(2, 1.0);
        let init = gaussian_prior(10, 2, 1.0, 1);
        let cfg = SamplerConfig { steps: 0, snapshot_stride: 1, ..Default::default() };
        let log = simulate(&init, &q, &cfg).unwrap();
        assert_eq!(log.snapshots.len(), 1);
        assert_eq!(log.snapshots[0].ensemble, init);
    }

    #[test]
    fn stride_beyond_run_rejected() {
        let cfg = SamplerConfig { steps: 5, snapshot_stride: 6, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn blow_up_names_particle() {
        let q = QuadraticEnergy::isotropic(2, 1.0);
        let mut e = at(&[vec![0.0, 0.0], vec![f64::MAX, 0.0]]);
        match deterministic_step(&mut e, &q, 3.0, 7) {
            Err(Error::NonFiniteParticle { index: 1, step: 7 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let q = QuadraticEnergy::isotropic(2, 1.0);
        let init = gaussian_prior(20, 2, 4.0, 3);
        let cfg = SamplerConfig { steps: 4, snapshot_stride: 2, ..Default::default() };
        let log = simulate(&init, &q, &cfg).unwrap();
        log.write_dir(dir.path()).unwrap();
        assert_eq!(TrajectoryLog::read_dir(dir.path()).unwrap(), log);
    }
}
