//! Out-of-distribution scores from a trained energy and a barrier-functional
//! monitor over sampler trajectories.
//!
//! * `S₁(x) = U(x)`: the energy (log Z optionally subtracted).
//! * `S₂(x) = ‖∇U(x)‖`: how fast the flow would move `x`.
//! * `S₃(x) = ‖x - Φ(x)‖`: displacement after `τ` explicit gradient-flow steps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyField;
use crate::error::{Error, Result};
use crate::grid::BoxBounds;
use crate::points::{dist2, PointSet};
use crate::rng::{NoiseStream, Purpose};
use crate::sampler::TrajectoryLog;

pub const DEFAULT_FLOW_STEPS: usize = 30;
pub const DEFAULT_FLOW_STEP_SIZE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScores {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub s3: Vec<f64>,
}

impl OodScores {
    pub fn len(&self) -> usize {
        self.s1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s1.is_empty()
    }

    pub fn get(&self, score: Score) -> &[f64] {
        match score {
            Score::S1 => &self.s1,
            Score::S2 => &self.s2,
            Score::S3 => &self.s3,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "index,s1,s2,s3")?;
        for i in 0..self.len() {
            writeln!(w, "{i},{},{},{}", self.s1[i], self.s2[i], self.s3[i])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Score {
    S1,
    S2,
    S3,
}

impl Score {
    pub const ALL: [Score; 3] = [Score::S1, Score::S2, Score::S3];

    pub fn name(&self) -> &'static str {
        match self {
            Score::S1 => "s1",
            Score::S2 => "s2",
            Score::S3 => "s3",
        }
    }
}

/// Scores every point; `log_z`, when given, is subtracted from `S₁`.
pub fn score_batch(
    field: &dyn EnergyField,
    points: &PointSet,
    flow_steps: usize,
    step_size: f64,
    log_z: Option<f64>,
) -> Result<OodScores> {
    if flow_steps == 0 {
        return Err(Error::invalid("flow_steps must be at least 1"));
    }
    if !(step_size > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {step_size}")));
    }
    let d = field.dim();
    if points.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: points.dim() });
    }
    let shift = log_z.unwrap_or(0.0);
    let rows: Vec<Result<(f64, f64, f64)>> = points
        .as_slice()
        .par_chunks(d)
        .map(|x| {
            let mut g = vec![0.0; d];
            let u = field.energy_and_gradient(x, &mut g);
            let s2 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut y = x.to_vec();
            for _ in 0..flow_steps {
                field.gradient(&y, &mut g);
                y.iter_mut().zip(&g).for_each(|(yk, gk)| *yk -= step_size * gk);
            }
            let s3 = dist2(x, &y).sqrt();
            if !(u.is_finite() && s2.is_finite() && s3.is_finite()) {
                return Err(Error::NonFinite { what: "OOD score", point: x.to_vec() });
            }
            Ok((u - shift, s2, s3))
        })
        .collect();
    let mut out = OodScores { s1: Vec::new(), s2: Vec::new(), s3: Vec::new() };
    for r in rows {
        let (a, b, c) = r?;
        out.s1.push(a);
        out.s2.push(b);
        out.s3.push(c);
    }
    Ok(out)
}

/// `n` points uniform on a box.
pub fn uniform_noise(bounds: &BoxBounds, n: usize, seed: u64) -> PointSet {
    let d = bounds.dim();
    let stream = NoiseStream::new(seed, Purpose::OodNoise);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut rng = stream.rng(i as u64, 0);
        data.extend(bounds.lo.iter().zip(&bounds.hi).map(|(a, b)| rng.random_range(*a..*b)));
    }
    PointSet::new(d, data).expect("well-formed by construction")
}

/// `points + shift` row by row.
pub fn translate(points: &PointSet, shift: &[f64]) -> Result<PointSet> {
    if shift.len() != points.dim() {
        return Err(Error::DimensionMismatch { expected: points.dim(), got: shift.len() });
    }
    let data = points.rows().flat_map(|r| r.iter().zip(shift).map(|(a, b)| a + b)).collect();
    PointSet::new(points.dim(), data)
}

/// Mann–Whitney AUROC: the probability that a random OOD score exceeds a
/// random in-distribution score (ties count one half). With
/// `higher_is_ood = false` the comparison is reversed.
pub fn auroc(scores_id: &[f64], scores_ood: &[f64], higher_is_ood: bool) -> Result<f64> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::invalid("AUROC needs nonempty score lists"));
    }
    if scores_id.iter().chain(scores_ood).any(|v| v.is_nan()) {
        return Err(Error::invalid("AUROC scores contain NaN"));
    }
    let sign = if higher_is_ood { 1.0 } else { -1.0 };
    let mut all: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (sign * s, false))
        .chain(scores_ood.iter().map(|&s| (sign * s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the OOD group.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n_id, n_ood) = (scores_id.len() as f64, scores_ood.len() as f64);
    Ok((rank_sum - n_ood * (n_ood + 1.0) / 2.0) / (n_id * n_ood))
}

/// AUROC under both orientations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AurocPair {
    pub higher_is_ood: f64,
    pub lower_is_ood: f64,
}

/// AUROC per score (outer key) and OOD set (inner key).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScoreReport {
    pub flow_steps: usize,
    pub step_size: f64,
    pub auroc: BTreeMap<String, BTreeMap<String, AurocPair>>,
}

impl OodScoreReport {
    pub fn new(flow_steps: usize, step_size: f64) -> Self {
        Self { flow_steps, step_size, auroc: BTreeMap::new() }
    }

    /// Adds the AUROCs of one OOD set against the in-distribution scores.
    pub fn add_set(&mut self, name: &str, id: &OodScores, ood: &OodScores) -> Result<()> {
        for s in Score::ALL {
            let hi = auroc(id.get(s), ood.get(s), true)?;
            let lo = auroc(id.get(s), ood.get(s), false)?;
            self.auroc
                .entry(s.name().to_string())
                .or_default()
                .insert(name.to_string(), AurocPair { higher_is_ood: hi, lower_is_ood: lo });
        }
        Ok(())
    }

    pub fn get(&self, score: Score, set: &str) -> Option<AurocPair> {
        self.auroc.get(score.name()).and_then(|m| m.get(set)).copied()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum UnsafeSet {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Disc { center: Vec<f64>, radius: f64 },
}

impl UnsafeSet {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            UnsafeSet::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *a <= *v && *v <= *b),
            UnsafeSet::Disc { center, radius } => dist2(x, center) <= radius * radius,
        }
    }
}

/// `B(ρ) = β - ρ(𝒰)` with `ρ(𝒰)` the fraction of particles inside `𝒰`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierMonitor {
    pub unsafe_set: UnsafeSet,
    pub beta: f64,
}

impl BarrierMonitor {
    pub fn new(unsafe_set: UnsafeSet, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1), got {beta}")));
        }
        Ok(Self { unsafe_set, beta })
    }

    pub fn value(&self, points: &PointSet) -> f64 {
        if points.is_empty() {
            return self.beta;
        }
        let inside = points.rows().filter(|x| self.unsafe_set.contains(x)).count();
        self.beta - inside as f64 / points.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Time of the first snapshot with `B < 0`, if any. Monitoring only.
    pub first_violation: Option<f64>,
}

pub fn barrier_trace(log: &TrajectoryLog, monitor: &BarrierMonitor) -> BarrierTrace {
    let times: Vec<f64> = log.snapshots.iter().map(|s| s.ensemble.time).collect();
    let values: Vec<f64> = log.snapshots.iter().map(|s| monitor.value(&s.ensemble.points)).collect();
    let first_violation = values.iter().position(|&b| b < 0.0).map(|i| times[i]);
    BarrierTrace { times, values, first_violation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::QuadraticEnergy;
    use proptest::prelude::*;

    fn brute(id: &[f64], ood: &[f64]) -> f64 {
        let mut wins = 0.0;
        for a in ood {
            for b in id {
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        wins / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_small_cases() {
        assert_eq!(auroc(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], true).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], true).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0], true).unwrap(), 0.75);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0], false).unwrap(), 0.25);
        assert!(auroc(&[], &[1.0], true).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(
            id in proptest::collection::vec(0u8..6, 1..20),
            ood in proptest::collection::vec(0u8..6, 1..20),
        ) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            let a = auroc(&id, &ood, true).unwrap();
            prop_assert!((a - brute(&id, &ood)).abs() < 1e-12);
            prop_assert!((auroc(&ood, &id, true).unwrap() - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_on_quadratic() {
        let q = QuadraticEnergy::isotropic(2, 1.0);
        let pts = PointSet::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let s = score_batch(&q, &pts, 1, 0.1, None).unwrap();
        assert!((s.s2[0] - 5.0).abs() < 1e-14);
        assert!((s.s3[0] - 0.5).abs() < 1e-14);
        assert_eq!((s.s2[1], s.s3[1]), (0.0, 0.0));
        assert_eq!(s.s1[0], 12.5);
        let shifted = score_batch(&q, &pts, 1, 0.1, Some(2.0)).unwrap();
        assert_eq!(shifted.s1[0], 10.5);
        assert!(score_batch(&q, &pts, 0, 0.1, None).is_err());
    }

    #[test]
    fn barrier_extremes() {
        let pts = PointSet::from_rows(&[vec![0.1, 0.0], vec![3.0, 3.0]]).unwrap();
        let disc = BarrierMonitor::new(UnsafeSet::Disc { center: vec![0.0, 0.0], radius: 0.5 }, 0.05).unwrap();
        assert!((disc.value(&pts) - (0.05 - 0.5)).abs() < 1e-15);
        let everything = BarrierMonitor::new(UnsafeSet::Box { lo: vec![-9.0; 2], hi: vec![9.0; 2] }, 0.05).unwrap();
        assert!((everything.value(&pts) - (0.05 - 1.0)).abs() < 1e-15);
        let nothing = BarrierMonitor::new(UnsafeSet::Box { lo: vec![20.0; 2], hi: vec![21.0; 2] }, 0.05).unwrap();
        assert_eq!(nothing.value(&pts), 0.05);
        assert!(BarrierMonitor::new(UnsafeSet::Disc { center: vec![0.0; 2], radius: 1.0 }, 1.0).is_err());
    }
}
