//! Score-matching fits of a [`ScalarNetEnergy`] to a [`KdeTarget`].
//!
//! Both losses depend on the parameters only through `g = ∇ₓU_θ`, so the
//! parameter gradient of each per-point term is `∇_θ (v·g)` with
//! `v = ∂loss/∂g`, evaluated by [`ScalarNetEnergy::directional_param_grad`].

use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyField, ScalarNetEnergy, SECOND_ORDER_STEP};
use crate::error::{Error, Result};
use crate::grid::{BoxBounds, Grid};
use crate::points::PointSet;
use crate::rng::{NoiseStream, Purpose};
use crate::target::KdeTarget;

/// Loss above which training is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Probe grid resolution per axis for the score error.
pub const PROBE_RESOLUTION: usize = 64;
/// Points per reduction chunk; fixed so sums do not depend on thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Ism,
    Dsm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: Loss,
    pub dsm_sigma: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { loss: Loss::Dsm, dsm_sigma: 0.3, learning_rate: 1e-3, steps: 5000, batch_size: 256, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss == Loss::Dsm && !(self.dsm_sigma > 0.0 && self.dsm_sigma.is_finite()) {
            return Err(Error::invalid(format!("dsm_sigma must be positive, got {}", self.dsm_sigma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// A loss value together with its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Loss,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub initial_probe_mse: f64,
    pub final_probe_mse: f64,
    pub probe_box: BoxBounds,
    /// Not serialized, so reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Sums per-chunk `(loss, grad)` partials in chunk order.
fn reduce(net: &ScalarNetEnergy, n: usize, per_chunk: impl Fn(std::ops::Range<usize>, &mut [f64]) -> Result<f64> + Sync) -> Result<LossEval> {
    let p = net.params().len();
    let chunks: Vec<std::ops::Range<usize>> = (0..n).step_by(CHUNK).map(|s| s..(s + CHUNK).min(n)).collect();
    let partials: Vec<(f64, Vec<f64>)> = chunks
        .into_par_iter()
        .map(|r| {
            let mut g = vec![0.0; p];
            let v = per_chunk(r, &mut g)?;
            Ok((v, g))
        })
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut grad = vec![0.0; p];
    for (v, g) in partials {
        value += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok(LossEval { value, grad })
}

/// Batch mean of `½‖∇U‖² - ΔU`, with `ΔU` the central-difference divergence
/// of the gradient (step [`SECOND_ORDER_STEP`]) and the gradient taken through
/// that stencil.
pub fn ism_loss(net: &ScalarNetEnergy, batch: &PointSet) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.dim() != net.dim() {
        return Err(Error::DimensionMismatch { expected: net.dim(), got: batch.dim() });
    }
    let d = net.dim();
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let eps = SECOND_ORDER_STEP;
    reduce(net, n, |range, acc| {
        let mut g = vec![0.0; d];
        let mut gp = vec![0.0; d];
        let mut e = vec![0.0; d];
        let mut xs = vec![0.0; d];
        let mut total = 0.0;
        for i in range {
            let x = batch.row(i);
            net.energy_and_gradient(x, &mut g);
            let mut lap = 0.0;
            xs.copy_from_slice(x);
            for k in 0..d {
                e[k] = 1.0;
                xs[k] = x[k] + eps;
                net.energy_and_gradient(&xs, &mut gp);
                lap += gp[k];
                net.directional_param_grad(&xs, &e, -inv_n / (2.0 * eps), acc);
                xs[k] = x[k] - eps;
                net.energy_and_gradient(&xs, &mut gp);
                lap -= gp[k];
                net.directional_param_grad(&xs, &e, inv_n / (2.0 * eps), acc);
                xs[k] = x[k];
                e[k] = 0.0;
            }
            lap /= 2.0 * eps;
            let term = 0.5 * g.iter().map(|v| v * v).sum::<f64>() - lap;
            if !term.is_finite() {
                return Err(Error::NonFinite { what: "ISM loss", point: x.to_vec() });
            }
            net.directional_param_grad(x, &g, inv_n, acc);
            total += term * inv_n;
        }
        Ok(total)
    })
}

/// Batch mean of `‖-∇U(x̃) - (x - x̃)/σ²‖²` with `x̃ = x + σz`; `noise` holds
/// the `z` rows.
pub fn dsm_loss(net: &ScalarNetEnergy, batch: &PointSet, sigma: f64, noise: &PointSet) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.dim() != net.dim() {
        return Err(Error::DimensionMismatch { expected: net.dim(), got: batch.dim() });
    }
    if noise.len() != batch.len() || noise.dim() != batch.dim() {
        return Err(Error::invalid("noise must have the batch's shape"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let d = net.dim();
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    reduce(net, n, |range, acc| {
        let mut xt = vec![0.0; d];
        let mut total = 0.0;
        for i in range {
            let (x, z) = (batch.row(i), noise.row(i));
            for k in 0..d {
                xt[k] = x[k] + sigma * z[k];
            }
            let term = net.gradient_then_directional(&xt, inv_n, acc, |g, v| {
                let mut term = 0.0;
                for k in 0..d {
                    // residual of the model score -g against the kernel score -z/σ
                    let r = g[k] - z[k] / sigma;
                    term += r * r;
                    v[k] = 2.0 * r;
                }
                term
            });
            if !term.is_finite() {
                return Err(Error::NonFinite { what: "DSM loss", point: xt.clone() });
            }
            total += term * inv_n;
        }
        Ok(total)
    })
}

/// Standard normal rows addressed by `(seed, row, step)`.
pub fn denoising_noise(n: usize, d: usize, seed: u64, step: usize) -> PointSet {
    let stream = NoiseStream::new(seed, Purpose::Denoising);
    let mut data = vec![0.0; n * d];
    for (i, row) in data.chunks_exact_mut(d).enumerate() {
        let mut rng = stream.rng(i as u64, step as u64);
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    PointSet::new(d, data).expect("well-formed by construction")
}

/// Minibatch of KDE draws for a given step.
fn kde_batch(target: &KdeTarget, n: usize, seed: u64, step: usize) -> PointSet {
    let data_pts = target.points();
    let d = data_pts.dim();
    let h = target.bandwidth();
    let stream = NoiseStream::new(seed, Purpose::KdeSample);
    let mut data = vec![0.0; n * d];
    for (i, row) in data.chunks_exact_mut(d).enumerate() {
        let mut rng = stream.rng(i as u64, step as u64);
        let j = rng.random_range(0..data_pts.len());
        for (o, c) in row.iter_mut().zip(data_pts.row(j)) {
            let z: f64 = rng.sample(StandardNormal);
            *o = c + h * z;
        }
    }
    PointSet::new(d, data).expect("well-formed by construction")
}

/// DSM minibatch in which consecutive rows share a data point and carry
/// opposite perturbations `±z`.
fn antithetic_batch(target: &KdeTarget, n: usize, d: usize, seed: u64, step: usize) -> (PointSet, PointSet) {
    let half = n.div_ceil(2);
    let x = kde_batch(target, half, seed, step);
    let z = denoising_noise(half, d, seed, step);
    let mut xs = Vec::with_capacity(n * d);
    let mut zs = Vec::with_capacity(n * d);
    for i in 0..n {
        xs.extend_from_slice(x.row(i / 2));
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        zs.extend(z.row(i / 2).iter().map(|v| sign * v));
    }
    (PointSet::new(d, xs).expect("well-formed"), PointSet::new(d, zs).expect("well-formed"))
}

/// Data bounding box padded by three bandwidths on each side.
pub fn default_probe_box(target: &KdeTarget) -> BoxBounds {
    let pad = 3.0 * target.bandwidth();
    let (lo, hi): (Vec<f64>, Vec<f64>) = target.points().bounds().into_iter().map(|(a, b)| (a - pad, b + pad)).unzip();
    BoxBounds::new(lo, hi).expect("padded bounds are ordered")
}

/// Probe-grid average of `‖-∇U - ∇log ρ*‖²`, each node weighted by `ρ*`.
///
/// Far from the data the KDE score grows like `r/h²` and no smoothed model
/// can follow it, so an unweighted grid mean would be dominated by empty
/// regions.
pub fn probe_score_mse(field: &dyn EnergyField, target: &KdeTarget, probe: &BoxBounds) -> Result<f64> {
    let grid = Grid::new(probe.clone(), PROBE_RESOLUTION)?;
    let d = field.dim();
    let terms = grid.map_nodes(|x| {
        let mut g = vec![0.0; d];
        field.gradient(x, &mut g);
        let err: f64 = target.score(x).iter().zip(&g).map(|(s, gi)| (s + gi) * (s + gi)).sum();
        err * target.density(x)
    });
    let weights = grid.map_nodes(|x| target.density(x));
    let mse = terms.iter().sum::<f64>() / weights.iter().sum::<f64>();
    if !mse.is_finite() {
        return Err(Error::NonFinite { what: "probe score error", point: Vec::new() });
    }
    Ok(mse)
}

/// Plain gradient descent on minibatches drawn from the KDE target.
pub fn train(net: &mut ScalarNetEnergy, target: &KdeTarget, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_probe(net, target, cfg, &default_probe_box(target))
}

pub fn train_with_probe(
    net: &mut ScalarNetEnergy,
    target: &KdeTarget,
    cfg: &TrainConfig,
    probe: &BoxBounds,
) -> Result<TrainReport> {
    cfg.validate()?;
    if net.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: net.dim() });
    }
    let start = Instant::now();
    let initial_probe_mse = probe_score_mse(net, target, probe)?;
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let eval = match cfg.loss {
            Loss::Dsm => {
                let (batch, z) = antithetic_batch(target, cfg.batch_size, net.dim(), cfg.seed, step);
                dsm_loss(net, &batch, cfg.dsm_sigma, &z)
            }
            Loss::Ism => ism_loss(net, &kde_batch(target, cfg.batch_size, cfg.seed, step)),
        }
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
            other => other,
        })?;
        if !eval.value.is_finite() || eval.value > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence { step, loss: eval.value });
        }
        for (p, g) in net.params_mut().iter_mut().zip(&eval.grad) {
            *p -= cfg.learning_rate * g;
        }
        if step % 500 == 0 {
            debug!("step {step}: loss {:.6}", eval.value);
        }
        loss_curve.push(eval.value);
    }
    let final_probe_mse = probe_score_mse(net, target, probe)?;
    info!("probe score MSE {initial_probe_mse:.4} -> {final_probe_mse:.4}");
    Ok(TrainReport {
        loss: cfg.loss,
        steps: cfg.steps,
        loss_curve,
        initial_probe_mse,
        final_probe_mse,
        probe_box: probe.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::EmpiricalDataset;

    fn net(width: usize, seed: u64) -> ScalarNetEnergy {
        ScalarNetEnergy::init(vec![2, width, width, 1], seed).unwrap()
    }

    fn batch() -> PointSet {
        PointSet::from_rows(&[vec![0.3, -0.4], vec![1.2, 0.8], vec![-0.9, 0.1]]).unwrap()
    }

    fn fd_check(f: impl Fn(&ScalarNetEnergy) -> LossEval, mut n: ScalarNetEnergy, tol: f64) {
        let eval = f(&n);
        let h = 1e-5;
        for idx in (0..n.params().len()).step_by(7) {
            let orig = n.params()[idx];
            n.params_mut()[idx] = orig + h;
            let up = f(&n).value;
            n.params_mut()[idx] = orig - h;
            let dn = f(&n).value;
            n.params_mut()[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - eval.grad[idx]).abs() / fd.abs().max(1e-2);
            assert!(err < tol, "param {idx}: fd {fd} vs analytic {}", eval.grad[idx]);
        }
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let b = batch();
        let z = denoising_noise(b.len(), 2, 5, 0);
        fd_check(|n| dsm_loss(n, &b, 0.3, &z).unwrap(), net(8, 1), 1e-3);
    }

    #[test]
    fn ism_gradient_matches_finite_differences() {
        let b = batch();
        fd_check(|n| ism_loss(n, &b).unwrap(), net(8, 2), 1e-3);
    }

    #[test]
    fn wide_net_gradients_match() {
        let b = batch();
        let z = denoising_noise(b.len(), 2, 9, 0);
        fd_check(|n| dsm_loss(n, &b, 0.5, &z).unwrap(), net(64, 3), 1e-2);
        fd_check(|n| ism_loss(n, &b).unwrap(), net(64, 4), 1e-2);
    }

    #[test]
    fn constant_energy_has_zero_losses() {
        let mut n = net(8, 1);
        n.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let bias = n.output_bias_index();
        n.params_mut()[bias] = 2.5;
        assert_eq!(ism_loss(&n, &batch()).unwrap().value, 0.0);
        let zero = PointSet::new(2, vec![0.0; 6]).unwrap();
        assert_eq!(dsm_loss(&n, &batch(), 0.3, &zero).unwrap().value, 0.0);
    }

    #[test]
    fn dsm_with_zero_noise_is_squared_gradient() {
        let n = net(8, 6);
        let x = PointSet::new(2, vec![0.0, 0.0]).unwrap();
        let z = PointSet::new(2, vec![0.0, 0.0]).unwrap();
        let mut g = [0.0; 2];
        n.energy_and_gradient(&[0.0, 0.0], &mut g);
        let want = g[0] * g[0] + g[1] * g[1];
        assert!((dsm_loss(&n, &x, 0.3, &z).unwrap().value - want).abs() < 1e-15);
    }

    #[test]
    fn dsm_ignores_output_bias() {
        let b = batch();
        let z = denoising_noise(3, 2, 1, 0);
        let mut n = net(8, 7);
        let before = dsm_loss(&n, &b, 0.3, &z).unwrap();
        let bias = n.output_bias_index();
        n.params_mut()[bias] += 3.7;
        let after = dsm_loss(&n, &b, 0.3, &z).unwrap();
        assert_eq!(before.value, after.value);
        assert_eq!(before.grad[bias], 0.0);
    }

    #[test]
    fn zero_steps_leave_parameters_alone() {
        let ds = EmpiricalDataset::new(batch()).unwrap();
        let t = KdeTarget::new(&ds, 0.5).unwrap();
        let mut n = net(8, 1);
        let before = n.clone();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let r = train(&mut n, &t, &cfg).unwrap();
        assert_eq!(n, before);
        assert!(r.loss_curve.is_empty());
        assert_eq!(r.initial_probe_mse, r.final_probe_mse);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let ds = EmpiricalDataset::new(batch()).unwrap();
        let t = KdeTarget::new(&ds, 0.5).unwrap();
        let mut n = net(8, 1);
        let cfg = TrainConfig { steps: 50, learning_rate: 1e4, batch_size: 8, ..Default::default() };
        match train(&mut n, &t, &cfg) {
            Err(Error::Divergence { step, .. }) => assert!(step < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
