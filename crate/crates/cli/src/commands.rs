//! The six subcommands. Each resolves its section against the preset, runs
//! the library routine and writes its outputs into the run directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::info;
use scalar_ebm::compose::{
    alignment_offset, build_composition, gibbs_invariance_check, integrability_guard, raw_mean_offset,
    separation_report, CompositionOp, CompositionSpec, GibbsCheck, GibbsCheckOptions, Operand, SeparationReport,
    DEFAULT_NEGATION_LAMBDA,
};
use scalar_ebm::energy::{load_energy, EnergySpec, TermSource, TermSpec};
use scalar_ebm::energy::{curl_residual, log_partition, min_hessian_eigenvalue, residual_h, HessianBound};
use scalar_ebm::grid::{BoxBounds, Grid};
use scalar_ebm::lyapunov::{stop_scan as run_stop_scan, write_series_csv, BandwidthRule, StopScanConfig, KL_RESOLUTION};
use scalar_ebm::ood::{
    barrier_trace, score_batch, translate, uniform_noise, BarrierMonitor, OodScoreReport, DEFAULT_FLOW_STEPS,
    DEFAULT_FLOW_STEP_SIZE,
};
use scalar_ebm::presets::BenchmarkPreset;
use scalar_ebm::rng::{NoiseStream, Purpose};
use scalar_ebm::sampler::{gaussian_prior, simulate, SamplerConfig, SamplerKind};
use scalar_ebm::target::scott_bandwidth;
use scalar_ebm::training::{self, TrainConfig, TrainReport};
use scalar_ebm::{EmpiricalDataset, EnergyField, KdeTarget, PointSet, ScalarNetEnergy};
use serde::Serialize;

use crate::config::{ExperimentConfig, OodSetSpec, OpName};
use crate::run::RunContext;
use crate::CliError;

const DEFAULT_BOX_HALF_WIDTH: f64 = 8.0;
const DEFAULT_PRIOR_VARIANCE: f64 = 4.0;

fn missing(key: &str) -> CliError {
    CliError::Config(format!("missing `{key}` (no `preset` given)"))
}

/// Reading a user-named input file is a config concern: a bad path or a
/// malformed file exits with the config code.
fn input_error(path: &Path, e: scalar_ebm::Error) -> CliError {
    match e {
        scalar_ebm::Error::Io(io) => CliError::Config(format!("cannot read {}: {io}", path.display())),
        other => CliError::Config(format!("{}: {other}", path.display())),
    }
}

fn load_points(path: &Path) -> Result<PointSet, CliError> {
    Ok(EmpiricalDataset::load(path).map_err(|e| input_error(path, e))?.points().clone())
}

fn dataset(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<EmpiricalDataset, CliError> {
    match (&cfg.dataset, &ctx.preset) {
        (Some(path), _) => EmpiricalDataset::load(path).map_err(|e| input_error(path, e)),
        (None, Some(p)) => Ok(p.dataset(ctx.seed)),
        (None, None) => Err(missing("dataset")),
    }
}

fn energy(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Arc<dyn EnergyField>, CliError> {
    match (&cfg.energy, &ctx.preset) {
        (Some(path), _) => load_energy(path).map_err(|e| input_error(path, e)),
        (None, Some(p)) => Ok(Arc::new(p.generator())),
        (None, None) => Err(missing("energy")),
    }
}

fn cube(d: usize, half_width: f64) -> BoxBounds {
    BoxBounds::cube(d, -half_width, half_width)
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    widths: Vec<usize>,
    bandwidth: f64,
    config: TrainConfig,
    probe_mse_reduction: f64,
}

fn fit(
    data: &EmpiricalDataset,
    widths: Vec<usize>,
    bandwidth: f64,
    tc: &TrainConfig,
) -> Result<(ScalarNetEnergy, TrainReport, TrainSummary), CliError> {
    if widths.first() != Some(&data.dim()) {
        return Err(CliError::Config(format!(
            "`train.widths` must start with the data dimension {}, got {widths:?}",
            data.dim()
        )));
    }
    let target = KdeTarget::new(data, bandwidth)?;
    let mut net = ScalarNetEnergy::init(widths.clone(), tc.seed)?;
    let report = training::train(&mut net, &target, tc)?;
    let summary = TrainSummary {
        widths,
        bandwidth,
        config: tc.clone(),
        probe_mse_reduction: report.initial_probe_mse / report.final_probe_mse,
    };
    info!(
        "probe score MSE {:.4} -> {:.4} ({:.2}x) in {:.1}s",
        report.initial_probe_mse, report.final_probe_mse, summary.probe_mse_reduction, report.wall_clock_seconds
    );
    Ok((net, report, summary))
}

fn write_training(ctx: &RunContext, stem: &str, net: &ScalarNetEnergy, report: &TrainReport, summary: &TrainSummary) -> Result<(), CliError> {
    net.save(&ctx.path(&format!("{stem}.json")))?;
    ctx.write_json(&format!("{stem}_train_report.json"), report)?;
    ctx.write_json(&format!("{stem}_train_summary.json"), summary)?;
    write_rows(
        &ctx.path(&format!("{stem}_loss_curve.csv")),
        "step,loss",
        report.loss_curve.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )
}

pub fn train(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), CliError> {
    let data = dataset(cfg, ctx)?;
    let p = ctx.preset.as_ref();
    let base = p.map(|p| p.train.clone()).unwrap_or_default();
    let s = &cfg.train;
    let tc = TrainConfig {
        loss: s.loss.unwrap_or(base.loss),
        dsm_sigma: s.dsm_sigma.unwrap_or(base.dsm_sigma),
        learning_rate: s.learning_rate.unwrap_or(base.learning_rate),
        steps: s.steps.unwrap_or(base.steps),
        batch_size: s.batch_size.unwrap_or(base.batch_size),
        seed: ctx.seed,
    };
    tc.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
    let bandwidth = s
        .bandwidth
        .or_else(|| p.map(|p| p.bandwidth_for(&data)))
        .unwrap_or_else(|| scott_bandwidth(data.points()));
    let widths = s
        .widths
        .clone()
        .or_else(|| p.map(|p| p.widths.clone()))
        .unwrap_or_else(|| vec![data.dim(), 64, 64, 1]);
    let (net, report, summary) = fit(&data, widths, bandwidth, &tc)?;
    data.save_csv(&ctx.path("dataset.csv"))?;
    write_training(ctx, "energy", &net, &report, &summary)
}

pub fn sample(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), CliError> {
    let field = energy(cfg, ctx)?;
    let s = &cfg.sample;
    let def = SamplerConfig::default();
    let sc = SamplerConfig {
        kind: s.kind.unwrap_or(def.kind),
        step_size: s.step_size.unwrap_or(def.step_size),
        steps: s.steps.unwrap_or(def.steps),
        snapshot_stride: s.snapshot_stride.unwrap_or(def.snapshot_stride),
        seed: ctx.seed,
        lipschitz: s.lipschitz,
    };
    sc.validate().map_err(|e| CliError::Config(format!("sample: {e}")))?;
    let variance = s
        .prior_variance
        .or(ctx.preset.as_ref().map(|p| p.prior_variance))
        .unwrap_or(DEFAULT_PRIOR_VARIANCE);
    let init = gaussian_prior(s.particles.unwrap_or(5000), field.dim(), variance, ctx.seed);
    let log = simulate(&init, &*field, &sc)?;
    log.write_dir(&ctx.path("trajectory"))?;
    write_rows(
        &ctx.path("step_stats.csv"),
        "step,mean_energy,mean_grad2",
        log.mean_energy.iter().zip(&log.mean_grad2).enumerate().map(|(k, (u, g))| format!("{k},{u},{g}")),
    )
}

pub fn stop_scan(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), CliError> {
    let field = energy(cfg, ctx)?;
    let p = ctx.preset.as_ref();
    let s = &cfg.stop_scan;
    let half_width = s.box_half_width.or(p.map(|p| p.box_half_width)).unwrap_or(DEFAULT_BOX_HALF_WIDTH);
    let mut sc = StopScanConfig::new(cube(field.dim(), half_width));
    sc.step_size = s.step_size.unwrap_or(sc.step_size);
    sc.steps = s.steps.unwrap_or(sc.steps);
    sc.snapshot_stride = s.snapshot_stride.unwrap_or(sc.snapshot_stride);
    sc.particles = s.particles.unwrap_or(sc.particles);
    sc.prior_variance = s.prior_variance.or(p.map(|p| p.prior_variance)).unwrap_or(sc.prior_variance);
    sc.kl_bandwidth = s.kl_bandwidth.or(p.map(|p| p.kl_bandwidth)).unwrap_or(BandwidthRule::Scott);
    sc.epsilon = s.epsilon.unwrap_or(sc.epsilon);
    sc.seed = ctx.seed;
    if sc.snapshot_stride > sc.steps || sc.snapshot_stride == 0 {
        return Err(CliError::Config(format!(
            "`stop_scan.snapshot_stride` must lie in 1..={}, got {}",
            sc.steps, sc.snapshot_stride
        )));
    }
    let scan = run_stop_scan(&*field, &sc)?;
    let r = &scan.report;
    match &r.tau_det {
        Some(c) => info!("tau_det at step {:.1} (t = {:.3}); KL minimum at step {}", c.step, c.time, r.kl_argmin_step),
        None => info!("no R = 1 crossing; KL minimum at step {}", r.kl_argmin_step),
    }
    r.write_json(&ctx.path("stopping_report.json"))?;
    write_series_csv(&r.deterministic, &ctx.path("functionals_deterministic.csv"))?;
    write_series_csv(&r.langevin, &ctx.path("functionals_langevin.csv"))?;
    if s.write_snapshots.unwrap_or(true) {
        scan.deterministic.write_dir(&ctx.path("trajectory_deterministic"))?;
        scan.langevin.write_dir(&ctx.path("trajectory_langevin"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ComposeReport {
    op: CompositionOp,
    operands: Vec<String>,
    coefficients: Vec<f64>,
    boundary_ratio: f64,
    samples: usize,
    steps: usize,
    step_size: f64,
    separation: Option<SeparationReport>,
    alignment_offset: Option<f64>,
    raw_mean_offset: Option<f64>,
    max_curl: f64,
    gibbs_check: Option<GibbsCheck>,
}

fn composition_op(s: &crate::config::ComposeSection) -> Result<CompositionOp, CliError> {
    let name = s.op.unwrap_or(OpName::Negation);
    if s.lambda.is_some() && name != OpName::Negation {
        return Err(CliError::Config("`compose.lambda` only applies to negation".into()));
    }
    if s.coefficients.is_some() && name != OpName::Additive {
        return Err(CliError::Config("`compose.coefficients` only applies to additive".into()));
    }
    Ok(match name {
        OpName::Conjunction => CompositionOp::Conjunction,
        OpName::Disjunction => CompositionOp::Disjunction,
        OpName::Negation => CompositionOp::Negation { lambda: s.lambda.unwrap_or(DEFAULT_NEGATION_LAMBDA) },
        OpName::Additive => CompositionOp::Additive {
            coefficients: s
                .coefficients
                .clone()
                .ok_or_else(|| CliError::Config("missing `compose.coefficients` for additive".into()))?,
        },
    })
}

fn to_points(rows: &[Vec<f64>], key: &str) -> Result<PointSet, CliError> {
    PointSet::from_rows(rows).map_err(|e| CliError::Config(format!("`{key}`: {e}")))
}

/// Operands with the file each one lives in (relative to the run directory
/// when trained here).
struct Operands {
    list: Vec<(Operand, String)>,
    centers: Option<(PointSet, PointSet)>,
}

fn fig2_centers() -> Result<(PointSet, PointSet), CliError> {
    Ok((
        BenchmarkPreset::by_name("expert_A")?.center_set(),
        BenchmarkPreset::by_name("expert_B")?.center_set(),
    ))
}

fn compose_operands(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Operands, CliError> {
    let s = &cfg.compose;
    let given_centers = match (&s.centers_a, &s.centers_b) {
        (Some(a), Some(b)) => Some((to_points(a, "compose.centers_a")?, to_points(b, "compose.centers_b")?)),
        (None, None) => None,
        _ => return Err(CliError::Config("give both `compose.centers_a` and `compose.centers_b` or neither".into())),
    };
    if let Some(paths) = &s.operands {
        let mut list = Vec::new();
        for (i, path) in paths.iter().enumerate() {
            let field = load_energy(path).map_err(|e| input_error(path, e))?;
            let abs = std::path::absolute(path)?;
            list.push((Operand::new(format!("operand_{i}"), field), abs.display().to_string()));
        }
        let centers = match given_centers {
            Some(c) => Some(c),
            None if ctx.is_fig2() => Some(fig2_centers()?),
            None => None,
        };
        return Ok(Operands { list, centers });
    }
    if ctx.preset.is_some() {
        return Err(CliError::Config(
            "missing `compose.operands` (only the fig2 preset trains its own operands)".into(),
        ));
    }
    let mut list = Vec::new();
    for (tag, name) in [("A", "expert_A"), ("B", "expert_B")] {
        let p = BenchmarkPreset::by_name(name)?;
        let data = p.dataset(ctx.seed);
        let tc = TrainConfig { seed: ctx.seed, ..p.train.clone() };
        info!("training operand {tag} on the {name} preset");
        let (net, report, summary) = fit(&data, p.widths.clone(), p.bandwidth_for(&data), &tc)?;
        let stem = format!("operand_{tag}");
        write_training(ctx, &stem, &net, &report, &summary)?;
        list.push((Operand::new(tag, Arc::new(net) as Arc<dyn EnergyField>), format!("{stem}.json")));
    }
    Ok(Operands { list, centers: Some(given_centers.map_or_else(fig2_centers, Ok)?) })
}

pub fn compose(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), CliError> {
    let s = &cfg.compose;
    let op = composition_op(s)?;
    let operands = compose_operands(cfg, ctx)?;
    let spec = CompositionSpec { operands: operands.list.iter().map(|(o, _)| o.clone()).collect(), op: op.clone() };
    let field = build_composition(&spec)?;
    let d = field.dim();
    let bounds = cube(d, s.box_half_width.unwrap_or(DEFAULT_BOX_HALF_WIDTH));
    let grid = Grid::new(bounds.clone(), KL_RESOLUTION)?;
    let gibbs = integrability_guard(&field, &grid)?;

    let doc = EnergySpec::Composed {
        mode: field.mode(),
        terms: field
            .coefficients()
            .into_iter()
            .zip(&operands.list)
            .map(|(coefficient, (_, path))| TermSpec { coefficient, energy: TermSource::Path(path.clone()) })
            .collect(),
    };
    doc.save(&ctx.path("composed_energy.json"))?;

    let samples = s.samples.unwrap_or(5000);
    let steps = s.steps.unwrap_or(1000);
    let step_size = s.step_size.unwrap_or(0.01);
    let sc = SamplerConfig { kind: SamplerKind::Langevin, step_size, steps, snapshot_stride: steps.max(1), seed: ctx.seed, lipschitz: None };
    sc.validate().map_err(|e| CliError::Config(format!("compose: {e}")))?;
    let init = gaussian_prior(samples, d, s.prior_variance.unwrap_or(DEFAULT_PRIOR_VARIANCE), ctx.seed);
    let log = simulate(&init, &field, &sc)?;
    let pts = &log.last().points;
    EmpiricalDataset::new(pts.clone())?.save_csv(&ctx.path("samples.csv"))?;

    let separation = match &operands.centers {
        Some((a, b)) => Some(separation_report(pts, a, b, s.radius.unwrap_or(1.5))?),
        None => None,
    };
    let (alignment, raw) = match spec.operands.as_slice() {
        [a, b] if d <= 2 => (
            Some(alignment_offset(&*a.field, &*b.field, &grid)?),
            Some(raw_mean_offset(&*a.field, &*b.field, &grid)?),
        ),
        _ => (None, None),
    };
    let max_curl = if d >= 2 {
        uniform_noise(&bounds, 100, ctx.seed)
            .rows()
            .map(|x| curl_residual(&field, x))
            .try_fold(0.0f64, |m, c| c.map(|c| m.max(c)))?
    } else {
        0.0
    };
    let gibbs_check = match &s.gibbs_check {
        Some(g) => {
            let mut opts = GibbsCheckOptions::new(bounds.clone());
            opts.step_size = step_size;
            Some(gibbs_invariance_check(&field, g.particles, g.steps, ctx.seed, &opts)?)
        }
        None => None,
    };
    if let Some(r) = &separation {
        info!("{} of {} samples near B, {} near A (radius {})", r.near_b, r.total, r.near_a, r.radius);
    }
    let report = ComposeReport {
        op,
        operands: spec.operands.iter().map(|o| o.name.clone()).collect(),
        coefficients: field.coefficients(),
        boundary_ratio: gibbs.boundary_ratio,
        samples,
        steps,
        step_size,
        separation,
        alignment_offset: alignment,
        raw_mean_offset: raw,
        max_curl,
        gibbs_check,
    };
    ctx.write_json("compose_report.json", &report)
}

fn ood_set(
    name: &str,
    spec: &OodSetSpec,
    id: &PointSet,
    preset: Option<&BenchmarkPreset>,
    seed: u64,
) -> Result<PointSet, CliError> {
    let pts = match spec {
        OodSetSpec::Uniform { count } => {
            let (lo, hi): (Vec<f64>, Vec<f64>) = id.bounds().into_iter().unzip();
            uniform_noise(&BoxBounds::new(lo, hi)?, *count, seed)
        }
        OodSetSpec::Shifted { count, shift } => {
            let p = preset.ok_or_else(|| CliError::Config(format!("OOD set `{name}`: shifted sets need a preset")))?;
            let draws = p.generator().sample(*count, NoiseStream::new(seed, Purpose::OodShifted));
            translate(&draws, shift).map_err(|e| CliError::Config(format!("OOD set `{name}`: {e}")))?
        }
        OodSetSpec::File { path } => load_points(path)?,
    };
    if pts.is_empty() {
        return Err(CliError::Config(format!("OOD set `{name}` is empty")));
    }
    Ok(pts)
}

/// Default OOD sets: uniform noise on the data box and the mixture shifted
/// by half the spacing of neighboring ring modes.
fn default_ood_sets(d: usize) -> BTreeMap<String, OodSetSpec> {
    let mut shift = vec![0.0; d];
    shift[0] = 1.5;
    BTreeMap::from([
        ("uniform".to_string(), OodSetSpec::Uniform { count: 2000 }),
        ("shifted".to_string(), OodSetSpec::Shifted { count: 2000, shift }),
    ])
}

pub fn ood(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), CliError> {
    let field = energy(cfg, ctx)?;
    let p = ctx.preset.as_ref();
    let s = &cfg.ood;
    let id = match (&s.id, p) {
        (Some(path), _) => load_points(path)?,
        (None, Some(p)) => p.generator().sample(s.id_count.unwrap_or(2000), NoiseStream::new(ctx.seed, Purpose::HeldOut)),
        (None, None) => return Err(missing("ood.id")),
    };
    if id.is_empty() {
        return Err(CliError::Config("in-distribution set is empty".into()));
    }
    let sets = s.sets.clone().unwrap_or_else(|| default_ood_sets(field.dim()));
    if sets.is_empty() {
        return Err(CliError::Config("`ood.sets` is empty".into()));
    }
    let flow_steps = s.flow_steps.unwrap_or(DEFAULT_FLOW_STEPS);
    let step_size = s.step_size.unwrap_or(DEFAULT_FLOW_STEP_SIZE);
    let log_z = if s.subtract_log_z.unwrap_or(false) {
        let half_width = p.map(|p| p.box_half_width).unwrap_or(DEFAULT_BOX_HALF_WIDTH);
        Some(log_partition(&*field, &cube(field.dim(), half_width), 256)?.value)
    } else {
        None
    };
    let score = |pts: &PointSet| score_batch(&*field, pts, flow_steps, step_size, log_z);
    let id_scores = score(&id)?;
    id_scores.write_csv(&ctx.path("scores_id.csv"))?;
    let mut report = OodScoreReport::new(flow_steps, step_size);
    for (name, spec) in &sets {
        let pts = ood_set(name, spec, &id, p, ctx.seed)?;
        let scores = score(&pts)?;
        scores.write_csv(&ctx.path(&format!("scores_{name}.csv")))?;
        report.add_set(name, &id_scores, &scores)?;
    }
    report.write_json(&ctx.path("auroc.json"))?;
    if let Some(b) = &s.barrier {
        let monitor = BarrierMonitor::new(b.unsafe_set.clone(), b.beta)?;
        let steps = b.steps.unwrap_or(200);
        let sc = SamplerConfig {
            steps,
            snapshot_stride: b.snapshot_stride.unwrap_or(10),
            seed: ctx.seed,
            ..SamplerConfig::default()
        };
        sc.validate().map_err(|e| CliError::Config(format!("ood.barrier: {e}")))?;
        let variance = p.map(|p| p.prior_variance).unwrap_or(DEFAULT_PRIOR_VARIANCE);
        let init = gaussian_prior(b.particles.unwrap_or(5000), field.dim(), variance, ctx.seed);
        let log = simulate(&init, &*field, &sc)?;
        let trace = barrier_trace(&log, &monitor);
        if let Some(t) = trace.first_violation {
            info!("barrier violated first at t = {t}");
        }
        ctx.write_json("barrier.json", &trace)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PointValue {
    point: Vec<f64>,
    residual_h: f64,
}

#[derive(Serialize)]
struct DiagnoseReport {
    modes: Vec<PointValue>,
    radius: f64,
    far: Vec<PointValue>,
    /// `h > 0` at every mode and `h < 0` at every far point.
    sign_change: bool,
    curl_points: usize,
    max_curl: f64,
    min_hessian: HessianBound,
}

/// Points at distance `radius`: a ring in 2D, the axis directions otherwise.
fn far_points(d: usize, radius: f64, count: usize) -> Vec<Vec<f64>> {
    if d == 2 {
        (0..count)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / count as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect()
    } else {
        (0..d)
            .flat_map(|k| {
                [radius, -radius].map(|r| {
                    let mut x = vec![0.0; d];
                    x[k] = r;
                    x
                })
            })
            .collect()
    }
}

pub fn diagnose(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(), CliError> {
    let field = energy(cfg, ctx)?;
    let p = ctx.preset.as_ref();
    let s = &cfg.diagnose;
    let d = field.dim();
    let modes = match (&s.modes, p) {
        (Some(m), _) => m.clone(),
        (None, Some(p)) => p.centers.clone(),
        (None, None) => return Err(missing("diagnose.modes")),
    };
    let eval = |pts: Vec<Vec<f64>>| -> Result<Vec<PointValue>, CliError> {
        pts.into_iter()
            .map(|x| {
                if x.len() != d {
                    return Err(CliError::Config(format!("point {x:?} has dimension {}, energy has {d}", x.len())));
                }
                Ok(PointValue { residual_h: residual_h(&*field, &x)?, point: x })
            })
            .collect()
    };
    let radius = s.radius.unwrap_or(20.0);
    let modes = eval(modes)?;
    let far = eval(far_points(d, radius, s.ring_points.unwrap_or(64)))?;
    let sign_change = modes.iter().all(|m| m.residual_h > 0.0) && far.iter().all(|m| m.residual_h < 0.0);
    let half_width = s.box_half_width.or(p.map(|p| p.box_half_width)).unwrap_or(DEFAULT_BOX_HALF_WIDTH);
    let bounds = cube(d, half_width);
    let probe = Grid::new(bounds.clone(), s.probe_resolution.unwrap_or(64))?.nodes();
    let min_hessian = min_hessian_eigenvalue(&*field, &probe)?;
    let curl_points = if d >= 2 { s.curl_points.unwrap_or(100) } else { 0 };
    let max_curl = uniform_noise(&bounds, curl_points, ctx.seed)
        .rows()
        .map(|x| curl_residual(&*field, x))
        .try_fold(0.0f64, |m, c| c.map(|c| m.max(c)))?;
    info!("residual sign change: {sign_change}; max curl {max_curl:.2e}; min Hessian eigenvalue {:.4}", min_hessian.value);
    let report = DiagnoseReport { modes, radius, far, sign_change, curl_points, max_curl, min_hessian };
    ctx.write_json("diagnose.json", &report)
}
