//! Plain SGD with per-attribute learning rates and adaptive density control.

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{backward, upstream_from_power, GradConfig, GradientBuffer, Upstream};
use crate::io::{Dataset, Sample, SceneCheckpoint, Split, Target};
use crate::loss::{
    complex_metrics, metrics, power_dbm, scalar_loss, spectrum_loss, LossWeights, Metrics, ScalarTarget,
};
use crate::render::RenderPlan;
use crate::scene::{cube_init, logistic, Bounds, InitConfig, RFScene, SceneSetup};
use crate::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_rho: f64,
    pub lr_psi: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_mean_start: f64,
    pub lr_mean_end: f64,
    /// Mean-gradient threshold for densification.
    pub eps_mean: f64,
    /// Radius separating clones from splits.
    pub eps_radius: f64,
    /// Transmittance magnitude below which primitives are pruned.
    pub eps_rho: f64,
    pub densify_every: usize,
    pub prune_every: usize,
    pub split_factor: f64,
    /// Decay of the mean-gradient moving average.
    pub ema_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub init: InitConfig,
    pub cube_edge: f64,
    /// Scene box for cube initialization; half-extent around the receiver.
    pub half_extent: f64,
    /// Checkpoint period in iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub direction_chain: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr_rho: 0.01,
            lr_psi: 0.0025,
            lr_scale: 0.01,
            lr_rotation: 0.005,
            lr_mean_start: 1.6e-4,
            lr_mean_end: 1.6e-6,
            eps_mean: 2e-4,
            eps_radius: 10.0,
            eps_rho: 0.004,
            densify_every: 100,
            prune_every: 100,
            split_factor: 1.6,
            ema_decay: 0.9,
            lambda1: 0.2,
            lambda2: 0.2,
            init: InitConfig::default(),
            cube_edge: 1.0,
            half_extent: 4.0,
            checkpoint_every: 0,
            direction_chain: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_rho", self.lr_rho),
            ("lr_psi", self.lr_psi),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("lr_mean_start", self.lr_mean_start),
            ("lr_mean_end", self.lr_mean_end),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        self.weights().validate()?;
        if self.densify_every == 0 || self.prune_every == 0 {
            return Err(Error::Config("densify_every and prune_every must be positive".into()));
        }
        if !(self.split_factor > 1.0) {
            return Err(Error::Config(format!(
                "split_factor {} must exceed 1",
                self.split_factor
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay {} must lie in [0, 1)",
                self.ema_decay
            )));
        }
        if !(self.cube_edge > 0.0 && self.half_extent > 0.0) {
            return Err(Error::Config("cube_edge and half_extent must be positive".into()));
        }
        Ok(())
    }

    /// Mean learning rate, decaying geometrically from start to end.
    pub fn lr_mean(&self, iter: usize) -> f64 {
        if self.iterations == 0 {
            return self.lr_mean_start;
        }
        let f = iter as f64 / self.iterations as f64;
        self.lr_mean_start * (self.lr_mean_end / self.lr_mean_start).powf(f)
    }

    /// Density control runs on multiples of `every` inside the first half.
    pub fn scheduled(&self, iter: usize, every: usize) -> bool {
        iter > 0 && iter.is_multiple_of(every) && iter < self.iterations / 2
    }
}

/// One gradient step on every attribute.
pub fn sgd_step(scene: &mut RFScene, grads: &GradientBuffer, iter: usize, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != scene.len() {
        return Err(Error::shape(scene.len(), grads.len()));
    }
    grads.check_finite()?;
    let lr_mean = cfg.lr_mean(iter);
    for (p, g) in scene.primitives.iter_mut().zip(&grads.grads) {
        p.mean -= g.mean * lr_mean;
        for (q, d) in p.rotation.iter_mut().zip(&g.rotation) {
            *q -= cfg.lr_rotation * d;
        }
        p.normalize_rotation();
        p.log_scale -= g.log_scale * cfg.lr_scale;
        p.trans_mag_raw -= cfg.lr_rho * g.trans_mag_raw;
        p.trans_phase -= cfg.lr_rho * g.trans_phase;
        for (c, d) in p.coeffs.iter_mut().zip(&g.coeffs) {
            *c -= d * cfg.lr_psi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    /// Indices (before densification) of cloned primitives.
    pub cloned: Vec<usize>,
    /// Indices (before densification) of split primitives.
    pub split: Vec<usize>,
}

/// Average of the covariance diagonal.
pub fn primitive_radius(p: &crate::scene::GaussianPrimitive) -> f64 {
    p.covariance().trace() / 3.0
}

/// Clone small and split large primitives whose averaged mean gradient
/// exceeds the threshold. Survivors keep their order; new primitives are
/// appended in parent order.
pub fn densify(
    scene: &mut RFScene,
    mean_grad_avg: &[f64],
    mean_grads: &[Vec3],
    lr_mean: f64,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<DensifyReport> {
    if mean_grad_avg.len() != scene.len() || mean_grads.len() != scene.len() {
        return Err(Error::shape(scene.len(), mean_grad_avg.len()));
    }
    let mut report = DensifyReport::default();
    let mut kept = Vec::with_capacity(scene.len());
    let mut added = Vec::new();
    let shrink = cfg.split_factor.ln();
    for (i, p) in scene.primitives.drain(..).enumerate() {
        if !(mean_grad_avg[i] > cfg.eps_mean) {
            kept.push(p);
            continue;
        }
        if primitive_radius(&p) <= cfg.eps_radius {
            let mut copy = p.clone();
            copy.mean -= mean_grads[i] * lr_mean;
            report.cloned.push(i);
            kept.push(p);
            added.push(copy);
        } else {
            let r = p.rotation_matrix();
            let s = p.scales();
            for _ in 0..2 {
                let z = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let mut child = p.clone();
                child.mean = p.mean + r * s.component_mul(&z);
                child.log_scale = p.log_scale.add_scalar(-shrink);
                added.push(child);
            }
            report.split.push(i);
        }
    }
    kept.extend(added);
    scene.primitives = kept;
    Ok(report)
}

/// Remove primitives with `|rho|` strictly below the threshold; returns the
/// removed indices.
pub fn prune(scene: &mut RFScene, eps_rho: f64) -> Vec<usize> {
    let removed: Vec<usize> = scene
        .primitives
        .iter()
        .enumerate()
        .filter(|(_, p)| logistic(p.trans_mag_raw) < eps_rho)
        .map(|(i, _)| i)
        .collect();
    if !removed.is_empty() {
        let mut i = 0;
        scene.primitives.retain(|_| {
            let keep = removed.binary_search(&i).is_err();
            i += 1;
            keep
        });
        if scene.is_empty() {
            log::warn!("pruning removed every primitive; the scene now renders zero");
        }
    }
    removed
}

/// Loss of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub fourier: f64,
    pub primitives: usize,
}

pub const TRACE_HEADER: &str = "iter,total,l1,ssim,fourier,primitives";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.iter, self.total, self.l1, self.ssim, self.fourier, self.primitives
        )
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Background writer that owns checkpoint snapshots.
pub struct CheckpointWriter {
    sender: Option<mpsc::Sender<(PathBuf, SceneCheckpoint)>>,
    handle: Option<JoinHandle<Result<()>>>,
    dir: PathBuf,
}

impl CheckpointWriter {
    pub fn spawn(dir: &Path) -> Self {
        let (sender, receiver) = mpsc::channel::<(PathBuf, SceneCheckpoint)>();
        let handle = std::thread::spawn(move || {
            for (path, ckpt) in receiver {
                ckpt.save(&path)?;
            }
            Ok(())
        });
        Self {
            sender: Some(sender),
            handle: Some(handle),
            dir: dir.to_path_buf(),
        }
    }

    pub fn path_for(dir: &Path, iteration: usize) -> PathBuf {
        dir.join(format!("checkpoint_{iteration:08}.json"))
    }

    pub fn submit(&self, checkpoint: SceneCheckpoint) -> Result<()> {
        let path = Self::path_for(&self.dir, checkpoint.iteration);
        self.sender
            .as_ref()
            .and_then(|s| s.send((path, checkpoint)).ok())
            .ok_or_else(|| Error::Data("checkpoint writer stopped".into()))
    }

    /// Flush pending writes and surface the first error.
    pub fn finish(mut self) -> Result<()> {
        self.sender.take();
        match self.handle.take().map(JoinHandle::join) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Data("checkpoint writer panicked".into())),
            None => Ok(()),
        }
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        self.sender.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Totals over a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainSummary {
    pub trace: Vec<TraceRow>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Scene, grid and setup for a dataset, initialized on a cube lattice.
pub fn initial_scene(data: &Dataset, cfg: &TrainConfig) -> Result<RFScene> {
    let setup = SceneSetup {
        rx: data.rx,
        carrier_freq: data.carrier_freq,
        grid: data.grid,
        ..SceneSetup::default()
    };
    let h = Vec3::repeat(cfg.half_extent);
    let bounds = Bounds::new(data.rx - h, data.rx + h)?;
    let init = InitConfig {
        channels: data.channels,
        ..cfg.init.clone()
    };
    cube_init(&bounds, cfg.cube_edge, &init, &setup)
}

fn check_compatible(scene: &RFScene, data: &Dataset) -> Result<()> {
    if scene.channels != data.channels {
        return Err(Error::Config(format!(
            "scene has {} radiance channels, {} dataset needs {}",
            scene.channels,
            data.mode.name(),
            data.channels
        )));
    }
    if scene.grid != data.grid {
        return Err(Error::Config(format!(
            "scene grid {:?} differs from dataset grid {:?}",
            scene.grid, data.grid
        )));
    }
    Ok(())
}

/// Forward, loss and upstream gradient for one sample.
fn sample_loss(plan: &RenderPlan, sample: &Sample, weights: &LossWeights) -> Result<(TraceRow, Upstream)> {
    let frame = plan.render();
    let row = |total, l1, ssim, fourier| TraceRow {
        iter: 0,
        total,
        l1,
        ssim,
        fourier,
        primitives: 0,
    };
    match &sample.target {
        Target::Spectrum(gt) => {
            let r = spectrum_loss(&frame.power(), gt, weights)?;
            let up = upstream_from_power(&frame, &r.grad)?;
            Ok((row(r.total, r.l1, r.ssim, r.fourier), up))
        }
        Target::Rssi(dbm) => {
            let (v, g) = scalar_loss(&frame.coherent_sum(), &ScalarTarget::RealPower(*dbm))?;
            Ok((row(v, v, 0.0, 0.0), Upstream::uniform(frame.n_az, frame.n_el, &g)))
        }
        Target::Csi(gt) => {
            let (v, g) = scalar_loss(&frame.coherent_sum(), &ScalarTarget::Complex(gt.clone()))?;
            Ok((row(v, 0.0, 0.0, 0.0), Upstream::uniform(frame.n_az, frame.n_el, &g)))
        }
    }
}

/// Loss of one sample without a backward pass.
pub fn evaluate_loss(scene: &RFScene, sample: &Sample, weights: &LossWeights) -> Result<f64> {
    let plan = RenderPlan::new(scene, &sample.tx)?;
    Ok(sample_loss(&plan, sample, weights)?.0.total)
}

/// Run `cfg.iterations` single-sample SGD steps over the training split.
pub fn train_loop(
    scene: &mut RFScene,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoints: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    data.validate()?;
    check_compatible(scene, data)?;
    let train: Vec<&Sample> = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidInput("dataset has no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = cfg.weights();
    let grad_cfg = GradConfig {
        direction_chain: cfg.direction_chain,
    };
    let writer = match checkpoints {
        Some(dir) if cfg.checkpoint_every > 0 => Some(CheckpointWriter::spawn(dir)),
        _ => None,
    };
    let mut summary = TrainSummary::default();
    let mut ema = vec![0.0; scene.len()];
    for iter in 0..cfg.iterations {
        let sample = train[rng.random_range(0..train.len())];
        let plan = RenderPlan::new(scene, &sample.tx)?;
        let (mut row, up) = sample_loss(&plan, sample, &weights)?;
        let grads = backward(scene, &plan, &up, &grad_cfg)?;
        drop(plan);
        sgd_step(scene, &grads, iter, cfg)?;
        for (e, g) in ema.iter_mut().zip(&grads.grads) {
            *e = cfg.ema_decay * *e + (1.0 - cfg.ema_decay) * g.mean.norm();
        }
        if cfg.scheduled(iter, cfg.densify_every) {
            let mean_grads: Vec<Vec3> = grads.grads.iter().map(|g| g.mean).collect();
            let r = densify(scene, &ema, &mean_grads, cfg.lr_mean(iter), cfg, &mut rng)?;
            summary.cloned += r.cloned.len();
            summary.split += r.split.len();
            ema = vec![0.0; scene.len()];
        }
        if cfg.scheduled(iter, cfg.prune_every) {
            let removed = prune(scene, cfg.eps_rho);
            summary.pruned += removed.len();
            let mut i = 0;
            ema.retain(|_| {
                let keep = removed.binary_search(&i).is_err();
                i += 1;
                keep
            });
        }
        row.iter = iter;
        row.primitives = scene.len();
        summary.trace.push(row);
        if let Some(w) = &writer {
            if (iter + 1) % cfg.checkpoint_every == 0 {
                w.submit(SceneCheckpoint::new(iter + 1, cfg, scene))?;
            }
        }
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: Vec<SampleMetrics>,
    /// Mean of each metric over samples; `None` for an empty split.
    pub aggregate: Option<Metrics>,
}

/// Metrics of every sample in a split. Spectra compare power per cell, RSSI
/// compares dBm, CSI compares complex channel values. Infinite scores are
/// capped so the report stays valid JSON.
pub fn evaluate(scene: &RFScene, data: &Dataset, split: Split) -> Result<EvalReport> {
    check_compatible(scene, data)?;
    let mut samples = Vec::new();
    for s in data.split(split) {
        let frame = RenderPlan::new(scene, &s.tx)?.render();
        let m = match &s.target {
            Target::Spectrum(gt) => metrics(&frame.power().data, &gt.data)?,
            Target::Rssi(dbm) => metrics(&[power_dbm(frame.coherent_sum()[0])], &[*dbm])?,
            Target::Csi(gt) => complex_metrics(&frame.coherent_sum(), gt)?,
        };
        samples.push(SampleMetrics {
            id: s.id.clone(),
            metrics: m.capped(),
        });
    }
    let aggregate = (!samples.is_empty()).then(|| {
        let n = samples.len() as f64;
        let mean = |f: fn(&Metrics) -> f64| samples.iter().map(|s| f(&s.metrics)).sum::<f64>() / n;
        Metrics {
            mse: mean(|m| m.mse),
            psnr: mean(|m| m.psnr),
            snr: mean(|m| m.snr),
        }
    });
    Ok(EvalReport {
        split,
        samples,
        aggregate,
    })
}
