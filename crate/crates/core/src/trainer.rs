//! Pre-training on synthetic prior batches.
//!
//! Every optimizer step draws a fresh batch from a random stream keyed by
//! `(seed, step)`, so a run resumed from a checkpoint sees exactly the
//! batches the uninterrupted run would have seen.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_riemann_support, load_checkpoint, loss_and_grad, save_checkpoint, Checkpoint, ModelConfig,
    OptimizerState, Params, PosteriorHistogram, RiemannSupport,
};
use crate::prior::{generate_training_batch, PriorConfig, ShapeLimits, TrainingBatch};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;
/// Prior aggregation samples used to place the output bins.
pub const SUPPORT_SAMPLES: usize = 100_000;
/// Size of the seed-pinned held-out task set.
pub const HELDOUT_TASKS: usize = 512;
/// Episodes per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

// Reserved random streams; batch streams use the step index.
const STREAM_INIT: u64 = u64::MAX;
const STREAM_SUPPORT: u64 = u64::MAX - 1;
const STREAM_HELDOUT: u64 = u64::MAX - 2;
const STREAM_BASELINE: u64 = u64::MAX - 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub seed: u64,
    /// Checkpoint every this many epochs (and always at the end).
    pub eval_interval: usize,
    pub limits: ShapeLimits,
}

impl TrainConfig {
    /// 50 epochs × 256 steps × batch 64 on the toy model's shape limits.
    pub fn toy(model: &ModelConfig) -> Self {
        Self {
            batch_size: 64,
            steps_per_epoch: 256,
            epochs: 50,
            warmup_epochs: 2,
            peak_lr: 5e-4,
            seed: 0,
            eval_interval: 5,
            limits: ShapeLimits::from_model(model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("train config: {msg}")));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be below epochs");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive");
        }
        self.limits.validate()
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    fn prior(&self) -> PriorConfig {
        PriorConfig { batch_size: self.batch_size, limits: self.limits }
    }
}

impl ShapeLimits {
    /// The widest tasks a model with this config can read.
    pub fn from_model(model: &ModelConfig) -> Self {
        Self { max_features: model.max_features, max_objectives: model.max_objectives, sample_len: model.max_sample_len }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, peak_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let step_size = (lr / c1) as f32;
        let c2 = c2 as f32;
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / ((*v / c2).sqrt() + ADAM_EPS as f32);
        }
    }
}

/// Rescales `grad` in place so its global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f32], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The batch consumed at optimizer step `step` of a run.
pub fn batch_for_step(config: &TrainConfig, step: u64) -> Result<TrainingBatch> {
    generate_training_batch(&mut stream_rng(config.seed, step), &config.prior())
}

/// Aggregation targets drawn from the prior, for placing bin boundaries.
pub fn sample_prior_targets(limits: &ShapeLimits, count: usize, seed: u64, stream: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, stream);
    let cfg = PriorConfig { batch_size: 32, limits: *limits };
    let mut out = Vec::with_capacity(count + cfg.batch_size * limits.sample_len);
    while out.len() < count {
        let batch = generate_training_batch(&mut rng, &cfg)?;
        out.extend(batch.targets.into_iter().flatten());
    }
    Ok(out)
}

/// Output support built from [`SUPPORT_SAMPLES`] prior targets.
pub fn build_prior_support(config: &TrainConfig, n_bins: usize) -> Result<RiemannSupport> {
    let samples = sample_prior_targets(&config.limits, SUPPORT_SAMPLES, config.seed, STREAM_SUPPORT)?;
    build_riemann_support(&samples, n_bins)
}

/// The fixed held-out task set, identical on every call for a given config.
pub fn heldout_set(config: &TrainConfig) -> Result<TrainingBatch> {
    let cfg = PriorConfig { batch_size: HELDOUT_TASKS, limits: config.limits };
    generate_training_batch(&mut stream_rng(config.seed, STREAM_HELDOUT), &cfg)
}

/// Held-out quality of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub nll: f64,
    /// NLL of the prior-marginal bin-frequency histogram on the same targets.
    pub baseline_nll: f64,
    pub coverage_50: f64,
    pub coverage_90: f64,
    pub n_targets: usize,
}

/// Prior-marginal histogram: bin frequencies of fresh prior targets.
pub fn bin_frequency_baseline(support: &std::sync::Arc<RiemannSupport>, limits: &ShapeLimits, seed: u64) -> Result<PosteriorHistogram> {
    let samples = sample_prior_targets(limits, SUPPORT_SAMPLES, seed, STREAM_BASELINE)?;
    let mut counts = vec![1.0; support.n_bins()];
    for g in &samples {
        counts[support.bin_index(*g)] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    PosteriorHistogram::new(support.clone(), counts.into_iter().map(|c| c / total).collect())
}

/// Mean NLL and central-interval coverage on `tasks`, plus the NLL of
/// `baseline` on the same targets.
pub fn eval_calibration(
    params: &Params<f32>,
    support: &std::sync::Arc<RiemannSupport>,
    tasks: &TrainingBatch,
    baseline: &PosteriorHistogram,
) -> Result<Calibration> {
    let (mut nll, mut base, mut c50, mut c90, mut count) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for (eps, tgts) in tasks.episodes.chunks(EVAL_CHUNK).zip(tasks.targets.chunks(EVAL_CHUNK)) {
        let logits = crate::model::forward_logits(params, eps)?;
        for (rows, ts) in logits.iter().zip(tgts) {
            for (row, &t) in rows.chunks_exact(support.n_bins()).zip(ts) {
                let row: Vec<f64> = row.iter().map(|v| *v as f64).collect();
                let h = PosteriorHistogram::from_logits(support.clone(), &row);
                nll -= h.log_density(t);
                base -= baseline.log_density(t);
                let inside = |p: f64| h.quantile(0.5 - p / 2.0) <= t && t <= h.quantile(0.5 + p / 2.0);
                c50 += inside(0.5) as usize;
                c90 += inside(0.9) as usize;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Shape("evaluation set has no targets".into()));
    }
    let n = count as f64;
    Ok(Calibration { nll: nll / n, baseline_nll: base / n, coverage_50: c50 as f64 / n, coverage_90: c90 as f64 / n, n_targets: count })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub heldout_nll: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "epoch,step,mean_loss,heldout_nll,lr,wall_ms";

impl EpochMetrics {
    fn csv(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.6e},{}", self.epoch, self.step, self.mean_loss, self.heldout_nll, self.lr, self.wall_ms)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub epochs: Vec<EpochMetrics>,
    /// Loss of every optimizer step run in this invocation.
    pub step_losses: Vec<f64>,
    pub final_calibration: Option<Calibration>,
}

/// Where a run writes its files.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    /// When set, periodic checkpoints are also kept as `epoch_NNNN.ckpt`.
    pub history_dir: Option<PathBuf>,
}

impl TrainPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join("model.ckpt"), metrics_csv: dir.join("metrics.csv"), history_dir: None }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() }
}

/// Runs (or resumes) pre-training. With `resume`, parameters, support and
/// optimizer state come from that checkpoint and training continues at the
/// saved step, which must fall on an epoch boundary.
pub fn train(config: &TrainConfig, model: &ModelConfig, paths: &TrainPaths, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    let (mut params, support, mut adam) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.config != *model {
                return Err(Error::Config("checkpoint model config differs from the requested one".into()));
            }
            let opt = ckpt.optimizer.ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "no optimizer state to resume from".into(),
            })?;
            let adam = Adam { step: opt.step, m: opt.first_moment, v: opt.second_moment };
            (ckpt.params, ckpt.support, adam)
        }
        None => {
            let params = Params::<f32>::init(*model, &mut stream_rng(config.seed, STREAM_INIT));
            let support = build_prior_support(config, model.n_bins)?;
            let adam = Adam::new(params.len());
            (params, support, adam)
        }
    };
    let spe = config.steps_per_epoch as u64;
    if spe > 0 && adam.step % spe != 0 {
        return Err(Error::Config(format!("resume step {} is not on an epoch boundary", adam.step)));
    }
    let support = std::sync::Arc::new(support);
    let heldout = heldout_set(config)?;
    let baseline = bin_frequency_baseline(&support, &config.limits, config.seed)?;

    if let Some(dir) = paths.metrics_csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut csv = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.metrics_csv)
        .map_err(|e| io_err(&paths.metrics_csv, e))?;
    if csv.metadata().map_err(|e| io_err(&paths.metrics_csv, e))?.len() == 0 {
        writeln!(csv, "{METRICS_HEADER}").map_err(|e| io_err(&paths.metrics_csv, e))?;
    }

    let save = |params: &Params<f32>, adam: &Adam| {
        let ckpt = Checkpoint {
            params: params.clone(),
            support: (*support).clone(),
            optimizer: Some(OptimizerState { step: adam.step, first_moment: adam.m.clone(), second_moment: adam.v.clone() }),
        };
        save_checkpoint(&paths.checkpoint, &ckpt)
    };

    let total = config.total_steps();
    let warmup = (config.warmup_epochs * config.steps_per_epoch) as u64;
    let start_epoch = adam.step.checked_div(spe).unwrap_or(0) as usize;
    let started = Instant::now();
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut final_calibration = None;
    for epoch in start_epoch..config.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for _ in 0..config.steps_per_epoch {
            let step = adam.step;
            let batch = batch_for_step(config, step)?;
            let mut out = loss_and_grad(&params, &batch.episodes, &batch.targets, &support)?;
            if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Domain(format!("non-finite loss or gradient at step {step}")));
            }
            clip_grad_norm(&mut out.grad, CLIP_NORM);
            lr = lr_schedule(step + 1, total, warmup, config.peak_lr);
            adam.update(&mut params.data, &out.grad, lr);
            sum += out.loss;
            step_losses.push(out.loss);
        }
        let cal = eval_calibration(&params, &support, &heldout, &baseline)?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            step: adam.step,
            mean_loss: if config.steps_per_epoch > 0 { sum / config.steps_per_epoch as f64 } else { f64::NAN },
            heldout_nll: cal.nll,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {} step {} loss {:.4} heldout {:.4} (baseline {:.4}) cov50 {:.3} cov90 {:.3}",
            row.epoch,
            row.step,
            row.mean_loss,
            cal.nll,
            cal.baseline_nll,
            cal.coverage_50,
            cal.coverage_90
        );
        writeln!(csv, "{}", row.csv()).map_err(|e| io_err(&paths.metrics_csv, e))?;
        epochs.push(row);
        final_calibration = Some(cal);
        if (epoch + 1) % config.eval_interval == 0 {
            save(&params, &adam)?;
            if let Some(dir) = &paths.history_dir {
                let snapshot = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                fs::copy(&paths.checkpoint, &snapshot).map_err(|e| io_err(&snapshot, e))?;
            }
        }
    }
    save(&params, &adam)?;
    Ok(TrainOutcome { checkpoint: paths.checkpoint.clone(), metrics_csv: paths.metrics_csv.clone(), epochs, step_losses, final_calibration })
}

/// Held-out evaluation of a saved model with the config's pinned task set.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, config: &TrainConfig) -> Result<Calibration> {
    let support = std::sync::Arc::new(ckpt.support.clone());
    let heldout = heldout_set(config)?;
    let baseline = bin_frequency_baseline(&support, &config.limits, config.seed)?;
    eval_calibration(&ckpt.params, &support, &heldout, &baseline)
}

/// Trailing moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig { embed_dim: 16, ff_hidden_dim: 32, n_heads: 2, n_layers: 1, n_bins: 16, max_features: 2, max_objectives: 2, max_sample_len: 12 }
    }

    fn tiny_train(model: &ModelConfig) -> TrainConfig {
        TrainConfig { batch_size: 8, steps_per_epoch: 6, epochs: 3, warmup_epochs: 1, peak_lr: 3e-3, seed: 5, eval_interval: 1, limits: ShapeLimits::from_model(model) }
    }

    #[test]
    fn schedule_endpoints_and_shape() {
        let (total, warm, peak) = (1000, 100, 1e-3);
        assert_eq!(lr_schedule(0, total, warm, peak), 0.0);
        assert!((lr_schedule(warm, total, warm, peak) - peak).abs() < 1e-15);
        assert!(lr_schedule(total, total, warm, peak).abs() < 1e-12);
        let lrs: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, warm, peak)).collect();
        let argmax = lrs.iter().enumerate().fold(0, |b, (i, v)| if *v > lrs[b] { i } else { b });
        assert_eq!(argmax as u64, warm);
        assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= peak / warm as f64 + 1e-15));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2);
        let mut p = [1.0f32, -1.0];
        adam.update(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = [3.0f32, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
        let mut small = [0.1f32, 0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, [0.1, 0.1]);
    }

    #[test]
    fn zero_steps_saves_the_initialization() {
        let model = tiny_model();
        let cfg = TrainConfig { steps_per_epoch: 0, ..tiny_train(&model) };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &model, &TrainPaths::in_dir(dir.path()), None).unwrap();
        let ckpt = load_checkpoint(&out.checkpoint).unwrap();
        let init = Params::<f32>::init(model, &mut stream_rng(cfg.seed, STREAM_INIT));
        assert_eq!(ckpt.params.data, init.data);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let model = tiny_model();
        let cfg = tiny_train(&model);
        let full_dir = tempfile::tempdir().unwrap();
        let mut paths = TrainPaths::in_dir(full_dir.path());
        paths.history_dir = Some(full_dir.path().to_path_buf());
        let full = train(&cfg, &model, &paths, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let resumed = train(&cfg, &model, &TrainPaths::in_dir(dir.path()), Some(&full_dir.path().join("epoch_0002.ckpt"))).unwrap();
        let tail = &full.step_losses[2 * cfg.steps_per_epoch..];
        assert_eq!(resumed.step_losses.len(), tail.len());
        for (a, b) in resumed.step_losses.iter().zip(tail) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(resumed.epochs[0].epoch, 3);
    }

    #[test]
    fn training_is_reproducible_and_finite() {
        let model = tiny_model();
        let cfg = TrainConfig { epochs: 2, ..tiny_train(&model) };
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let a = train(&cfg, &model, &TrainPaths::in_dir(da.path()), None).unwrap();
        let b = train(&cfg, &model, &TrainPaths::in_dir(db.path()), None).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert!(a.step_losses.iter().all(|l| l.is_finite()));
        let csv = fs::read_to_string(&a.metrics_csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn coverage_of_wider_interval_is_larger() {
        let model = tiny_model();
        let cfg = tiny_train(&model);
        let support = std::sync::Arc::new(build_prior_support(&cfg, model.n_bins).unwrap());
        let params = Params::<f32>::init(model, &mut stream_rng(1, 1));
        let baseline = bin_frequency_baseline(&support, &cfg.limits, cfg.seed).unwrap();
        let cal = eval_calibration(&params, &support, &heldout_set(&cfg).unwrap(), &baseline).unwrap();
        assert!(cal.coverage_90 >= cal.coverage_50);
        // an untrained model predicts nearly uniform bins, close to the marginal
        assert!((cal.nll - cal.baseline_nll).abs() < 0.25, "{cal:?}");
    }
}
