//! Synthetic task generation from Gaussian-process priors.
//!
//! Each task samples a shape `(d, m, n)`, draws `m` independent latent
//! functions from a zero-mean RBF GP with per-feature lengthscales, evaluates
//! them on uniform inputs from the unit cube, and splits the points into a
//! trajectory and held-out queries whose Tchebycheff aggregation targets the
//! model learns to predict.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, JitterLadder};
use crate::metrics::ObjectiveBounds;
use crate::model::Episode;
use crate::scalarize::{aggregation_target, sample_preference, Preference, ScalarizationContext};

/// Gamma shape of the lengthscale prior.
pub const LENGTHSCALE_SHAPE: f64 = 3.0;
/// Gamma rate of the lengthscale prior (mean 0.5).
pub const LENGTHSCALE_RATE: f64 = 6.0;
pub const OUTPUT_SCALE: f64 = 1.0;
pub const NOISE_VARIANCE: f64 = 1e-4;
/// Attempts per batch element before a factorization failure is fatal.
pub const MAX_RESAMPLES: usize = 8;

/// Upper limits for sampled task shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeLimits {
    pub max_features: usize,
    pub max_objectives: usize,
    /// Total sample length `N` (trajectory plus queries).
    pub sample_len: usize,
}

impl ShapeLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_features == 0 || self.max_objectives == 0 || self.sample_len < 2 {
            return Err(Error::Config(format!("invalid shape limits {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskShape {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub lengthscales: Vec<f64>,
    pub output_scale: f64,
    pub noise_variance: f64,
}

impl GpHyper {
    pub fn isotropic(d: usize, lengthscale: f64) -> Self {
        Self { lengthscales: vec![lengthscale; d], output_scale: OUTPUT_SCALE, noise_variance: NOISE_VARIANCE }
    }
}

/// One sampled GP world. Matrices are row-major.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub shape: TaskShape,
    pub hypers: Vec<GpHyper>,
    /// `total × d`, every coordinate in `[0, 1]`.
    pub inputs: Vec<f64>,
    /// `total × m`.
    pub observations: Vec<f64>,
}

/// Draws `(d, m, n)`; `n` has weight `1/(N - n)` so that every trajectory
/// size contributes about the same number of query points.
pub fn sample_task_shape<R: Rng + ?Sized>(rng: &mut R, limits: &ShapeLimits) -> TaskShape {
    let total = limits.sample_len;
    let d = rng.random_range(1..=limits.max_features);
    let m = rng.random_range(1..=limits.max_objectives);
    let weights: Vec<f64> = (1..total).map(|n| 1.0 / (total - n) as f64).collect();
    let n = 1 + WeightedIndex::new(&weights).expect("positive weights").sample(rng);
    TaskShape { d, m, n, total }
}

/// Probability of each trajectory length `n = 1..N-1` under the shape prior.
pub fn trajectory_length_probabilities(total: usize) -> Vec<f64> {
    let weights: Vec<f64> = (1..total).map(|n| 1.0 / (total - n) as f64).collect();
    let norm: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / norm).collect()
}

pub fn sample_gp_hyper<R: Rng + ?Sized>(rng: &mut R, d: usize) -> GpHyper {
    let gamma = Gamma::new(LENGTHSCALE_SHAPE, 1.0 / LENGTHSCALE_RATE).expect("valid gamma");
    GpHyper {
        lengthscales: (0..d).map(|_| gamma.sample(rng)).collect(),
        output_scale: OUTPUT_SCALE,
        noise_variance: NOISE_VARIANCE,
    }
}

/// RBF kernel with per-feature lengthscales. `points` is `n × d` row-major.
pub fn rbf_kernel_matrix(points: &[f64], d: usize, hyper: &GpHyper) -> Vec<f64> {
    let n = points.len() / d;
    let scale2 = hyper.output_scale * hyper.output_scale;
    let inv: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / l).collect();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = scale2;
        for j in 0..i {
            let r2: f64 = (0..d)
                .map(|t| {
                    let z = (points[i * d + t] - points[j * d + t]) * inv[t];
                    z * z
                })
                .sum();
            let v = scale2 * (-0.5 * r2).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// One joint draw with covariance `K + noise·I`.
pub fn sample_gp_function_values<R: Rng + ?Sized>(
    points: &[f64],
    d: usize,
    hyper: &GpHyper,
    ladder: JitterLadder,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = points.len() / d;
    let mut k = rbf_kernel_matrix(points, d, hyper);
    for i in 0..n {
        k[i * n + i] += hyper.noise_variance;
    }
    let (l, _) = cholesky_with_jitter(&k, n, ladder)?;
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok((0..n).map(|i| (0..=i).map(|j| l[i * n + j] * z[j]).sum()).collect())
}

/// Samples hyperparameters, inputs and observations for a fixed shape.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, shape: TaskShape) -> Result<SyntheticTask> {
    let TaskShape { d, m, total, .. } = shape;
    let inputs: Vec<f64> = (0..total * d).map(|_| rng.random::<f64>()).collect();
    let mut hypers = Vec::with_capacity(m);
    let mut observations = vec![0.0; total * m];
    for j in 0..m {
        let hyper = sample_gp_hyper(rng, d);
        let values = sample_gp_function_values(&inputs, d, &hyper, JitterLadder::DEFAULT, rng)?;
        for (i, v) in values.into_iter().enumerate() {
            observations[i * m + j] = v;
        }
        hypers.push(hyper);
    }
    Ok(SyntheticTask { shape, hypers, inputs, observations })
}

/// Inputs of the training batch generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub batch_size: usize,
    pub limits: ShapeLimits,
}

/// A batch of prompts with the held-out aggregation target of every query.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub episodes: Vec<Episode>,
    /// One target per query point of the matching episode.
    pub targets: Vec<Vec<f64>>,
}

impl TrainingBatch {
    pub fn query_count(&self) -> usize {
        self.targets.iter().map(Vec::len).sum()
    }
}

/// Turns a sampled task into a prompt: trajectory-only min-max normalization,
/// one preference for the whole episode, targets `g = -s_λ(y)` with the
/// ideal point at the origin.
pub fn task_to_episode(task: &SyntheticTask, pref: &Preference) -> (Episode, Vec<f64>) {
    let TaskShape { d, m, n, total } = task.shape;
    let rows = |i: usize| &task.observations[i * m..(i + 1) * m];
    let bounds = ObjectiveBounds::fit((0..n).map(rows), m);
    let ctx = ScalarizationContext::origin(m);
    let mut traj_y = Vec::with_capacity(n * m);
    for i in 0..n {
        traj_y.extend(bounds.apply(rows(i)));
    }
    let targets: Vec<f64> = (n..total)
        .map(|i| aggregation_target(&bounds.apply(rows(i)), pref, &ctx))
        .collect();
    let n_query = total - n;
    let episode = Episode {
        d,
        m,
        traj_x: task.inputs[..n * d].to_vec(),
        traj_y,
        query_x: task.inputs[n * d..].to_vec(),
        query_pref: pref.weights().repeat(n_query),
    };
    (episode, targets)
}

/// Draws one full training batch. A task whose kernel cannot be factorized is
/// resampled, at most [`MAX_RESAMPLES`] times per element.
pub fn generate_training_batch<R: Rng + ?Sized>(rng: &mut R, config: &PriorConfig) -> Result<TrainingBatch> {
    let mut episodes = Vec::with_capacity(config.batch_size);
    let mut targets = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let mut attempt = 0;
        let task = loop {
            let shape = sample_task_shape(rng, &config.limits);
            match sample_task(rng, shape) {
                Ok(task) => break task,
                Err(e @ Error::Factorization { .. }) => {
                    attempt += 1;
                    if attempt >= MAX_RESAMPLES {
                        return Err(e);
                    }
                    log::debug!("resampling task after factorization failure ({attempt})");
                }
                Err(e) => return Err(e),
            }
        };
        let pref = sample_preference(rng, task.shape.m);
        let (episode, t) = task_to_episode(&task, &pref);
        episodes.push(episode);
        targets.push(t);
    }
    Ok(TrainingBatch { episodes, targets })
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpHeader {
    d: usize,
    m: usize,
    n: usize,
    n_query: usize,
    tensors: Vec<DumpTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpTensor {
    name: String,
    shape: Vec<usize>,
}

/// Writes a batch as length-prefixed records: `u64` record length, `u32`
/// header length, a JSON header naming the tensors and their shapes, then
/// little-endian `f32` data in header order.
pub fn write_batch_dump<W: Write>(mut out: W, batch: &TrainingBatch) -> Result<()> {
    for (ep, targets) in batch.episodes.iter().zip(&batch.targets) {
        let (n, q) = (ep.n(), ep.n_query());
        let tensors: [(&str, Vec<usize>, &[f64]); 5] = [
            ("traj_x", vec![n, ep.d], &ep.traj_x),
            ("traj_y", vec![n, ep.m], &ep.traj_y),
            ("query_x", vec![q, ep.d], &ep.query_x),
            ("query_pref", vec![q, ep.m], &ep.query_pref),
            ("targets", vec![q], targets),
        ];
        let header = DumpHeader {
            d: ep.d,
            m: ep.m,
            n,
            n_query: q,
            tensors: tensors.iter().map(|(name, shape, _)| DumpTensor { name: name.to_string(), shape: shape.clone() }).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = tensors.iter().map(|(_, _, data)| data.len() * 4).sum();
        out.write_all(&((4 + header.len() + payload) as u64).to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for (_, _, data) in tensors {
            for v in data {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads records written by [`write_batch_dump`] until end of input.
pub fn read_batch_dump<Rd: Read>(mut input: Rd) -> Result<TrainingBatch> {
    let mut episodes = Vec::new();
    let mut all_targets = Vec::new();
    loop {
        let mut len = [0u8; 8];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut record = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut record)?;
        let header_len = u32::from_le_bytes(record[..4].try_into().expect("4 bytes")) as usize;
        let header: DumpHeader = serde_json::from_slice(&record[4..4 + header_len])?;
        let mut cursor = 4 + header_len;
        let mut take = |count: usize| -> Result<Vec<f64>> {
            let end = cursor + count * 4;
            let bytes = record
                .get(cursor..end)
                .ok_or_else(|| Error::Shape("truncated batch record".into()))?;
            cursor = end;
            Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
        };
        let (d, m, n, q) = (header.d, header.m, header.n, header.n_query);
        let traj_x = take(n * d)?;
        let traj_y = take(n * m)?;
        let query_x = take(q * d)?;
        let query_pref = take(q * m)?;
        all_targets.push(take(q)?);
        episodes.push(Episode { d, m, traj_x, traj_y, query_x, query_pref });
    }
    Ok(TrainingBatch { episodes, targets: all_targets })
}
