//! The in-context transformer.
//!
//! Every trajectory point `(x_i, y_i)` becomes one token
//! `enc_x(x_i) + enc_y(y_i)`; every query becomes `enc_x(x) + enc_pref(λ)`.
//! Inputs are zero-padded to fixed widths and scaled by `K/k`, there are no
//! positional encodings, trajectory tokens attend to each other and queries
//! attend to trajectory tokens only. The head emits logits over the bins of
//! a [`RiemannSupport`].

mod checkpoint;
mod inference;
mod network;
mod params;
mod riemann;
pub mod tensor;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalarize::Preference;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_MAGIC};
pub use inference::Context;
pub use network::{batch_mean_loss, forward, forward_logits, forward_with_mask, loss_and_grad, BatchLoss, ForwardCache};
pub use params::{Layout, Params, TensorSpec};
pub use riemann::{build_riemann_support, cross_entropy_loss, HistogramStats, PosteriorHistogram, RiemannSupport};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub ff_hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_bins: usize,
    /// Widest feature vector the encoder accepts (`K_x`).
    pub max_features: usize,
    /// Widest objective or preference vector the encoder accepts (`K_y`).
    pub max_objectives: usize,
    /// Longest training sample (trajectory plus queries).
    pub max_sample_len: usize,
}

impl ModelConfig {
    /// Desk-scale default.
    pub const TOY: Self = Self {
        embed_dim: 128,
        ff_hidden_dim: 256,
        n_heads: 4,
        n_layers: 4,
        n_bins: 256,
        max_features: 8,
        max_objectives: 3,
        max_sample_len: 64,
    };

    /// The full-size architecture (26.8M parameters).
    pub const FULL: Self = Self {
        embed_dim: 512,
        ff_hidden_dim: 1024,
        n_heads: 4,
        n_layers: 12,
        n_bins: 1000,
        max_features: 30,
        max_objectives: 6,
        max_sample_len: 128,
    };

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("model config: {msg}")));
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad("embed_dim must be a positive multiple of n_heads");
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2");
        }
        if self.max_features == 0 || self.max_objectives == 0 {
            return bad("encoder widths must be positive");
        }
        if self.max_sample_len < 2 || self.ff_hidden_dim == 0 {
            return bad("max_sample_len must be at least 2 and ff_hidden_dim positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// One prompt: a trajectory and the queries to predict. Matrices are
/// row-major with `d` feature and `m` objective columns; `query_pref` holds
/// one preference per query.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub d: usize,
    pub m: usize,
    pub traj_x: Vec<f64>,
    pub traj_y: Vec<f64>,
    pub query_x: Vec<f64>,
    pub query_pref: Vec<f64>,
}

impl Episode {
    pub fn n(&self) -> usize {
        self.traj_x.len() / self.d
    }

    pub fn n_query(&self) -> usize {
        self.query_x.len() / self.d
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.d == 0 || self.d > cfg.max_features {
            return Err(Error::Dimension { what: "features", got: self.d, max: cfg.max_features });
        }
        if self.m == 0 || self.m > cfg.max_objectives {
            return Err(Error::Dimension { what: "objectives", got: self.m, max: cfg.max_objectives });
        }
        let (n, q) = (self.n(), self.n_query());
        if self.traj_x.len() != n * self.d
            || self.traj_y.len() != n * self.m
            || self.query_x.len() != q * self.d
            || self.query_pref.len() != q * self.m
        {
            return Err(Error::Shape("episode matrices disagree on row counts".into()));
        }
        if n == 0 {
            return Err(Error::EmptyTrajectory);
        }
        if n >= cfg.max_sample_len {
            return Err(Error::Dimension { what: "trajectory length", got: n, max: cfg.max_sample_len - 1 });
        }
        Ok(())
    }
}

/// Zero-pads `v` to width `max` and scales it by `max / v.len()`, so that
/// encodings have comparable magnitude whatever the true dimension.
pub fn pad_and_scale(v: &[f64], max: usize) -> Result<Vec<f64>> {
    if v.is_empty() || v.len() > max {
        return Err(Error::Dimension { what: "encoder input", got: v.len(), max });
    }
    let factor = max as f64 / v.len() as f64;
    let mut out = vec![0.0; max];
    for (o, x) in out.iter_mut().zip(v) {
        *o = x * factor;
    }
    Ok(out)
}

/// Which tokens may attend to which: `mask[i * total + j]` is true when
/// token `i` reads token `j`. Trajectory tokens come first.
pub fn build_attention_mask(n_traj: usize, n_query: usize) -> Vec<bool> {
    let total = n_traj + n_query;
    let mut mask = vec![false; total * total];
    for i in 0..total {
        for j in 0..n_traj {
            mask[i * total + j] = true;
        }
    }
    mask
}

/// A trained model ready for inference: `f32` parameters and the shared
/// output support.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: Params<f32>,
    pub support: Arc<RiemannSupport>,
}

impl Model {
    pub fn new(params: Params<f32>, support: RiemannSupport) -> Result<Self> {
        if support.n_bins() != params.config.n_bins {
            return Err(Error::Shape(format!(
                "support has {} bins, model emits {}",
                support.n_bins(),
                params.config.n_bins
            )));
        }
        Ok(Self { params, support: Arc::new(support) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Embedding of a single feature vector through `enc_x`.
    pub fn embed_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.embed(x, self.config().max_features, &self.params.layout.enc_x_w, &self.params.layout.enc_x_b)
    }

    pub fn embed_objectives(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.embed(y, self.config().max_objectives, &self.params.layout.enc_y_w, &self.params.layout.enc_y_b)
    }

    pub fn embed_preference(&self, pref: &Preference) -> Result<Vec<f64>> {
        let l = &self.params.layout;
        self.embed(pref.weights(), self.config().max_objectives, &l.enc_pref_w, &l.enc_pref_b)
    }

    fn embed(&self, v: &[f64], max: usize, w: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> Result<Vec<f64>> {
        let padded = pad_and_scale(v, max)?;
        let e = self.config().embed_dim;
        let (w, b) = (self.params.slice(w), self.params.slice(b));
        Ok((0..e)
            .map(|j| b[j] as f64 + padded.iter().enumerate().map(|(i, x)| x * w[i * e + j] as f64).sum::<f64>())
            .collect())
    }

    /// Runs the trajectory through the network once; the result can score
    /// any number of queries.
    pub fn context(&self, traj_x: &[f64], traj_y: &[f64], d: usize, m: usize) -> Result<Context> {
        Context::build(&self.params, traj_x, traj_y, d, m)
    }

    /// Posterior histograms for `query_x` (row-major, `d` columns), one
    /// preference per query row.
    pub fn predict(&self, ctx: &Context, query_x: &[f64], query_pref: &[f64]) -> Result<Vec<PosteriorHistogram>> {
        let logits = ctx.logits(&self.params, query_x, query_pref)?;
        let b = self.config().n_bins;
        Ok(logits
            .chunks_exact(b)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| *v as f64).collect();
                PosteriorHistogram::from_logits(self.support.clone(), &row)
            })
            .collect())
    }

    /// Single-query convenience wrapper around [`Model::context`] and
    /// [`Model::predict`].
    pub fn predict_posterior(
        &self,
        traj_x: &[f64],
        traj_y: &[f64],
        d: usize,
        m: usize,
        query_x: &[f64],
        pref: &Preference,
    ) -> Result<PosteriorHistogram> {
        if pref.dim() != m {
            return Err(Error::DimensionMismatch { expected: m, got: pref.dim() });
        }
        let ctx = self.context(traj_x, traj_y, d, m)?;
        Ok(self.predict(&ctx, query_x, pref.weights())?.remove(0))
    }

    /// Logits for a batch of episodes through the training code path.
    pub fn batch_logits(&self, episodes: &[Episode]) -> Result<Vec<Vec<f32>>> {
        network::forward_logits(&self.params, episodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_scale_examples() {
        assert_eq!(pad_and_scale(&[0.1, 0.2], 2).unwrap(), vec![0.1, 0.2]);
        assert_eq!(pad_and_scale(&[0.1, 0.2], 4).unwrap(), vec![0.2, 0.4, 0.0, 0.0]);
        assert!(matches!(pad_and_scale(&[0.0; 5], 4), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mask_for_two_trajectory_points_and_one_query() {
        let mask = build_attention_mask(2, 1);
        assert_eq!(mask, vec![true, true, false, true, true, false, true, true, false]);
    }

    #[test]
    fn toy_config_is_valid() {
        ModelConfig::TOY.validate().unwrap();
        ModelConfig::FULL.validate().unwrap();
        let bad = ModelConfig { n_heads: 3, ..ModelConfig::TOY };
        assert!(bad.validate().is_err());
    }
}
