//! Flat parameter storage with a named tensor layout.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Scalar;
use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Where every tensor lives in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub enc_x_w: Range<usize>,
    pub enc_x_b: Range<usize>,
    pub enc_y_w: Range<usize>,
    pub enc_y_b: Range<usize>,
    pub enc_pref_w: Range<usize>,
    pub enc_pref_b: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub ln_f_g: Range<usize>,
    pub ln_f_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let spec = TensorSpec { name: name.into(), shape: shape.to_vec(), offset: self.offset };
        let range = spec.range();
        self.offset = range.end;
        self.tensors.push(spec);
        range
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (e, f) = (cfg.embed_dim, cfg.ff_hidden_dim);
        let mut b = Builder { tensors: Vec::new(), offset: 0 };
        let enc_x_w = b.add("enc_x.w", &[cfg.max_features, e]);
        let enc_x_b = b.add("enc_x.b", &[e]);
        let enc_y_w = b.add("enc_y.w", &[cfg.max_objectives, e]);
        let enc_y_b = b.add("enc_y.b", &[e]);
        let enc_pref_w = b.add("enc_pref.w", &[cfg.max_objectives, e]);
        let enc_pref_b = b.add("enc_pref.b", &[e]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSlots {
                ln1_g: b.add(format!("layers.{l}.ln1.g"), &[e]),
                ln1_b: b.add(format!("layers.{l}.ln1.b"), &[e]),
                w_qkv: b.add(format!("layers.{l}.attn.w_qkv"), &[e, 3 * e]),
                b_qkv: b.add(format!("layers.{l}.attn.b_qkv"), &[3 * e]),
                w_out: b.add(format!("layers.{l}.attn.w_out"), &[e, e]),
                b_out: b.add(format!("layers.{l}.attn.b_out"), &[e]),
                ln2_g: b.add(format!("layers.{l}.ln2.g"), &[e]),
                ln2_b: b.add(format!("layers.{l}.ln2.b"), &[e]),
                w1: b.add(format!("layers.{l}.ff.w1"), &[e, f]),
                b1: b.add(format!("layers.{l}.ff.b1"), &[f]),
                w2: b.add(format!("layers.{l}.ff.w2"), &[f, e]),
                b2: b.add(format!("layers.{l}.ff.b2"), &[e]),
            })
            .collect();
        let ln_f_g = b.add("ln_f.g", &[e]);
        let ln_f_b = b.add("ln_f.b", &[e]);
        let head_w = b.add("head.w", &[e, cfg.n_bins]);
        let head_b = b.add("head.b", &[cfg.n_bins]);
        Self {
            total: b.offset,
            tensors: b.tensors,
            enc_x_w,
            enc_x_b,
            enc_y_w,
            enc_y_b,
            enc_pref_w,
            enc_pref_b,
            layers,
            ln_f_g,
            ln_f_b,
            head_w,
            head_b,
        }
    }
}

/// Model parameters: config, layout and one flat vector.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(config: ModelConfig) -> Self {
        let layout = Arc::new(Layout::new(&config));
        let data = vec![T::zero(); layout.total];
        Self { config, layout, data }
    }

    /// Scaled-normal initialization: weights `N(0, 1/fan_in)`, residual
    /// output projections further shrunk by `1/sqrt(2L)`, a small head,
    /// unit layer-norm gains and zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let residual = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let layout = p.layout.clone();
        for spec in &layout.tensors {
            let name = spec.name.as_str();
            let range = spec.range();
            if name.ends_with(".g") {
                p.data[range].iter_mut().for_each(|v| *v = T::one());
            } else if spec.shape.len() == 2 {
                let fan_in = spec.shape[0] as f64;
                let mut std = 1.0 / fan_in.sqrt();
                if name.ends_with("w_out") || name.ends_with("ff.w2") {
                    std *= residual;
                }
                if name == "head.w" {
                    std *= 0.1;
                }
                let normal = Normal::new(0.0, std).expect("valid std");
                p.data[range].iter_mut().for_each(|v| *v = T::of(normal.sample(rng)));
            }
        }
        p
    }

    pub fn slice(&self, r: &Range<usize>) -> &[T] {
        &self.data[r.clone()]
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { config: self.config, layout: self.layout.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
