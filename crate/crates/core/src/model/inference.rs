//! Inference with a cached context.
//!
//! Trajectory tokens never attend to queries, so their per-layer keys and
//! values depend on the trajectory alone. They are computed once; each query
//! then costs one pass through the layers against those cached keys.

use super::network::{embed_inputs, embed_tokens, layer_forward, linear, linear_residual, LayerCache};
use super::params::Params;
use super::pad_and_scale;
use super::tensor::{add_bias, gelu, gemm, layer_norm, softmax_in_place, Scalar, View, ViewMut};
use super::Episode;
use crate::error::{Error, Result};

/// Queries evaluated per block, bounding scratch memory.
const QUERY_BLOCK: usize = 512;

/// Per-layer keys and values of an encoded trajectory.
#[derive(Debug, Clone)]
pub struct Context<T = f32> {
    d: usize,
    m: usize,
    n: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> Context<T> {
    /// Encodes a trajectory (`n × d` inputs, `n × m` normalized outcomes).
    pub fn build(params: &Params<T>, traj_x: &[f64], traj_y: &[f64], d: usize, m: usize) -> Result<Self> {
        let episode = Episode {
            d,
            m,
            traj_x: traj_x.to_vec(),
            traj_y: traj_y.to_vec(),
            query_x: Vec::new(),
            query_pref: Vec::new(),
        };
        let e = params.config.embed_dim;
        let (segments, xin, yin, pin, _) = embed_inputs(params, std::slice::from_ref(&episode))?;
        let n = episode.n();
        let mut x = embed_tokens(params, &segments, &xin, &yin, &pin);
        let mut keys = Vec::with_capacity(params.config.n_layers);
        let mut values = Vec::with_capacity(params.config.n_layers);
        for slots in &params.layout.layers {
            let mut cache = LayerCache::default();
            layer_forward(params, slots, &segments, n, &mut x, &mut cache);
            let (mut k, mut v) = (Vec::with_capacity(n * e), Vec::with_capacity(n * e));
            for row in cache.qkv.chunks_exact(3 * e) {
                k.extend_from_slice(&row[e..2 * e]);
                v.extend_from_slice(&row[2 * e..]);
            }
            keys.push(k);
            values.push(v);
        }
        Ok(Self { d, m, n, keys, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    /// Logits (`queries × n_bins`, row-major) for `query_x` (`d` columns)
    /// with one preference (`m` columns) per query.
    pub fn logits(&self, params: &Params<T>, query_x: &[f64], query_pref: &[f64]) -> Result<Vec<T>> {
        let q = query_x.len() / self.d;
        if query_x.len() != q * self.d || q == 0 {
            return Err(Error::Shape(format!("query matrix of {} values is not a non-empty multiple of d = {}", query_x.len(), self.d)));
        }
        if query_pref.len() != q * self.m {
            return Err(Error::DimensionMismatch { expected: q * self.m, got: query_pref.len() });
        }
        let mut out = Vec::with_capacity(q * params.config.n_bins);
        for start in (0..q).step_by(QUERY_BLOCK) {
            let end = (start + QUERY_BLOCK).min(q);
            out.extend(self.block(
                params,
                &query_x[start * self.d..end * self.d],
                &query_pref[start * self.m..end * self.m],
                end - start,
            )?);
        }
        Ok(out)
    }

    fn block(&self, params: &Params<T>, query_x: &[f64], query_pref: &[f64], q: usize) -> Result<Vec<T>> {
        let cfg = &params.config;
        let l = &*params.layout;
        let (e, f, heads) = (cfg.embed_dim, cfg.ff_hidden_dim, cfg.n_heads);
        let (kx, ky) = (cfg.max_features, cfg.max_objectives);
        let dh = e / heads;
        let n = self.n;

        let mut xin = Vec::with_capacity(q * kx);
        let mut pin = Vec::with_capacity(q * ky);
        for i in 0..q {
            xin.extend(pad_and_scale(&query_x[i * self.d..(i + 1) * self.d], kx)?.into_iter().map(T::of));
            pin.extend(pad_and_scale(&query_pref[i * self.m..(i + 1) * self.m], ky)?.into_iter().map(T::of));
        }
        let mut x = vec![T::zero(); q * e];
        linear(&xin, q, params.slice(&l.enc_x_w), params.slice(&l.enc_x_b), &mut x);
        linear_residual(&pin, q, params.slice(&l.enc_pref_w), params.slice(&l.enc_pref_b), &mut x);

        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut a = vec![T::zero(); q * e];
        let mut qm = vec![T::zero(); q * e];
        let mut attn = vec![T::zero(); q * e];
        let mut probs = vec![T::zero(); q * n];
        let mut u = vec![T::zero(); q * f];
        for (layer, s) in l.layers.iter().enumerate() {
            layer_norm(&x, params.slice(&s.ln1_g), params.slice(&s.ln1_b), &mut a, None, None);
            let w_q = View::new(params.slice(&s.w_qkv), e, e, 3 * e);
            gemm(T::one(), View::new(&a, q, e, e), w_q, T::zero(), ViewMut::new(&mut qm, q, e, e));
            add_bias(&mut qm, &params.slice(&s.b_qkv)[..e]);
            for h in 0..heads {
                let k = View::new(&self.keys[layer][h * dh..], n, dh, e);
                let v = View::new(&self.values[layer][h * dh..], n, dh, e);
                let qh = View::new(&qm[h * dh..], q, dh, e);
                gemm(scale, qh, k.t(), T::zero(), ViewMut::new(&mut probs, q, n, n));
                probs.chunks_exact_mut(n).for_each(softmax_in_place);
                let out = ViewMut::new(&mut attn[h * dh..], q, dh, e);
                gemm(T::one(), View::new(&probs, q, n, n), v, T::zero(), out);
            }
            linear_residual(&attn, q, params.slice(&s.w_out), params.slice(&s.b_out), &mut x);
            layer_norm(&x, params.slice(&s.ln2_g), params.slice(&s.ln2_b), &mut a, None, None);
            linear(&a, q, params.slice(&s.w1), params.slice(&s.b1), &mut u);
            u.iter_mut().for_each(|v| *v = gelu(*v));
            linear_residual(&u, q, params.slice(&s.w2), params.slice(&s.b2), &mut x);
        }
        layer_norm(&x, params.slice(&l.ln_f_g), params.slice(&l.ln_f_b), &mut a, None, None);
        let mut logits = vec![T::zero(); q * cfg.n_bins];
        linear(&a, q, params.slice(&l.head_w), params.slice(&l.head_b), &mut logits);
        Ok(logits)
    }
}
