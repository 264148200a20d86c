//! Batched forward and backward passes used for training.
//!
//! All tokens of all episodes are stacked into one `T × E` matrix so that
//! layer norms, projections and feed-forward blocks run as single GEMMs.
//! Attention runs per episode and head; every row of an episode reads the
//! keys of that episode's first `n` (trajectory) rows and nothing else.

use std::ops::Range;

use super::params::{LayerSlots, Params};
use super::tensor::{
    add_bias, add_col_sums, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, softmax_in_place, Scalar, View,
    ViewMut,
};
use super::{pad_and_scale, Episode, RiemannSupport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub start: usize,
    pub n: usize,
    pub q: usize,
    /// Offset of this episode's attention probabilities inside a layer cache.
    pub prob_offset: usize,
}

impl Segment {
    pub(crate) fn rows(&self) -> usize {
        self.n + self.q
    }
}

#[derive(Debug, Default, Clone)]
pub(crate) struct LayerCache<T> {
    a: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    pub qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    c: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    segments: Vec<Segment>,
    tokens: usize,
    xin: Vec<T>,
    yin: Vec<T>,
    pin: Vec<T>,
    layers: Vec<LayerCache<T>>,
    query_rows: Vec<usize>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    hq: Vec<T>,
    /// `queries × n_bins` logits, episodes in order.
    pub logits: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn n_queries(&self) -> usize {
        self.query_rows.len()
    }
}

/// Loss of a batch and its gradient in the parameter layout.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub loss: f64,
    pub grad: Vec<T>,
    pub n_queries: usize,
}

/// Segments, embedded tokens, then the per-token buffers the backward pass reuses.
type Embedded<T> = (Vec<Segment>, Vec<T>, Vec<T>, Vec<T>, Vec<usize>);

pub(crate) fn embed_inputs<T: Scalar>(
    params: &Params<T>,
    episodes: &[Episode],
) -> Result<Embedded<T>> {
    let cfg = &params.config;
    let (kx, ky) = (cfg.max_features, cfg.max_objectives);
    let mut segments = Vec::with_capacity(episodes.len());
    let (mut start, mut prob_offset) = (0, 0);
    for ep in episodes {
        ep.validate(cfg)?;
        let seg = Segment { start, n: ep.n(), q: ep.n_query(), prob_offset };
        start += seg.rows();
        prob_offset += cfg.n_heads * seg.rows() * seg.n;
        segments.push(seg);
    }
    let tokens = start;
    let mut xin = vec![T::zero(); tokens * kx];
    let mut yin = vec![T::zero(); tokens * ky];
    let mut pin = vec![T::zero(); tokens * ky];
    let mut query_rows = Vec::new();
    let put = |dst: &mut [T], src: &[f64], k: usize| -> Result<()> {
        for (o, v) in dst.iter_mut().zip(pad_and_scale(src, k)?) {
            *o = T::of(v);
        }
        Ok(())
    };
    for (ep, seg) in episodes.iter().zip(&segments) {
        let (d, m) = (ep.d, ep.m);
        for i in 0..seg.rows() {
            let row = seg.start + i;
            let xrow = &mut xin[row * kx..(row + 1) * kx];
            if i < seg.n {
                put(xrow, &ep.traj_x[i * d..(i + 1) * d], kx)?;
                put(&mut yin[row * ky..(row + 1) * ky], &ep.traj_y[i * m..(i + 1) * m], ky)?;
            } else {
                let j = i - seg.n;
                put(xrow, &ep.query_x[j * d..(j + 1) * d], kx)?;
                put(&mut pin[row * ky..(row + 1) * ky], &ep.query_pref[j * m..(j + 1) * m], ky)?;
                query_rows.push(row);
            }
        }
    }
    Ok((segments, xin, yin, pin, query_rows))
}

pub(crate) fn attention_forward<T: Scalar>(
    qkv: &[T],
    segments: &[Segment],
    n_heads: usize,
    e: usize,
    probs: &mut [T],
    attn: &mut [T],
) {
    let dh = e / n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    for seg in segments {
        let rows = seg.rows();
        for h in 0..n_heads {
            let base = seg.start * 3 * e + h * dh;
            let q = View::new(&qkv[base..], rows, dh, 3 * e);
            let k = View::new(&qkv[base + e..], seg.n, dh, 3 * e);
            let v = View::new(&qkv[base + 2 * e..], seg.n, dh, 3 * e);
            let off = seg.prob_offset + h * rows * seg.n;
            let p = &mut probs[off..off + rows * seg.n];
            gemm(scale, q, k.t(), T::zero(), ViewMut::new(p, rows, seg.n, seg.n));
            p.chunks_exact_mut(seg.n).for_each(softmax_in_place);
            let out = ViewMut::new(&mut attn[seg.start * e + h * dh..], rows, dh, e);
            gemm(T::one(), View::new(p, rows, seg.n, seg.n), v, T::zero(), out);
        }
    }
}

fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dattn: &[T],
    segments: &[Segment],
    n_heads: usize,
    e: usize,
    dqkv: &mut [T],
) {
    let dh = e / n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut scratch = Vec::new();
    for seg in segments {
        let rows = seg.rows();
        scratch.resize(rows * seg.n, T::zero());
        for h in 0..n_heads {
            let base = seg.start * 3 * e + h * dh;
            let q = View::new(&qkv[base..], rows, dh, 3 * e);
            let k = View::new(&qkv[base + e..], seg.n, dh, 3 * e);
            let v = View::new(&qkv[base + 2 * e..], seg.n, dh, 3 * e);
            let off = seg.prob_offset + h * rows * seg.n;
            let p = View::new(&probs[off..off + rows * seg.n], rows, seg.n, seg.n);
            let dout = View::new(&dattn[seg.start * e + h * dh..], rows, dh, e);
            gemm(T::one(), dout, v.t(), T::zero(), ViewMut::new(&mut scratch, rows, seg.n, seg.n));
            gemm(T::one(), p.t(), dout, T::zero(), ViewMut::new(&mut dqkv[base + 2 * e..], seg.n, dh, 3 * e));
            for (ds, pr) in scratch.chunks_exact_mut(seg.n).zip(p.data.chunks_exact(seg.n)) {
                let dot = ds.iter().zip(pr).fold(T::zero(), |a, (d, p)| a + *d * *p);
                for (d, p) in ds.iter_mut().zip(pr) {
                    *d = *p * (*d - dot);
                }
            }
            let ds = View::new(&scratch, rows, seg.n, seg.n);
            gemm(scale, ds, k, T::zero(), ViewMut::new(&mut dqkv[base..], rows, dh, 3 * e));
            gemm(scale, ds.t(), q, T::zero(), ViewMut::new(&mut dqkv[base + e..], seg.n, dh, 3 * e));
        }
    }
}

/// `out = x·W + b` for a `rows × k` input and a `k × cols` weight.
pub(crate) fn linear<T: Scalar>(x: &[T], rows: usize, w: &[T], b: &[T], out: &mut [T]) {
    let (k, cols) = (w.len() / b.len(), b.len());
    gemm(T::one(), View::new(x, rows, k, k), View::new(w, k, cols, cols), T::zero(), ViewMut::new(out, rows, cols, cols));
    add_bias(out, b);
}

/// `x += y·W + b`.
pub(crate) fn linear_residual<T: Scalar>(y: &[T], rows: usize, w: &[T], b: &[T], x: &mut [T]) {
    let (k, cols) = (w.len() / b.len(), b.len());
    gemm(T::one(), View::new(y, rows, k, k), View::new(w, k, cols, cols), T::one(), ViewMut::new(x, rows, cols, cols));
    add_bias(x, b);
}

pub(crate) fn layer_forward<T: Scalar>(
    params: &Params<T>,
    slots: &LayerSlots,
    segments: &[Segment],
    tokens: usize,
    x: &mut [T],
    cache: &mut LayerCache<T>,
) {
    let cfg = &params.config;
    let (e, f) = (cfg.embed_dim, cfg.ff_hidden_dim);
    let p = |r: &Range<usize>| params.slice(r);
    let n_probs = segments.last().map_or(0, |s| s.prob_offset + cfg.n_heads * s.rows() * s.n);

    cache.a = vec![T::zero(); tokens * e];
    cache.xhat1 = vec![T::zero(); tokens * e];
    cache.rstd1 = vec![T::zero(); tokens];
    layer_norm(x, p(&slots.ln1_g), p(&slots.ln1_b), &mut cache.a, Some(&mut cache.xhat1), Some(&mut cache.rstd1));

    cache.qkv = vec![T::zero(); tokens * 3 * e];
    linear(&cache.a, tokens, p(&slots.w_qkv), p(&slots.b_qkv), &mut cache.qkv);

    cache.probs = vec![T::zero(); n_probs];
    cache.attn = vec![T::zero(); tokens * e];
    attention_forward(&cache.qkv, segments, cfg.n_heads, e, &mut cache.probs, &mut cache.attn);
    linear_residual(&cache.attn, tokens, p(&slots.w_out), p(&slots.b_out), x);

    cache.c = vec![T::zero(); tokens * e];
    cache.xhat2 = vec![T::zero(); tokens * e];
    cache.rstd2 = vec![T::zero(); tokens];
    layer_norm(x, p(&slots.ln2_g), p(&slots.ln2_b), &mut cache.c, Some(&mut cache.xhat2), Some(&mut cache.rstd2));

    cache.u = vec![T::zero(); tokens * f];
    linear(&cache.c, tokens, p(&slots.w1), p(&slots.b1), &mut cache.u);
    cache.g = cache.u.iter().map(|v| gelu(*v)).collect();
    linear_residual(&cache.g, tokens, p(&slots.w2), p(&slots.b2), x);
}

/// Disjoint mutable borrows of two ranges, `a` before `b`.
fn pair_mut<'a, T>(v: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// `dw += xᵀ·dy`, `db += colsum(dy)` and, when requested, `dx = dy·Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    w: &[T],
    grad: &mut [T],
    w_range: &Range<usize>,
    b_range: &Range<usize>,
    dx: Option<&mut [T]>,
) {
    let (k, cols) = (w.len() / b_range.len(), b_range.len());
    let (dw, db) = pair_mut(grad, w_range, b_range);
    gemm(T::one(), View::new(x, rows, k, k).t(), View::new(dy, rows, cols, cols), T::one(), ViewMut::new(dw, k, cols, cols));
    add_col_sums(dy, db);
    if let Some(dx) = dx {
        gemm(T::one(), View::new(dy, rows, cols, cols), View::new(w, k, cols, cols).t(), T::zero(), ViewMut::new(dx, rows, k, k));
    }
}

fn layer_backward<T: Scalar>(
    params: &Params<T>,
    slots: &LayerSlots,
    segments: &[Segment],
    tokens: usize,
    cache: &LayerCache<T>,
    dx: &mut [T],
    grad: &mut [T],
) {
    let cfg = &params.config;
    let (e, f) = (cfg.embed_dim, cfg.ff_hidden_dim);
    let p = |r: &Range<usize>| params.slice(r);

    let mut du = vec![T::zero(); tokens * f];
    linear_backward(&cache.g, dx, tokens, p(&slots.w2), grad, &slots.w2, &slots.b2, Some(&mut du));
    for (d, u) in du.iter_mut().zip(&cache.u) {
        *d *= gelu_grad(*u);
    }
    let mut dc = vec![T::zero(); tokens * e];
    linear_backward(&cache.c, &du, tokens, p(&slots.w1), grad, &slots.w1, &slots.b1, Some(&mut dc));
    let (dg, db) = pair_mut(grad, &slots.ln2_g, &slots.ln2_b);
    layer_norm_backward(&dc, &cache.xhat2, &cache.rstd2, p(&slots.ln2_g), dg, db, dx);

    let mut dattn = vec![T::zero(); tokens * e];
    linear_backward(&cache.attn, dx, tokens, p(&slots.w_out), grad, &slots.w_out, &slots.b_out, Some(&mut dattn));
    let mut dqkv = vec![T::zero(); tokens * 3 * e];
    attention_backward(&cache.qkv, &cache.probs, &dattn, segments, cfg.n_heads, e, &mut dqkv);
    let mut da = dc;
    linear_backward(&cache.a, &dqkv, tokens, p(&slots.w_qkv), grad, &slots.w_qkv, &slots.b_qkv, Some(&mut da));
    let (dg, db) = pair_mut(grad, &slots.ln1_g, &slots.ln1_b);
    layer_norm_backward(&da, &cache.xhat1, &cache.rstd1, p(&slots.ln1_g), dg, db, dx);
}

/// Token embeddings: `enc_x` for every row plus `enc_y` on trajectory rows
/// and `enc_pref` on query rows.
pub(crate) fn embed_tokens<T: Scalar>(params: &Params<T>, segments: &[Segment], xin: &[T], yin: &[T], pin: &[T]) -> Vec<T> {
    let cfg = &params.config;
    let l = &*params.layout;
    let e = cfg.embed_dim;
    let tokens = segments.last().map_or(0, |s| s.start + s.rows());
    let mut x = vec![T::zero(); tokens * e];
    let (kx, ky) = (cfg.max_features, cfg.max_objectives);
    gemm(T::one(), View::new(xin, tokens, kx, kx), View::new(params.slice(&l.enc_x_w), kx, e, e), T::zero(), ViewMut::new(&mut x, tokens, e, e));
    gemm(T::one(), View::new(yin, tokens, ky, ky), View::new(params.slice(&l.enc_y_w), ky, e, e), T::one(), ViewMut::new(&mut x, tokens, e, e));
    gemm(T::one(), View::new(pin, tokens, ky, ky), View::new(params.slice(&l.enc_pref_w), ky, e, e), T::one(), ViewMut::new(&mut x, tokens, e, e));
    add_bias(&mut x, params.slice(&l.enc_x_b));
    for seg in segments {
        let traj = &mut x[seg.start * e..(seg.start + seg.n) * e];
        add_bias(traj, params.slice(&l.enc_y_b));
        let queries = &mut x[(seg.start + seg.n) * e..(seg.start + seg.rows()) * e];
        add_bias(queries, params.slice(&l.enc_pref_b));
    }
    x
}

/// Forward pass over a batch of episodes, keeping everything the backward
/// pass needs.
pub fn forward<T: Scalar>(params: &Params<T>, episodes: &[Episode]) -> Result<ForwardCache<T>> {
    let cfg = &params.config;
    let l = &*params.layout;
    let e = cfg.embed_dim;
    let (segments, xin, yin, pin, query_rows) = embed_inputs(params, episodes)?;
    let tokens = segments.last().map_or(0, |s| s.start + s.rows());

    let mut x = embed_tokens(params, &segments, &xin, &yin, &pin);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for slots in &l.layers {
        let mut cache = LayerCache::default();
        layer_forward(params, slots, &segments, tokens, &mut x, &mut cache);
        layers.push(cache);
    }

    let nq = query_rows.len();
    let mut zq = Vec::with_capacity(nq * e);
    for &r in &query_rows {
        zq.extend_from_slice(&x[r * e..(r + 1) * e]);
    }
    let mut hq = vec![T::zero(); nq * e];
    let mut xhat_f = vec![T::zero(); nq * e];
    let mut rstd_f = vec![T::zero(); nq];
    layer_norm(&zq, params.slice(&l.ln_f_g), params.slice(&l.ln_f_b), &mut hq, Some(&mut xhat_f), Some(&mut rstd_f));
    let mut logits = vec![T::zero(); nq * cfg.n_bins];
    linear(&hq, nq, params.slice(&l.head_w), params.slice(&l.head_b), &mut logits);

    Ok(ForwardCache { segments, tokens, xin, yin, pin, layers, query_rows, xhat_f, rstd_f, hq, logits })
}

/// Gradient of a scalar loss with respect to all parameters, given the
/// gradient with respect to the logits.
pub fn backward<T: Scalar>(params: &Params<T>, cache: &ForwardCache<T>, dlogits: &[T]) -> Vec<T> {
    let cfg = &params.config;
    let l = &*params.layout;
    let e = cfg.embed_dim;
    let tokens = cache.tokens;
    let nq = cache.n_queries();
    let mut grad = vec![T::zero(); params.len()];

    let mut dhq = vec![T::zero(); nq * e];
    linear_backward(&cache.hq, dlogits, nq, params.slice(&l.head_w), &mut grad, &l.head_w, &l.head_b, Some(&mut dhq));
    let mut dzq = vec![T::zero(); nq * e];
    let (dg, db) = pair_mut(&mut grad, &l.ln_f_g, &l.ln_f_b);
    layer_norm_backward(&dhq, &cache.xhat_f, &cache.rstd_f, params.slice(&l.ln_f_g), dg, db, &mut dzq);
    let mut dx = vec![T::zero(); tokens * e];
    for (i, &r) in cache.query_rows.iter().enumerate() {
        dx[r * e..(r + 1) * e].copy_from_slice(&dzq[i * e..(i + 1) * e]);
    }

    for (slots, lc) in l.layers.iter().zip(&cache.layers).rev() {
        layer_backward(params, slots, &cache.segments, tokens, lc, &mut dx, &mut grad);
    }

    let ky = cfg.max_objectives;
    linear_backward(&cache.xin, &dx, tokens, params.slice(&l.enc_x_w), &mut grad, &l.enc_x_w, &l.enc_x_b, None);
    let mut embed_side = |input: &[T], w: &Range<usize>| {
        let dw = &mut grad[w.clone()];
        gemm(T::one(), View::new(input, tokens, ky, ky).t(), View::new(&dx, tokens, e, e), T::one(), ViewMut::new(dw, ky, e, e));
    };
    embed_side(&cache.yin, &l.enc_y_w);
    embed_side(&cache.pin, &l.enc_pref_w);
    for seg in &cache.segments {
        add_col_sums(&dx[seg.start * e..(seg.start + seg.n) * e], &mut grad[l.enc_y_b.clone()]);
        add_col_sums(&dx[(seg.start + seg.n) * e..(seg.start + seg.rows()) * e], &mut grad[l.enc_pref_b.clone()]);
    }
    grad
}

/// Mean cross-entropy over every query of the batch and its gradient.
pub fn loss_and_grad<T: Scalar>(
    params: &Params<T>,
    episodes: &[Episode],
    targets: &[Vec<f64>],
    support: &RiemannSupport,
) -> Result<BatchLoss<T>> {
    let cache = forward(params, episodes)?;
    let (loss, dlogits) = batch_loss(&cache, episodes, targets, support)?;
    let grad = backward(params, &cache, &dlogits);
    Ok(BatchLoss { loss, grad, n_queries: cache.n_queries() })
}

fn batch_loss<T: Scalar>(
    cache: &ForwardCache<T>,
    episodes: &[Episode],
    targets: &[Vec<f64>],
    support: &RiemannSupport,
) -> Result<(f64, Vec<T>)> {
    if targets.len() != episodes.len() {
        return Err(Error::DimensionMismatch { expected: episodes.len(), got: targets.len() });
    }
    let flat: Vec<f64> = targets.iter().flatten().copied().collect();
    if flat.len() != cache.n_queries() {
        return Err(Error::DimensionMismatch { expected: cache.n_queries(), got: flat.len() });
    }
    if flat.is_empty() {
        return Err(Error::Shape("batch has no queries".into()));
    }
    let b = support.n_bins();
    let scale = 1.0 / flat.len() as f64;
    let mut total = 0.0;
    let mut dlogits = Vec::with_capacity(cache.logits.len());
    for (row, &t) in cache.logits.chunks_exact(b).zip(&flat) {
        let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
        let (loss, grad) = super::cross_entropy_loss(&row, t, support);
        total += loss;
        dlogits.extend(grad.into_iter().map(|g| T::of(g * scale)));
    }
    Ok((total * scale, dlogits))
}

/// Mean loss of a batch without the backward pass.
pub fn batch_mean_loss<T: Scalar>(
    params: &Params<T>,
    episodes: &[Episode],
    targets: &[Vec<f64>],
    support: &RiemannSupport,
) -> Result<f64> {
    let cache = forward(params, episodes)?;
    Ok(batch_loss(&cache, episodes, targets, support)?.0)
}

/// Logits per episode (`n_query × n_bins` each) through the training path.
pub fn forward_logits<T: Scalar>(params: &Params<T>, episodes: &[Episode]) -> Result<Vec<Vec<T>>> {
    let cache = forward(params, episodes)?;
    let b = params.config.n_bins;
    let mut out = Vec::with_capacity(episodes.len());
    let mut offset = 0;
    for seg in &cache.segments {
        out.push(cache.logits[offset * b..(offset + seg.q) * b].to_vec());
        offset += seg.q;
    }
    Ok(out)
}

/// Straightforward single-episode forward pass with an explicit attention
/// mask over its `n + q` tokens (`mask[i * (n + q) + j]`: row `i` reads `j`).
/// Returns the logits of the query rows. Slow; meant as a reference.
pub fn forward_with_mask(params: &Params<f64>, episode: &Episode, mask: &[bool]) -> Result<Vec<f64>> {
    let cfg = &params.config;
    let l = &*params.layout;
    let (e, f, heads) = (cfg.embed_dim, cfg.ff_hidden_dim, cfg.n_heads);
    let dh = e / heads;
    let (segments, xin, yin, pin, _) = embed_inputs(params, std::slice::from_ref(episode))?;
    let seg = segments[0];
    let t = seg.rows();
    if mask.len() != t * t {
        return Err(Error::DimensionMismatch { expected: t * t, got: mask.len() });
    }
    let matvec = |v: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for (i, vi) in v.iter().enumerate() {
            for j in 0..cols {
                out[j] += vi * w[i * cols + j];
            }
        }
        out
    };
    let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    let norm = |v: &[f64], g: &Range<usize>, b: &Range<usize>| {
        let mut out = vec![0.0; v.len()];
        layer_norm(v, params.slice(g), params.slice(b), &mut out, None, None);
        out
    };
    let (kx, ky) = (cfg.max_features, cfg.max_objectives);
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let mut tok = matvec(&xin[i * kx..(i + 1) * kx], params.slice(&l.enc_x_w), e);
            add(&mut tok, params.slice(&l.enc_x_b));
            if i < seg.n {
                add(&mut tok, &matvec(&yin[i * ky..(i + 1) * ky], params.slice(&l.enc_y_w), e));
                add(&mut tok, params.slice(&l.enc_y_b));
            } else {
                add(&mut tok, &matvec(&pin[i * ky..(i + 1) * ky], params.slice(&l.enc_pref_w), e));
                add(&mut tok, params.slice(&l.enc_pref_b));
            }
            tok
        })
        .collect();
    for s in &l.layers {
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|tok| {
                let mut v = matvec(&norm(tok, &s.ln1_g, &s.ln1_b), params.slice(&s.w_qkv), 3 * e);
                add(&mut v, params.slice(&s.b_qkv));
                v
            })
            .collect();
        for i in 0..t {
            let mut attn = vec![0.0; e];
            for h in 0..heads {
                let q = &qkv[i][h * dh..(h + 1) * dh];
                let keys: Vec<usize> = (0..t).filter(|&j| mask[i * t + j]).collect();
                let mut scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| q.iter().zip(&qkv[j][e + h * dh..e + (h + 1) * dh]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                softmax_in_place(&mut scores);
                for (p, &j) in scores.iter().zip(&keys) {
                    for c in 0..dh {
                        attn[h * dh + c] += p * qkv[j][2 * e + h * dh + c];
                    }
                }
            }
            add(&mut x[i], &matvec(&attn, params.slice(&s.w_out), e));
            add(&mut x[i], params.slice(&s.b_out));
        }
        for tok in x.iter_mut() {
            let mut u = matvec(&norm(tok, &s.ln2_g, &s.ln2_b), params.slice(&s.w1), f);
            add(&mut u, params.slice(&s.b1));
            let g: Vec<f64> = u.into_iter().map(gelu).collect();
            add(tok, &matvec(&g, params.slice(&s.w2), e));
            add(tok, params.slice(&s.b2));
        }
    }
    let mut logits = Vec::with_capacity(seg.q * cfg.n_bins);
    for tok in &x[seg.n..] {
        let mut row = matvec(&norm(tok, &l.ln_f_g, &l.ln_f_b), params.slice(&l.head_w), cfg.n_bins);
        add(&mut row, params.slice(&l.head_b));
        logits.extend(row);
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_attention_mask, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            ff_hidden_dim: 24,
            n_heads: 2,
            n_layers: 1,
            n_bins: 8,
            max_features: 4,
            max_objectives: 3,
            max_sample_len: 16,
        }
    }

    fn support(b: usize) -> RiemannSupport {
        let samples: Vec<f64> = (0..2000).map(|i| -1.0 + 2.0 * i as f64 / 1999.0).collect();
        super::super::build_riemann_support(&samples, b).unwrap()
    }

    fn episode(rng: &mut ChaCha8Rng, d: usize, m: usize, n: usize, q: usize) -> Episode {
        let mut v = |len| (0..len).map(|_| rng.random::<f64>()).collect::<Vec<f64>>();
        let traj_x = v(n * d);
        let traj_y = v(n * m);
        let query_x = v(q * d);
        let mut query_pref = v(q * m);
        for row in query_pref.chunks_exact_mut(m) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= s);
        }
        Episode { d, m, traj_x, traj_y, query_x, query_pref }
    }

    fn random_params(cfg: ModelConfig, seed: u64) -> Params<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::<f64>::init(cfg, &mut rng);
        // perturb gains and biases so their gradients are exercised
        for v in p.data.iter_mut() {
            *v += 0.05 * (rng.random::<f64>() - 0.5);
        }
        p
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = tiny();
        let params = random_params(cfg, 3);
        let sup = support(cfg.n_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let episodes = vec![episode(&mut rng, 2, 2, 4, 3), episode(&mut rng, 3, 1, 2, 2)];
        let targets = vec![vec![-0.3, 0.1, 0.5], vec![0.9, -0.95]];
        let analytic = loss_and_grad(&params, &episodes, &targets, &sup).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for spec in params.layout.tensors.iter() {
            for idx in spec.range().step_by(7) {
                let mut p = params.clone();
                p.data[idx] += h;
                let up = batch_mean_loss(&p, &episodes, &targets, &sup).unwrap();
                p.data[idx] -= 2.0 * h;
                let down = batch_mean_loss(&p, &episodes, &targets, &sup).unwrap();
                let fd = (up - down) / (2.0 * h);
                let g = analytic.grad[idx];
                let rel = (fd - g).abs() / (fd.abs().max(g.abs()).max(1e-4));
                assert!(rel <= 1e-3, "{} [{idx}]: fd {fd} vs analytic {g}", spec.name);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn batched_path_matches_masked_reference() {
        let cfg = tiny();
        let params = random_params(cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = episode(&mut rng, 3, 2, 5, 3);
        let fast = forward_logits(&params, std::slice::from_ref(&ep)).unwrap().remove(0);
        let slow = forward_with_mask(&params, &ep, &build_attention_mask(5, 3)).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
        // letting queries see each other changes the answer
        let full = vec![true; 64];
        let leaky = forward_with_mask(&params, &ep, &full).unwrap();
        assert!(fast.iter().zip(&leaky).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn trajectory_permutation_does_not_change_predictions() {
        let cfg = tiny();
        let params = random_params(cfg, 7).cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ep = episode(&mut rng, 2, 2, 6, 2);
        let mut perm = ep.clone();
        let order = [3usize, 0, 5, 1, 4, 2];
        perm.traj_x = order.iter().flat_map(|&i| ep.traj_x[i * 2..i * 2 + 2].to_vec()).collect();
        perm.traj_y = order.iter().flat_map(|&i| ep.traj_y[i * 2..i * 2 + 2].to_vec()).collect();
        let a = forward_logits(&params, &[ep]).unwrap().remove(0);
        let b = forward_logits(&params, &[perm]).unwrap().remove(0);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn queries_are_independent_and_batches_do_not_mix() {
        let cfg = tiny();
        let params = random_params(cfg, 8).cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ep = episode(&mut rng, 2, 2, 5, 4);
        let joint = forward_logits(&params, std::slice::from_ref(&ep)).unwrap().remove(0);
        let b = cfg.n_bins;
        for j in 0..4 {
            let mut single = ep.clone();
            single.query_x = ep.query_x[j * 2..j * 2 + 2].to_vec();
            single.query_pref = ep.query_pref[j * 2..j * 2 + 2].to_vec();
            let alone = forward_logits(&params, &[single]).unwrap().remove(0);
            for (x, y) in alone.iter().zip(&joint[j * b..(j + 1) * b]) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        let other = episode(&mut rng, 3, 1, 7, 2);
        let mixed = forward_logits(&params, &[other, ep]).unwrap();
        for (x, y) in mixed[1].iter().zip(&joint) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn oversized_inputs_are_rejected() {
        let cfg = tiny();
        let params = Params::<f32>::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wide = episode(&mut rng, 5, 1, 3, 1);
        assert!(matches!(forward_logits(&params, &[wide]), Err(Error::Dimension { .. })));
        let many = episode(&mut rng, 1, 4, 3, 1);
        assert!(matches!(forward_logits(&params, &[many]), Err(Error::Dimension { .. })));
        let empty = episode(&mut rng, 1, 1, 0, 1);
        assert!(matches!(forward_logits(&params, &[empty]), Err(Error::EmptyTrajectory)));
    }
}
