//! The Riemann (bar) output distribution: equal-prior-mass bins between
//! fixed boundaries, with the two outermost bins replaced by half-normal
//! tails so the density has full support on the real line.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const LN_SQRT_2_OVER_PI: f64 = -0.225_791_352_644_727_4;

/// Bin boundaries plus half-normal tail scales.
///
/// With `B` bins there are `B-1` boundaries: bin 0 is the left tail
/// `(-∞, b_0)`, bin `k` for `1 ≤ k ≤ B-2` is `[b_{k-1}, b_k)` and bin `B-1`
/// is the right tail `[b_{B-2}, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SupportRepr", into = "SupportRepr")]
pub struct RiemannSupport {
    boundaries: Vec<f64>,
    left_scale: f64,
    right_scale: f64,
    bin_mean: Vec<f64>,
    bin_second_moment: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SupportRepr {
    boundaries: Vec<f64>,
    left_tail_scale: f64,
    right_tail_scale: f64,
}

impl TryFrom<SupportRepr> for RiemannSupport {
    type Error = Error;
    fn try_from(r: SupportRepr) -> Result<Self> {
        Self::new(r.boundaries, r.left_tail_scale, r.right_tail_scale)
    }
}

impl From<RiemannSupport> for SupportRepr {
    fn from(s: RiemannSupport) -> Self {
        Self { boundaries: s.boundaries, left_tail_scale: s.left_scale, right_tail_scale: s.right_scale }
    }
}

impl RiemannSupport {
    pub fn new(boundaries: Vec<f64>, left_scale: f64, right_scale: f64) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::DegenerateSupport("need at least one boundary (two bins)".into()));
        }
        if boundaries.iter().any(|b| !b.is_finite()) || boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::DegenerateSupport("boundaries must be finite and strictly increasing".into()));
        }
        if !(left_scale > 0.0 && right_scale > 0.0) {
            return Err(Error::DegenerateSupport("tail scales must be positive".into()));
        }
        let b = boundaries.len() + 1;
        let mut bin_mean = vec![0.0; b];
        let mut bin_second_moment = vec![0.0; b];
        let (lo, hi) = (boundaries[0], boundaries[b - 2]);
        bin_mean[0] = lo - left_scale * SQRT_2_OVER_PI;
        bin_second_moment[0] = lo * lo - 2.0 * lo * left_scale * SQRT_2_OVER_PI + left_scale * left_scale;
        bin_mean[b - 1] = hi + right_scale * SQRT_2_OVER_PI;
        bin_second_moment[b - 1] = hi * hi + 2.0 * hi * right_scale * SQRT_2_OVER_PI + right_scale * right_scale;
        for k in 1..b - 1 {
            let (a, c) = (boundaries[k - 1], boundaries[k]);
            bin_mean[k] = 0.5 * (a + c);
            bin_second_moment[k] = (a * a + a * c + c * c) / 3.0;
        }
        Ok(Self { boundaries, left_scale, right_scale, bin_mean, bin_second_moment })
    }

    pub fn n_bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn tail_scales(&self) -> (f64, f64) {
        (self.left_scale, self.right_scale)
    }

    /// Index of the bin containing `g`.
    pub fn bin_index(&self, g: f64) -> usize {
        self.boundaries.partition_point(|b| *b <= g)
    }

    /// Interior bin bounds `(a, b)`; `None` for the tails.
    pub fn interior_bounds(&self, k: usize) -> Option<(f64, f64)> {
        (k >= 1 && k + 1 < self.n_bins()).then(|| (self.boundaries[k - 1], self.boundaries[k]))
    }

    /// Log of the within-bin density at `g`, given that `g` lies in bin `k`.
    /// The full log density is this plus `log p_k`.
    pub fn log_within_bin_density(&self, k: usize, g: f64) -> f64 {
        let last = self.n_bins() - 1;
        if k == 0 {
            log_half_normal(self.boundaries[0] - g, self.left_scale)
        } else if k == last {
            log_half_normal(g - self.boundaries[last - 1], self.right_scale)
        } else {
            -(self.boundaries[k] - self.boundaries[k - 1]).ln()
        }
    }
}

fn log_half_normal(x: f64, scale: f64) -> f64 {
    LN_SQRT_2_OVER_PI - scale.ln() - 0.5 * (x / scale) * (x / scale)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `P(X ≤ x)` for a half-normal with the given scale.
fn half_normal_cdf(x: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        libm::erf(x / (scale * std::f64::consts::SQRT_2))
    }
}

/// `E[(X - c)₊]` for a half-normal with the given scale.
fn half_normal_excess(c: f64, scale: f64) -> f64 {
    if c <= 0.0 {
        return -c + scale * SQRT_2_OVER_PI;
    }
    let z = c / scale;
    let upper = 0.5 * libm::erfc(z / std::f64::consts::SQRT_2);
    (2.0 * (scale * std_normal_pdf(z) - c * upper)).max(0.0)
}

/// Equal-mass bins from prior aggregation samples.
///
/// Boundaries sit at the `k/B` empirical quantiles. Each tail's half-normal
/// scale is twice the 95th percentile of the samples' overshoot beyond the
/// outermost boundary on that side.
pub fn build_riemann_support(samples: &[f64], n_bins: usize) -> Result<RiemannSupport> {
    if n_bins < 2 {
        return Err(Error::DegenerateSupport("need at least two bins".into()));
    }
    if samples.len() < 2 * n_bins {
        return Err(Error::DegenerateSupport(format!("{} samples are too few for {n_bins} bins", samples.len())));
    }
    if samples.len() < 100_000 {
        log::warn!("building a Riemann support from only {} samples", samples.len());
    }
    let mut sorted: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let quantile = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < sorted.len() {
            sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
        } else {
            sorted[i]
        }
    };
    let boundaries: Vec<f64> = (1..n_bins).map(|k| quantile(k as f64 / n_bins as f64)).collect();
    if boundaries.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::DegenerateSupport("quantiles collapse; prior samples are near-constant".into()));
    }
    let tail_scale = |overshoot: Vec<f64>| -> f64 {
        let mut o = overshoot;
        if o.is_empty() {
            return 1e-3;
        }
        o.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let p95 = o[((o.len() - 1) as f64 * 0.95).round() as usize];
        (2.0 * p95).max(1e-6)
    };
    let lo = boundaries[0];
    let hi = *boundaries.last().expect("nonempty");
    let left = tail_scale(sorted.iter().filter(|g| **g < lo).map(|g| lo - g).collect());
    let right = tail_scale(sorted.iter().filter(|g| **g > hi).map(|g| g - hi).collect());
    RiemannSupport::new(boundaries, left, right)
}

/// Piecewise-constant predictive distribution over a shared support.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorHistogram {
    pub support: Arc<RiemannSupport>,
    pub probs: Vec<f64>,
}

/// Summary statistics of a histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramStats {
    pub mean: f64,
    pub std: f64,
}

impl PosteriorHistogram {
    pub fn new(support: Arc<RiemannSupport>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != support.n_bins() {
            return Err(Error::Shape(format!("{} probabilities for {} bins", probs.len(), support.n_bins())));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("probabilities must be nonnegative and sum to 1 (sum {total})")));
        }
        Ok(Self { support, probs })
    }

    /// Softmax of logits attached to the support.
    pub fn from_logits(support: Arc<RiemannSupport>, logits: &[f64]) -> Self {
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self { support, probs }
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().zip(&self.support.bin_mean).map(|(p, m)| p * m).sum()
    }

    pub fn stats(&self) -> HistogramStats {
        let mean = self.mean();
        let second: f64 = self.probs.iter().zip(&self.support.bin_second_moment).map(|(p, s)| p * s).sum();
        HistogramStats { mean, std: (second - mean * mean).max(0.0).sqrt() }
    }

    pub fn std(&self) -> f64 {
        self.stats().std
    }

    /// `μ + β σ`.
    pub fn ucb(&self, beta: f64) -> f64 {
        let s = self.stats();
        s.mean + beta * s.std
    }

    pub fn cdf(&self, v: f64) -> f64 {
        let s = &self.support;
        let b = s.n_bins();
        let k = s.bin_index(v);
        let before: f64 = self.probs[..k].iter().sum();
        let within = if k == 0 {
            1.0 - half_normal_cdf(s.boundaries[0] - v, s.left_scale)
        } else if k == b - 1 {
            half_normal_cdf(v - s.boundaries[b - 2], s.right_scale)
        } else {
            let (lo, hi) = (s.boundaries[k - 1], s.boundaries[k]);
            (v - lo) / (hi - lo)
        };
        (before + self.probs[k] * within).clamp(0.0, 1.0)
    }

    /// Smallest `v` with `cdf(v) ≥ p`.
    pub fn quantile(&self, p: f64) -> f64 {
        let s = &self.support;
        let b = s.n_bins();
        let p = p.clamp(0.0, 1.0);
        let mut cum = 0.0;
        for k in 0..b {
            let pk = self.probs[k];
            if cum + pk >= p && pk > 0.0 {
                let frac = ((p - cum) / pk).clamp(0.0, 1.0);
                return match s.interior_bounds(k) {
                    Some((lo, hi)) => lo + frac * (hi - lo),
                    None => self.tail_quantile(k, frac),
                };
            }
            cum += pk;
        }
        s.boundaries[b - 2]
    }

    fn tail_quantile(&self, k: usize, frac: f64) -> f64 {
        let s = &self.support;
        // within-tail cdf is monotone; bisection is plenty for reporting
        let (mut lo, mut hi) = if k == 0 {
            (s.boundaries[0] - 40.0 * s.left_scale, s.boundaries[0])
        } else {
            (s.boundaries[k - 1], s.boundaries[k - 1] + 40.0 * s.right_scale)
        };
        let within = |v: f64| {
            if k == 0 {
                1.0 - half_normal_cdf(s.boundaries[0] - v, s.left_scale)
            } else {
                half_normal_cdf(v - s.boundaries[k - 1], s.right_scale)
            }
        };
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if within(mid) < frac {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `E[(g - g*)₊]` in closed form, bin by bin.
    pub fn ei_partial(&self, best: f64) -> f64 {
        let s = &self.support;
        let b = s.n_bins();
        let mut total = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let part = if k == 0 {
                // g = b_0 - X
                let c = s.boundaries[0] - best;
                if c <= 0.0 {
                    0.0
                } else {
                    c - s.left_scale * SQRT_2_OVER_PI + half_normal_excess(c, s.left_scale)
                }
            } else if k == b - 1 {
                // g = b_last + X
                half_normal_excess(best - s.boundaries[b - 2], s.right_scale)
            } else {
                let (lo, hi) = (s.boundaries[k - 1], s.boundaries[k]);
                if best <= lo {
                    0.5 * (lo + hi) - best
                } else if best >= hi {
                    0.0
                } else {
                    (hi - best) * (hi - best) / (2.0 * (hi - lo))
                }
            };
            total += p * part;
        }
        total.max(0.0)
    }

    /// Log density of the histogram at `g`.
    pub fn log_density(&self, g: f64) -> f64 {
        let k = self.support.bin_index(g);
        self.probs[k].ln() + self.support.log_within_bin_density(k, g)
    }
}

/// Negative log density of `target` under the histogram with the given
/// logits, plus the gradient with respect to the logits.
pub fn cross_entropy_loss(logits: &[f64], target: f64, support: &RiemannSupport) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let k = support.bin_index(target);
    let log_p = logits[k] - max - total.ln();
    let loss = -log_p - support.log_within_bin_density(k, target);
    probs[k] -= 1.0;
    (loss, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_bin_support() -> Arc<RiemannSupport> {
        Arc::new(RiemannSupport::new(vec![-0.1, 0.0, 0.1, 0.2], 0.05, 0.05).unwrap())
    }

    fn mass_in(k: usize) -> PosteriorHistogram {
        let s = unit_bin_support();
        let mut probs = vec![0.0; s.n_bins()];
        probs[k] = 1.0;
        PosteriorHistogram::new(s, probs).unwrap()
    }

    #[test]
    fn quartile_boundaries_of_uniform_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let s = build_riemann_support(&samples, 4).unwrap();
        for (b, want) in s.boundaries().iter().zip([0.25, 0.5, 0.75]) {
            assert!((b - want).abs() < 0.01);
        }
    }

    #[test]
    fn constant_samples_are_degenerate() {
        assert!(matches!(build_riemann_support(&[0.5; 1000], 8), Err(Error::DegenerateSupport(_))));
    }

    #[test]
    fn uniform_bin_moments() {
        let h = mass_in(2);
        let st = h.stats();
        assert!((st.mean - 0.05).abs() < 1e-12);
        assert!((st.std - 0.1 / 12f64.sqrt()).abs() < 1e-9);
        assert!((h.ei_partial(0.0) - 0.05).abs() < 1e-12);
        assert_eq!(h.ei_partial(0.2), 0.0);
        assert!((h.ei_partial(0.05) - 0.05 * 0.05 / 0.2).abs() < 1e-12);
    }

    #[test]
    fn tail_moments_match_quadrature() {
        for k in [0usize, 4] {
            let h = mass_in(k);
            let (lo, hi) = (-1.0, 1.0);
            let steps = 200_000;
            let dx = (hi - lo) / steps as f64;
            let (mut m0, mut m1, mut m2, mut ei) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..steps {
                let x = lo + (i as f64 + 0.5) * dx;
                let d = h.log_density(x).exp() * dx;
                m0 += d;
                m1 += d * x;
                m2 += d * x * x;
                ei += d * (x - 0.21).max(0.0);
            }
            let st = h.stats();
            assert!((m0 - 1.0).abs() < 1e-6);
            assert!((m1 - st.mean).abs() < 1e-6);
            assert!((m2 - m1 * m1 - st.std * st.std).abs() < 1e-6);
            assert!((ei - h.ei_partial(0.21)).abs() < 1e-6, "bin {k}");
        }
    }

    #[test]
    fn cdf_is_monotone_and_quantile_inverts_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = unit_bin_support();
        for _ in 0..50 {
            let logits: Vec<f64> = (0..s.n_bins()).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let h = PosteriorHistogram::from_logits(s.clone(), &logits);
            let mut prev = 0.0;
            for i in 0..=400 {
                let v = -0.6 + i as f64 * 0.003;
                let c = h.cdf(v);
                assert!(c >= prev - 1e-12);
                prev = c;
            }
            assert!(h.cdf(-50.0) < 1e-9 && h.cdf(50.0) > 1.0 - 1e-9);
            for p in [0.05, 0.25, 0.5, 0.75, 0.95] {
                assert!((h.cdf(h.quantile(p)) - p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let s = unit_bin_support();
        let mut logits = vec![f64::NEG_INFINITY; 5];
        logits[2] = 0.0;
        logits[3] = 0.0;
        let (loss, grad) = cross_entropy_loss(&logits, 0.05, &s);
        assert!((loss + 5f64.ln()).abs() < 1e-12);
        assert!((grad[2] + 0.5).abs() < 1e-12 && (grad[3] - 0.5).abs() < 1e-12);
        // tail target: finite and decreasing in tail mass
        let mut prev = f64::INFINITY;
        for tail_logit in [-2.0, -1.0, 0.0, 1.0] {
            let (loss, _) = cross_entropy_loss(&[0.0, 0.0, 0.0, 0.0, tail_logit], 0.3, &s);
            assert!(loss.is_finite() && loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn support_serde_round_trip() {
        let s = RiemannSupport::new(vec![-1.0, -0.5, 0.0], 0.2, 0.3).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: RiemannSupport = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }
}
