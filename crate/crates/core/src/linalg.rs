//! Dense row-major helpers: Cholesky with a jitter ladder and triangular
//! solves. Matrices here are small (at most a few hundred rows).

use crate::error::{Error, Result};

/// Diagonal jitter schedule tried when a factorization fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterLadder {
    pub start: f64,
    pub max: f64,
}

impl JitterLadder {
    /// 1e-8 growing tenfold up to 1e-4.
    pub const DEFAULT: Self = Self { start: 1e-8, max: 1e-4 };

    /// A single attempt with no added jitter.
    pub const NONE: Self = Self { start: 0.0, max: 0.0 };
}

impl Default for JitterLadder {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Lower Cholesky factor of a symmetric positive definite `n×n` matrix.
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Cholesky with escalating diagonal jitter. Returns the factor and the
/// jitter that was needed.
pub fn cholesky_with_jitter(a: &[f64], n: usize, ladder: JitterLadder) -> Result<(Vec<f64>, f64)> {
    if let Some(l) = cholesky(a, n) {
        return Ok((l, 0.0));
    }
    let mut jitter = ladder.start;
    let mut last = 0.0;
    while jitter > 0.0 && jitter <= ladder.max * (1.0 + 1e-9) {
        let mut b = a.to_vec();
        for i in 0..n {
            b[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&b, n) {
            return Ok((l, jitter));
        }
        last = jitter;
        jitter *= 10.0;
    }
    Err(Error::Factorization { jitter: last })
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
pub fn solve_upper_transposed(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}
