//! Scrambled Sobol sequences.
//!
//! Direction numbers are the Joe–Kuo `new-joe-kuo-6.21201` set for the first
//! 30 dimensions. Scrambling is a random linear matrix scramble followed by a
//! digital shift, both drawn from the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_SOBOL_DIM: usize = 30;
const BITS: usize = 32;

/// `(degree s, coefficient a, initial m_1..m_s)` for dimensions 2..=30.
const DIRECTION_TABLE: [(u32, u32, &[u32]); MAX_SOBOL_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
    (7, 21, &[1, 1, 5, 11, 19, 41, 61]),
    (7, 28, &[1, 3, 5, 3, 3, 13, 69]),
    (7, 31, &[1, 1, 7, 13, 1, 19, 1]),
    (7, 32, &[1, 3, 7, 5, 13, 19, 59]),
    (7, 37, &[1, 1, 3, 9, 25, 29, 41]),
];

/// Direction integers `V_1..V_32` of one dimension, MSB-aligned.
fn directions(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = DIRECTION_TABLE[dim - 1];
    let s = s as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                x ^= v[k - i];
            }
        }
        v[k] = x;
    }
    v
}

/// A Sobol generator over `[0, 1)^d`.
#[derive(Debug, Clone)]
pub struct Sobol {
    d: usize,
    v: Vec<[u32; BITS]>,
    shift: Vec<u32>,
    scrambled: bool,
}

impl Sobol {
    pub fn unscrambled(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self { d, v: (0..d).map(directions).collect(), shift: vec![0; d], scrambled: false })
    }

    pub fn scrambled(d: usize, seed: u64) -> Result<Self> {
        check_dim(d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::with_capacity(d);
        let mut shift = Vec::with_capacity(d);
        for j in 0..d {
            // lower-triangular binary matrix with unit diagonal, rows indexed
            // from the most significant bit
            let rows: Vec<u32> = (0..BITS)
                .map(|r| {
                    let diag = 1u32 << (BITS - 1 - r);
                    let above = if r == 0 { 0 } else { rng.random::<u32>() & !((1u32 << (BITS - r)) - 1) };
                    diag | above
                })
                .collect();
            let dirs = directions(j).map(|x| rows.iter().enumerate().fold(0u32, |acc, (r, row)| acc | (((row & x).count_ones() & 1) << (BITS - 1 - r))));
            v.push(dirs);
            shift.push(rng.random());
        }
        Ok(Self { d, v, shift, scrambled: true })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Point `index` of the sequence (index 0 is the origin before
    /// scrambling).
    pub fn point(&self, index: u64) -> Vec<f64> {
        let gray = index ^ (index >> 1);
        (0..self.d)
            .map(|j| {
                let mut x = self.shift[j];
                for (k, vk) in self.v[j].iter().enumerate() {
                    if (gray >> k) & 1 == 1 {
                        x ^= vk;
                    }
                }
                let offset = if self.scrambled { 0.5 } else { 0.0 };
                (x as f64 + offset) / (1u64 << BITS) as f64
            })
            .collect()
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d > MAX_SOBOL_DIM {
        return Err(Error::Dimension { what: "sobol dimension", got: d, max: MAX_SOBOL_DIM });
    }
    Ok(())
}

/// `n` scrambled Sobol points in `(0, 1)^d`, skipping the first point of the
/// sequence. Row-major `n × d`.
pub fn sobol_points(d: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let s = Sobol::scrambled(d, seed)?;
    Ok((1..=n as u64).map(|i| s.point(i)).collect())
}

/// Star discrepancy of a point set in `[0,1]^2`, evaluated over every
/// anchored box whose corner lies on the grid spanned by the coordinates.
pub fn star_discrepancy_2d(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let mut xs: Vec<f64> = points.iter().map(|p| p[0]).chain([1.0]).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p[1]).chain([1.0]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut worst: f64 = 0.0;
    for &bx in &xs {
        for &by in &ys {
            let (mut open, mut closed) = (0usize, 0usize);
            for p in points {
                if p[0] < bx && p[1] < by {
                    open += 1;
                }
                if p[0] <= bx && p[1] <= by {
                    closed += 1;
                }
            }
            let vol = bx * by;
            worst = worst.max(vol - open as f64 / n).max(closed as f64 / n - vol);
        }
    }
    worst
}
