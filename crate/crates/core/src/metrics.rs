//! Objective normalization, Pareto filtering and front quality indicators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalarize::{hv_scalarization_estimate, ScalarizationContext};

/// Ranges narrower than this are treated as degenerate.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Reference point coordinate used for normalized hypervolume.
pub const NORMALIZED_REFERENCE: f64 = 1.1;

/// Sample count of the Monte-Carlo hypervolume used for three or more
/// objectives.
pub const HV_ESTIMATE_SAMPLES: usize = 200_000;

/// Per-objective affine map `(y - lower) / range`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBounds {
    pub lower: Vec<f64>,
    pub range: Vec<f64>,
}

impl ObjectiveBounds {
    /// Min-max bounds of the given rows. A column whose range is below
    /// [`DEGENERATE_RANGE`] gets range 1 and offset equal to its value, which
    /// maps it to 0.
    pub fn fit<'a, I>(rows: I, m: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        let mut seen = false;
        for row in rows {
            seen = true;
            for j in 0..m {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        assert!(seen, "normalization needs at least one observation");
        let range = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h - l < DEGENERATE_RANGE { 1.0 } else { h - l })
            .collect();
        Self { lower: lo, range }
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.lower).zip(&self.range).map(|((y, l), r)| (y - l) / r).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.lower).zip(&self.range).map(|((z, l), r)| z * r + l).collect()
    }
}

/// Min-max normalizes every objective over the given observations.
pub fn normalize_trajectory(observations: &[Vec<f64>]) -> (Vec<Vec<f64>>, ObjectiveBounds) {
    assert!(!observations.is_empty(), "normalization needs at least one observation");
    let m = observations[0].len();
    let bounds = ObjectiveBounds::fit(observations.iter().map(Vec::as_slice), m);
    let normalized = observations.iter().map(|y| bounds.apply(y)).collect();
    (normalized, bounds)
}

/// `a` Pareto-dominates `b` (minimization).
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// `a` weakly dominates `b`.
pub fn weakly_dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// A mutually nondominated set of objective vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Front {
    pub points: Vec<Vec<f64>>,
}

impl Front {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Nondominated subset with duplicates removed, in lexicographic order.
///
/// After a lexicographic sort only earlier points can dominate a later one,
/// so each candidate is checked against the points kept so far.
pub fn pareto_filter(points: &[Vec<f64>]) -> Front {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite objective values"));
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for p in sorted {
        if kept.iter().any(|k| weakly_dominates(k, p)) {
            continue;
        }
        kept.push(p.clone());
    }
    Front { points: kept }
}

/// Inverted generational distance plus of `front` against `reference`.
pub fn igd_plus(front: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if front.is_empty() || reference.is_empty() {
        return Err(Error::Domain("IGD+ needs nonempty sets".into()));
    }
    let m = reference[0].len();
    for p in front.iter().chain(reference) {
        if p.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: p.len() });
        }
    }
    let mut total = 0.0;
    for v in reference {
        let mut best = f64::INFINITY;
        for u in front {
            let d = u
                .iter()
                .zip(v)
                .map(|(u, v)| {
                    let t = (u - v).max(0.0);
                    t * t
                })
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
        total += best;
    }
    Ok(total / reference.len() as f64)
}

/// Exact two-objective hypervolume by a sweep over the sorted front.
pub fn hv_exact_2d(points: &[Vec<f64>], reference: &[f64]) -> Result<f64> {
    if reference.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: reference.len() });
    }
    for p in points {
        if p.len() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: p.len() });
        }
        if !(p[0] < reference[0] && p[1] < reference[1]) {
            return Err(Error::Domain(format!("point {p:?} does not dominate reference {reference:?}")));
        }
    }
    let front = pareto_filter(points);
    let mut hv = 0.0;
    let mut ceiling = reference[1];
    for p in &front.points {
        hv += (reference[0] - p[0]) * (ceiling - p[1]);
        ceiling = p[1];
    }
    Ok(hv)
}

/// Monte-Carlo hypervolume via the scalarization identity.
pub fn hv_estimate(points: &[Vec<f64>], reference: &[f64], ideal: &[f64], samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = ScalarizationContext { ideal: ideal.to_vec() };
    hv_scalarization_estimate(points, reference, &ctx, samples, &mut rng)
}

/// Outcome of [`normalized_hv`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHv {
    pub value: f64,
    /// Points left after dropping those that do not dominate the reference.
    pub surviving: usize,
    /// Sample count when the Monte-Carlo path was used.
    pub samples: Option<usize>,
}

impl NormalizedHv {
    /// Set when no point survived the reference filter.
    pub fn empty_after_filter(&self) -> bool {
        self.surviving == 0
    }
}

/// Hypervolume after normalizing by the ideal and nadir points of a
/// reference front, with reference point 1.1 in every objective.
pub fn normalized_hv(front_raw: &[Vec<f64>], reference_front: &[Vec<f64>], seed: u64) -> Result<NormalizedHv> {
    if reference_front.is_empty() {
        return Err(Error::Domain("reference front is empty".into()));
    }
    let m = reference_front[0].len();
    let bounds = ObjectiveBounds::fit(reference_front.iter().map(Vec::as_slice), m);
    let reference = vec![NORMALIZED_REFERENCE; m];
    let kept: Vec<Vec<f64>> = front_raw
        .iter()
        .map(|y| bounds.apply(y))
        .filter(|y| y.iter().all(|v| *v < NORMALIZED_REFERENCE))
        .collect();
    if kept.is_empty() {
        log::warn!("no point dominates the normalized reference point; hypervolume is 0");
        return Ok(NormalizedHv { value: 0.0, surviving: 0, samples: None });
    }
    if m == 2 {
        let value = hv_exact_2d(&kept, &reference)?;
        return Ok(NormalizedHv { value, surviving: kept.len(), samples: None });
    }
    let front = pareto_filter(&kept);
    let ideal: Vec<f64> = (0..m)
        .map(|j| front.points.iter().map(|p| p[j]).fold(0.0, f64::min))
        .collect();
    let value = hv_estimate(&front.points, &reference, &ideal, HV_ESTIMATE_SAMPLES, seed)?;
    Ok(NormalizedHv { value, surviving: kept.len(), samples: Some(HV_ESTIMATE_SAMPLES) })
}
