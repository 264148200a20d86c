//! Test problems: the ZDT family, Omnitest, and a line-delimited JSON bridge
//! to problems implemented by an external process.
//!
//! Optimizers always work in the unit cube; [`to_native`] maps a unit point
//! into a problem's box before evaluation.

mod external;
mod sobol;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::metrics::pareto_filter;

pub use external::{ExternalProblem, DEFAULT_TIMEOUT};
pub use sobol::{sobol_points, star_discrepancy_2d, Sobol, MAX_SOBOL_DIM};

/// Names accepted by [`make_problem`].
pub const REGISTERED: [&str; 6] = ["zdt1", "zdt2", "zdt3", "zdt4", "zdt6", "omnitest"];

/// Default decision dimension of the ZDT problems.
pub const ZDT_DEFAULT_DIM: usize = 8;

/// Sweep resolution used to locate the ZDT3 front segments.
const ZDT3_SWEEP: usize = 10_000;

/// A box-bounded multi-objective minimization problem.
pub trait Problem: Send {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn n_objectives(&self) -> usize;
    /// Per-feature `(lo, hi)`.
    fn bounds(&self) -> &[(f64, f64)];
    /// Evaluates a point given in native coordinates.
    fn evaluate(&mut self, x: &[f64]) -> Result<Vec<f64>>;
    /// `n` points spread along the analytic Pareto front.
    fn true_front(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        let _ = n;
        Err(Error::NoAnalyticFront(self.name().to_string()))
    }
}

/// Maps a unit-cube point into the box.
pub fn to_native(bounds: &[(f64, f64)], u: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(bounds)
        .map(|(u, (lo, hi))| if *u >= 1.0 { *hi } else { lo + u * (hi - lo) })
        .collect()
}

/// Maps a point of the box into the unit cube.
pub fn to_unit(bounds: &[(f64, f64)], x: &[f64]) -> Vec<f64> {
    x.iter().zip(bounds).map(|(x, (lo, hi))| (x - lo) / (hi - lo)).collect()
}

fn check_bounds(x: &[f64], bounds: &[(f64, f64)]) -> Result<()> {
    if x.len() != bounds.len() {
        return Err(Error::DimensionMismatch { expected: bounds.len(), got: x.len() });
    }
    for (i, (v, (lo, hi))) in x.iter().zip(bounds).enumerate() {
        if !(v >= lo && v <= hi) {
            return Err(Error::Bounds(format!("x[{i}] = {v} outside [{lo}, {hi}]")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZdtVariant {
    Zdt1,
    Zdt2,
    Zdt3,
    Zdt4,
    Zdt6,
}

impl ZdtVariant {
    pub fn from_number(n: u8) -> Option<Self> {
        Some(match n {
            1 => Self::Zdt1,
            2 => Self::Zdt2,
            3 => Self::Zdt3,
            4 => Self::Zdt4,
            6 => Self::Zdt6,
            _ => return None,
        })
    }
}

/// ZDT objectives for `x` in `[0,1]^d`, `d ≥ 2`. ZDT4 maps its tail
/// variables to `[-5, 5]` internally.
pub fn zdt_evaluate(variant: ZdtVariant, x: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if d < 2 {
        return Err(Error::Shape(format!("ZDT needs at least two variables, got {d}")));
    }
    check_bounds(x, &vec![(0.0, 1.0); d])?;
    let tail = &x[1..];
    let tail_mean = tail.iter().sum::<f64>() / (d - 1) as f64;
    let (f1, h) = match variant {
        ZdtVariant::Zdt1 | ZdtVariant::Zdt2 | ZdtVariant::Zdt3 => (x[0], 1.0 + 9.0 * tail_mean),
        ZdtVariant::Zdt4 => {
            let s: f64 = tail
                .iter()
                .map(|u| {
                    let z = -5.0 + 10.0 * u;
                    z * z - 10.0 * (4.0 * PI * z).cos()
                })
                .sum();
            (x[0], 1.0 + 10.0 * (d - 1) as f64 + s)
        }
        ZdtVariant::Zdt6 => {
            let f1 = 1.0 - (-4.0 * x[0]).exp() * (6.0 * PI * x[0]).sin().powi(6);
            (f1, 1.0 + 9.0 * tail_mean.powf(0.25))
        }
    };
    let r = f1 / h;
    let f2 = h * match variant {
        ZdtVariant::Zdt1 | ZdtVariant::Zdt4 => 1.0 - r.sqrt(),
        ZdtVariant::Zdt2 | ZdtVariant::Zdt6 => 1.0 - r * r,
        ZdtVariant::Zdt3 => 1.0 - r.sqrt() - r * (10.0 * PI * f1).sin(),
    };
    Ok(vec![f1, f2])
}

/// Omnitest objectives `(Σ sin πx_i, Σ cos πx_i)` on `[0, 6]^d`.
pub fn omnitest_evaluate(x: &[f64]) -> Result<Vec<f64>> {
    check_bounds(x, &vec![(0.0, 6.0); x.len()])?;
    Ok(vec![x.iter().map(|v| (PI * v).sin()).sum(), x.iter().map(|v| (PI * v).cos()).sum()])
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
}

/// Smallest ZDT6 first objective, found by a dense sweep polished with
/// golden-section search.
fn zdt6_min_f1() -> f64 {
    let f = |x: f64| 1.0 - (-4.0 * x).exp() * (6.0 * PI * x).sin().powi(6);
    let n = 10_000;
    let best = (0..=n).min_by(|a, b| f(*a as f64 / n as f64).total_cmp(&f(*b as f64 / n as f64))).unwrap_or(0);
    let (mut lo, mut hi) = (((best as f64) - 1.0).max(0.0) / n as f64, ((best as f64) + 1.0).min(n as f64) / n as f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    f(0.5 * (lo + hi))
}

fn zdt_front(variant: ZdtVariant, n: usize) -> Vec<Vec<f64>> {
    match variant {
        // evenly spaced in f2 = 1 - sqrt(f1)
        ZdtVariant::Zdt1 | ZdtVariant::Zdt4 => linspace(0.0, 1.0, n).map(|t| vec![t * t, 1.0 - t]).collect(),
        ZdtVariant::Zdt2 => linspace(0.0, 1.0, n).map(|f1| vec![f1, 1.0 - f1 * f1]).collect(),
        ZdtVariant::Zdt6 => linspace(zdt6_min_f1(), 1.0, n).map(|f1| vec![f1, 1.0 - f1 * f1]).collect(),
        ZdtVariant::Zdt3 => zdt3_front(n),
    }
}

fn zdt3_f2(f1: f64) -> f64 {
    1.0 - f1.sqrt() - f1 * (10.0 * PI * f1).sin()
}

/// Segments of the disconnected ZDT3 front as `(f1_lo, f1_hi)`.
fn zdt3_segments() -> Vec<(f64, f64)> {
    let sweep: Vec<Vec<f64>> = linspace(0.0, 1.0, ZDT3_SWEEP).map(|f1| vec![f1, zdt3_f2(f1)]).collect();
    let front = pareto_filter(&sweep);
    let step = 1.0 / (ZDT3_SWEEP - 1) as f64;
    let mut f1s: Vec<f64> = front.points.iter().map(|p| p[0]).collect();
    f1s.sort_by(f64::total_cmp);
    let mut segments: Vec<(f64, f64)> = Vec::new();
    for f1 in f1s {
        match segments.last_mut() {
            Some(seg) if f1 - seg.1 < 1.5 * step => seg.1 = f1,
            _ => segments.push((f1, f1)),
        }
    }
    segments
}

fn zdt3_front(n: usize) -> Vec<Vec<f64>> {
    let segments = zdt3_segments();
    let total: f64 = segments.iter().map(|(a, b)| b - a).sum();
    let k = segments.len();
    let mut counts: Vec<usize> = segments.iter().map(|(a, b)| ((b - a) / total * n as f64).floor() as usize).collect();
    // hand out the rounding remainder to the longest segments
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| (segments[j].1 - segments[j].0).total_cmp(&(segments[i].1 - segments[i].0)));
    let mut left = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle().take(k * (left / k.max(1) + 1)) {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    segments
        .iter()
        .zip(counts)
        .flat_map(|(&(a, b), c)| linspace(a, b, c).map(|f1| vec![f1, zdt3_f2(f1)]).collect::<Vec<_>>())
        .collect()
}

/// Quarter circle of radius `d` traced by `(d sin θ, d cos θ)` for
/// `θ ∈ [π, 3π/2]`.
fn omnitest_front(d: usize, n: usize) -> Vec<Vec<f64>> {
    let r = d as f64;
    linspace(PI, 1.5 * PI, n).map(|t| vec![r * t.sin(), r * t.cos()]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Zdt(ZdtVariant),
    Omnitest,
}

/// One of the built-in analytic problems.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    name: String,
    kind: SyntheticKind,
    bounds: Vec<(f64, f64)>,
}

impl SyntheticProblem {
    pub fn new(kind: SyntheticKind, d: usize) -> Result<Self> {
        let (name, bounds) = match kind {
            SyntheticKind::Zdt(v) => {
                if d < 2 {
                    return Err(Error::Config(format!("ZDT problems need d >= 2, got {d}")));
                }
                let n = match v {
                    ZdtVariant::Zdt1 => 1,
                    ZdtVariant::Zdt2 => 2,
                    ZdtVariant::Zdt3 => 3,
                    ZdtVariant::Zdt4 => 4,
                    ZdtVariant::Zdt6 => 6,
                };
                (format!("zdt{n}"), vec![(0.0, 1.0); d])
            }
            SyntheticKind::Omnitest => {
                if d == 0 {
                    return Err(Error::Config("omnitest needs d >= 1".into()));
                }
                ("omnitest".to_string(), vec![(0.0, 6.0); d])
            }
        };
        Ok(Self { name, kind, bounds })
    }

    pub fn kind(&self) -> SyntheticKind {
        self.kind
    }
}

impl Problem for SyntheticProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn n_objectives(&self) -> usize {
        2
    }

    fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            SyntheticKind::Zdt(v) => zdt_evaluate(v, x),
            SyntheticKind::Omnitest => omnitest_evaluate(x),
        }
    }

    fn true_front(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        Ok(match self.kind {
            SyntheticKind::Zdt(v) => zdt_front(v, n),
            SyntheticKind::Omnitest => omnitest_front(self.dim(), n),
        })
    }
}

/// Default decision dimension of a registered problem.
pub fn default_dim(name: &str) -> Option<usize> {
    match name {
        "omnitest" => Some(2),
        n if REGISTERED.contains(&n) => Some(ZDT_DEFAULT_DIM),
        _ => None,
    }
}

/// Builds a registered problem, optionally overriding its dimension.
pub fn make_problem(name: &str, d: Option<usize>) -> Result<SyntheticProblem> {
    let unknown = || Error::UnknownProblem { name: name.to_string(), registered: REGISTERED.join(", ") };
    let dim = d.or_else(|| default_dim(name)).ok_or_else(unknown)?;
    let kind = match name {
        "omnitest" => SyntheticKind::Omnitest,
        _ => {
            let n = name.strip_prefix("zdt").and_then(|s| s.parse::<u8>().ok()).ok_or_else(unknown)?;
            SyntheticKind::Zdt(ZdtVariant::from_number(n).ok_or_else(unknown)?)
        }
    };
    SyntheticProblem::new(kind, dim)
}
