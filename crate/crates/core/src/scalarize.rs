//! Preference machinery: simplex sampling, Tchebycheff aggregation, the
//! preference/reference-vector transform and the hypervolume scalarization
//! estimator.
//!
//! All objectives are minimized. The aggregation target `g = -s_λ(y)` is the
//! quantity the in-context model predicts and the acquisitions maximize.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};

/// Smallest admissible preference weight. Keeps `c_λ` finite.
pub const PREFERENCE_FLOOR: f64 = 1e-6;

/// A point on the probability simplex with every weight at least
/// [`PREFERENCE_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct Preference(Vec<f64>);

impl Preference {
    /// Normalizes nonnegative weights onto the simplex and projects boundary
    /// points inward so that every component is at least the floor.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("preference needs at least one weight".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain(format!("preference weights must be finite and nonnegative: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Domain("preference weights sum to zero".into()));
        }
        let m = weights.len() as f64;
        let free = 1.0 - m * PREFERENCE_FLOOR;
        Ok(Self(weights.iter().map(|w| PREFERENCE_FLOOR + free * w / total).collect()))
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A unit-norm reference vector in the positive orthant.
#[derive(Debug, Clone, PartialEq)]
pub struct RefVec(Vec<f64>);

impl RefVec {
    pub fn components(&self) -> &[f64] {
        &self.0
    }
}

/// Ideal point used to offset objectives before scalarizing.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarizationContext {
    pub ideal: Vec<f64>,
}

impl ScalarizationContext {
    /// Ideal point at the origin, the convention for normalized objectives.
    pub fn origin(m: usize) -> Self {
        Self { ideal: vec![0.0; m] }
    }
}

/// Uniform draw from the simplex (normalized unit-rate exponentials).
pub fn sample_preference<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Preference {
    assert!(m >= 1, "preference dimension must be positive");
    if m == 1 {
        return Preference(vec![1.0]);
    }
    let draws: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    Preference::new(&draws).expect("exponential draws are positive")
}

/// `max_i λ_i (y_i - z*_i)`.
pub fn tchebycheff(y: &[f64], pref: &Preference, ctx: &ScalarizationContext) -> f64 {
    debug_assert_eq!(y.len(), pref.dim());
    debug_assert_eq!(y.len(), ctx.ideal.len());
    y.iter()
        .zip(pref.weights())
        .zip(&ctx.ideal)
        .map(|((y, l), z)| l * (y - z))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The aggregation target `g = -s_λ(y)`.
pub fn aggregation_target(y: &[f64], pref: &Preference, ctx: &ScalarizationContext) -> f64 {
    -tchebycheff(y, pref, ctx)
}

/// `c_λ = sqrt(Σ 1/λ_j²)`.
pub fn lambda_constant(pref: &Preference) -> f64 {
    pref.weights().iter().map(|l| 1.0 / (l * l)).sum::<f64>().sqrt()
}

/// `w_j = 1 / (λ_j c_λ)`.
pub fn preference_to_refvec(pref: &Preference) -> RefVec {
    let c = lambda_constant(pref);
    RefVec(pref.weights().iter().map(|l| 1.0 / (l * c)).collect())
}

/// Inverse of [`preference_to_refvec`]: `λ_j ∝ 1/w_j`, renormalized onto the
/// simplex. No floor is applied, so the round trip is exact for interior
/// preferences.
pub fn refvec_to_preference(w: &RefVec) -> Preference {
    let inv: Vec<f64> = w.0.iter().map(|w| 1.0 / w).collect();
    let total: f64 = inv.iter().sum();
    Preference(inv.into_iter().map(|v| v / total).collect())
}

/// Volume of the positive orthant of the unit `m`-ball,
/// `π^{m/2} / (2^m Γ(m/2 + 1))`.
pub fn dimension_constant(m: usize) -> f64 {
    let half = m as f64 / 2.0;
    (half * std::f64::consts::PI.ln() - m as f64 * std::f64::consts::LN_2 - libm::lgamma(half + 1.0)).exp()
}

/// Uniform draw on the positive orthant of the unit sphere.
pub fn sample_refvec<R: Rng + ?Sized>(rng: &mut R, m: usize) -> RefVec {
    loop {
        let v: Vec<f64> = (0..m)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z.abs()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 && v.iter().all(|x| *x > 0.0) {
            return RefVec(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

/// `max_j (y_j - z*_j) / w_j`.
pub fn tchebycheff_refvec(y: &[f64], w: &RefVec, ideal: &[f64]) -> f64 {
    y.iter()
        .zip(&w.0)
        .zip(ideal)
        .map(|((y, w), z)| (y - z) / w)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `t` raised to an integer power with its sign preserved, so that the map is
/// monotone for every `m`.
pub fn signed_pow(t: f64, m: usize) -> f64 {
    t.signum() * t.abs().powi(m as i32)
}

/// A fixed set of reference vectors. Reusing one set across several fronts
/// gives common-random-number comparisons between their estimates.
#[derive(Debug, Clone)]
pub struct RefVecSample {
    vectors: Vec<RefVec>,
}

impl RefVecSample {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, m: usize, count: usize) -> Self {
        Self { vectors: (0..count).map(|_| sample_refvec(rng, m)).collect() }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Hypervolume of `front` with respect to `reference`, measured from the
    /// ideal point of `ctx`.
    ///
    /// The region between the ideal point and the front is star-shaped from
    /// the ideal point; along direction `w` it ends at
    /// `min_i s_w(y_i)`, and it is additionally cut where the ray leaves the
    /// reference box, at `min_j (r_j - z*_j) / w_j`. Its volume is
    /// `c_m E_w[ρ(w)^m]`, and the hypervolume is the box volume minus that.
    pub fn hypervolume(&self, front: &[Vec<f64>], reference: &[f64], ctx: &ScalarizationContext) -> Result<f64> {
        let m = reference.len();
        validate_front(front, reference, &ctx.ideal)?;
        if self.vectors.is_empty() {
            return Err(Error::Domain("no reference vectors drawn".into()));
        }
        if self.vectors[0].0.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: self.vectors[0].0.len() });
        }
        let box_volume: f64 = reference.iter().zip(&ctx.ideal).map(|(r, z)| r - z).product();
        let total: f64 = self
            .vectors
            .iter()
            .map(|w| {
                let exit = reference
                    .iter()
                    .zip(&ctx.ideal)
                    .zip(&w.0)
                    .map(|((r, z), w)| (r - z) / w)
                    .fold(f64::INFINITY, f64::min);
                let reach = front
                    .iter()
                    .map(|y| tchebycheff_refvec(y, w, &ctx.ideal))
                    .fold(exit, f64::min);
                reach.powi(m as i32)
            })
            .sum();
        Ok(box_volume - dimension_constant(m) * total / self.vectors.len() as f64)
    }
}

fn validate_front(front: &[Vec<f64>], reference: &[f64], ideal: &[f64]) -> Result<()> {
    if front.is_empty() {
        return Err(Error::Domain("front is empty".into()));
    }
    if ideal.len() != reference.len() {
        return Err(Error::DimensionMismatch { expected: reference.len(), got: ideal.len() });
    }
    for y in front {
        if y.len() != reference.len() {
            return Err(Error::DimensionMismatch { expected: reference.len(), got: y.len() });
        }
        let ok = y.iter().zip(reference).zip(ideal).all(|((y, r), z)| z <= y && y < r);
        if !ok {
            return Err(Error::Domain(format!("front point {y:?} violates ideal <= y < reference")));
        }
    }
    Ok(())
}

/// Monte-Carlo hypervolume through the Tchebycheff scalarization identity,
/// with `samples` fresh reference vectors.
pub fn hv_scalarization_estimate<R: Rng + ?Sized>(
    front: &[Vec<f64>],
    reference: &[f64],
    ctx: &ScalarizationContext,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    validate_front(front, reference, &ctx.ideal)?;
    RefVecSample::draw(rng, reference.len(), samples).hypervolume(front, reference, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pref(w: &[f64]) -> Preference {
        Preference::new(w).unwrap()
    }

    #[test]
    fn one_objective_preference_is_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_preference(&mut rng, 1).weights(), &[1.0]);
    }

    #[test]
    fn preference_component_means_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sums = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let p = sample_preference(&mut rng, 3);
            let total: f64 = p.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(p.weights().iter().all(|w| *w >= PREFERENCE_FLOOR));
            for (s, w) in sums.iter_mut().zip(p.weights()) {
                *s += w;
            }
        }
        for s in sums {
            assert!((s / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn boundary_preference_is_projected_inward() {
        let p = pref(&[1.0, 0.0]);
        assert!(p.weights()[1] >= PREFERENCE_FLOOR);
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(lambda_constant(&p).is_finite());
    }

    #[test]
    fn tchebycheff_examples() {
        let ctx = ScalarizationContext::origin(2);
        let p = Preference(vec![0.5, 0.5]);
        assert!((tchebycheff(&[0.2, 0.4], &p, &ctx) - 0.2).abs() < 1e-15);
        assert!((aggregation_target(&[0.2, 0.4], &p, &ctx) + 0.2).abs() < 1e-15);
        assert_eq!(tchebycheff(&[0.0, 0.0], &p, &ctx), 0.0);
        let one = ScalarizationContext::origin(1);
        assert_eq!(tchebycheff(&[0.5], &Preference(vec![1.0]), &one), 0.5);
    }

    #[test]
    fn aggregation_is_permutation_symmetric() {
        let ctx = ScalarizationContext::origin(3);
        let a = aggregation_target(&[0.1, 0.7, 0.3], &Preference(vec![0.2, 0.5, 0.3]), &ctx);
        let b = aggregation_target(&[0.3, 0.1, 0.7], &Preference(vec![0.3, 0.2, 0.5]), &ctx);
        assert_eq!(a, b);
    }

    #[test]
    fn constants() {
        assert!((lambda_constant(&Preference(vec![0.5, 0.5])) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(lambda_constant(&Preference(vec![1.0])), 1.0);
        assert!((dimension_constant(1) - 1.0).abs() < 1e-12);
        assert!((dimension_constant(2) - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        // orthant volume oracle: unit 3-ball volume 4π/3 split over 8 orthants
        assert!((dimension_constant(3) - std::f64::consts::PI / 6.0).abs() < 1e-12);
        // 4-ball: π²/2 over 16 orthants
        assert!((dimension_constant(4) - std::f64::consts::PI.powi(2) / 32.0).abs() < 1e-12);
    }

    #[test]
    fn refvec_examples() {
        let w = preference_to_refvec(&Preference(vec![0.5, 0.5]));
        let h = 2f64.sqrt() / 2.0;
        assert!((w.0[0] - h).abs() < 1e-12 && (w.0[1] - h).abs() < 1e-12);
        assert_eq!(preference_to_refvec(&Preference(vec![1.0])).0, vec![1.0]);
    }

    #[test]
    fn refvec_scalarization_matches_scaled_preference_scalarization() {
        // s_w = c_λ s_λ when w is the image of λ
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = sample_preference(&mut rng, 3);
            let y: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let w = preference_to_refvec(&p);
            let lhs = tchebycheff_refvec(&y, &w, &[0.0; 3]);
            let rhs = lambda_constant(&p) * tchebycheff(&y, &p, &ScalarizationContext::origin(3));
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn hv_single_objective_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hv = hv_scalarization_estimate(&[vec![0.3]], &[1.0], &ScalarizationContext::origin(1), 100, &mut rng).unwrap();
        assert!((hv - 0.7).abs() < 1e-12);
    }

    #[test]
    fn hv_two_point_front() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let front = vec![vec![0.25, 0.75], vec![0.75, 0.25]];
        let hv = hv_scalarization_estimate(&front, &[1.0, 1.0], &ScalarizationContext::origin(2), 100_000, &mut rng).unwrap();
        assert!((hv - 0.3125).abs() < 0.01, "{hv}");
    }

    #[test]
    fn hv_single_box_three_objectives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = vec![0.2, 0.5, 0.4];
        let exact = 0.8 * 0.5 * 0.6;
        let hv = hv_scalarization_estimate(&[y], &[1.0; 3], &ScalarizationContext::origin(3), 100_000, &mut rng).unwrap();
        assert!((hv - exact).abs() / exact < 0.02, "{hv} vs {exact}");
    }

    #[test]
    fn hv_rejects_points_outside_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = ScalarizationContext::origin(2);
        assert!(matches!(
            hv_scalarization_estimate(&[vec![1.0, 0.5]], &[1.0, 1.0], &ctx, 10, &mut rng),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            hv_scalarization_estimate(&[vec![-0.1, 0.5]], &[1.0, 1.0], &ctx, 10, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn signed_pow_is_monotone() {
        assert_eq!(signed_pow(-0.5, 2), -0.25);
        assert_eq!(signed_pow(0.5, 2), 0.25);
        assert_eq!(signed_pow(-0.5, 1), -0.5);
    }
}
