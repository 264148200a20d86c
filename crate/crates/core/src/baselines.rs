//! Comparison algorithms: scrambled-Sobol random search and a ParEGO-style
//! GP surrogate that scalarizes with a random preference every iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acquisition::{
    optimize_acquisition, run_loop, AcquisitionSpec, Phase, Proposal, RunRecord, Trajectory, initial_design_size,
};
use crate::benchmarks::{sobol_points, to_native, Problem};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, solve_lower, solve_upper_transposed, JitterLadder};
use crate::scalarize::{aggregation_target, sample_preference, ScalarizationContext};

pub const GP_NOISE: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const LENGTHSCALE_MIN: f64 = 0.05;
pub const LENGTHSCALE_MAX: f64 = 2.0;
pub const LENGTHSCALE_GRID: usize = 16;
pub const SIGNAL_GRID: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

/// Kernel hyperparameters of the baseline GP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHyper {
    pub lengthscale: f64,
    pub signal: f64,
    pub noise: f64,
}

impl KernelHyper {
    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal * (-0.5 * r2 / (self.lengthscale * self.lengthscale)).exp()
    }
}

/// Lengthscales tried by [`gp_fit`], log-spaced over `[0.05, 2]`.
pub fn lengthscale_grid() -> Vec<f64> {
    let (lo, hi) = (LENGTHSCALE_MIN.ln(), LENGTHSCALE_MAX.ln());
    (0..LENGTHSCALE_GRID).map(|i| (lo + (hi - lo) * i as f64 / (LENGTHSCALE_GRID - 1) as f64).exp()).collect()
}

/// Zero-mean GP posterior with an isotropic RBF kernel.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    x: Vec<Vec<f64>>,
    hyper: KernelHyper,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    log_marginal: f64,
}

struct Factored {
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    log_marginal: f64,
}

fn factor(x: &[Vec<f64>], g: &[f64], hyper: &KernelHyper) -> Result<Factored> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = hyper.k(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += hyper.noise;
    }
    let (chol, jitter) = cholesky_with_jitter(&k, n, JitterLadder::DEFAULT)?;
    let mut alpha = g.to_vec();
    solve_lower(&chol, n, &mut alpha);
    let fit: f64 = alpha.iter().map(|a| a * a).sum();
    solve_upper_transposed(&chol, n, &mut alpha);
    let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
    let log_marginal = -0.5 * fit - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(Factored { chol, alpha, jitter, log_marginal })
}

impl GpPosterior {
    /// Conditions on fixed hyperparameters.
    pub fn with_hyper(x: &[Vec<f64>], g: &[f64], hyper: KernelHyper) -> Result<Self> {
        check_data(x, g)?;
        let f = factor(x, g, &hyper)?;
        Ok(Self { x: x.to_vec(), hyper, chol: f.chol, alpha: f.alpha, jitter: f.jitter, log_marginal: f.log_marginal })
    }

    pub fn hyper(&self) -> KernelHyper {
        self.hyper
    }

    /// Diagonal jitter added on top of the noise to factor the kernel matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    /// Predictive mean and variance of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let mut kx: Vec<f64> = self.x.iter().map(|xi| self.hyper.k(xi, x)).collect();
        let mean = kx.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        solve_lower(&self.chol, n, &mut kx);
        let explained: f64 = kx.iter().map(|v| v * v).sum();
        (mean, (self.hyper.signal - explained).max(VARIANCE_FLOOR))
    }
}

fn check_data(x: &[Vec<f64>], g: &[f64]) -> Result<()> {
    if x.len() < 2 {
        return Err(Error::Domain(format!("GP fit needs at least 2 points, got {}", x.len())));
    }
    if x.len() != g.len() {
        return Err(Error::Shape(format!("{} inputs but {} targets", x.len(), g.len())));
    }
    Ok(())
}

/// Fits the GP by grid search over lengthscale × signal variance, keeping
/// the pair with the highest log marginal likelihood. Noise is fixed.
pub fn gp_fit(x: &[Vec<f64>], g: &[f64]) -> Result<GpPosterior> {
    check_data(x, g)?;
    let mut best: Option<(KernelHyper, Factored)> = None;
    let mut last_err = None;
    for &lengthscale in &lengthscale_grid() {
        for &signal in &SIGNAL_GRID {
            let hyper = KernelHyper { lengthscale, signal, noise: GP_NOISE };
            match factor(x, g, &hyper) {
                Ok(f) => {
                    if best.as_ref().is_none_or(|(_, b)| f.log_marginal > b.log_marginal) {
                        best = Some((hyper, f));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    match best {
        Some((hyper, f)) => {
            Ok(GpPosterior { x: x.to_vec(), hyper, chol: f.chol, alpha: f.alpha, jitter: f.jitter, log_marginal: f.log_marginal })
        }
        None => Err(last_err.unwrap_or(Error::Factorization { jitter: 0.0 })),
    }
}

/// Closed-form expected improvement of a Gaussian over `best` (maximization).
pub fn gaussian_ei(mean: f64, std: f64, best: f64) -> f64 {
    if std <= 0.0 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / std;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    ((mean - best) * cdf + std * pdf).max(0.0)
}

/// One ParEGO iteration: draw a preference, scalarize the normalized
/// trajectory, fit a GP to the standardized aggregation values and maximize
/// Gaussian EI with the same pool-and-refine optimizer as the in-context
/// acquisitions.
pub fn gp_parego_step(traj: &Trajectory, spec: &AcquisitionSpec, rng: &mut ChaCha8Rng) -> Result<Proposal> {
    let y_norm = traj.normalized()?;
    let m = y_norm[0].len();
    let d = traj.x[0].len();
    let pref = sample_preference(rng, m);
    let ctx = ScalarizationContext::origin(m);
    let g: Vec<f64> = y_norm.iter().map(|y| aggregation_target(y, &pref, &ctx)).collect();
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let sd = (g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    let z: Vec<f64> = g.iter().map(|v| (v - mean) / sd).collect();
    let gp = gp_fit(&traj.x, &z)?;
    let best = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut score = |xs: &[Vec<f64>]| -> Result<Vec<f64>> {
        Ok(xs
            .iter()
            .map(|x| {
                let (mu, var) = gp.predict(x);
                gaussian_ei(mu, var.sqrt(), best)
            })
            .collect())
    };
    let (x, u) = optimize_acquisition(d, spec, &mut score, rng)?;
    Ok(Proposal { x, preference: Some(pref.weights().to_vec()), utility: Some(u) })
}

/// GP-ParEGO run on `problem`, sharing the initial design and driver with
/// the in-context optimizer. Batches draw one preference per candidate.
pub fn run_gp_parego(
    problem: &mut dyn Problem,
    spec: &AcquisitionSpec,
    budget: usize,
    seed: u64,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<Trajectory> {
    spec.validate()?;
    let mut propose = |traj: &Trajectory, k: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Proposal>> {
        let mut step_rng = ChaCha8Rng::seed_from_u64(rng.random());
        (0..k).map(|_| gp_parego_step(traj, spec, &mut step_rng)).collect()
    };
    run_loop(problem, "gp-parego", budget, spec.q, seed, &mut propose, sink)
}

/// Non-adaptive search: the shared initial design followed by `budget`
/// further points of the same scrambled Sobol sequence.
pub fn sobol_search(
    problem: &mut dyn Problem,
    budget: usize,
    seed: u64,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<Trajectory> {
    let d = problem.dim();
    let init = initial_design_size(d);
    let bounds = problem.bounds().to_vec();
    let mut traj = Trajectory::default();
    for (i, x) in sobol_points(d, init + budget, seed)?.into_iter().enumerate() {
        let started = std::time::Instant::now();
        let native = to_native(&bounds, &x);
        let y = problem.evaluate(&native)?;
        let (iter, phase) = if i < init { (0, Phase::Init) } else { (i + 1 - init, Phase::Opt) };
        sink(&RunRecord {
            iter,
            phase,
            x: native,
            y: y.clone(),
            acq: "sobol".into(),
            preference: None,
            utility: None,
            seed,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
        traj.push(x, y);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{initial_design, AcqKind};
    use crate::benchmarks::make_problem;
    use rand_distr::{Distribution, StandardNormal};

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random()).collect()).collect()
    }

    #[test]
    fn interpolates_training_data_as_noise_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_points(&mut rng, 12, 2);
        let g: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[1]).collect();
        let gp = GpPosterior::with_hyper(&x, &g, KernelHyper { lengthscale: 0.2, signal: 1.0, noise: 1e-12 }).unwrap();
        for (xi, gi) in x.iter().zip(&g) {
            assert!((gp.predict(xi).0 - gi).abs() < 1e-6);
        }
        let fitted = gp_fit(&x, &g).unwrap();
        for xi in &x {
            assert!(fitted.predict(xi).1 <= GP_NOISE + fitted.jitter() + 1e-6);
        }
    }

    #[test]
    fn far_field_reverts_to_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_points(&mut rng, 8, 3);
        let g: Vec<f64> = x.iter().map(|p| p[0] - p[2]).collect();
        let gp = gp_fit(&x, &g).unwrap();
        let far = vec![1e3; 3];
        let (mu, var) = gp.predict(&far);
        assert!(mu.abs() < 1e-12);
        assert!((var - gp.hyper().signal).abs() < 1e-12);
    }

    #[test]
    fn grid_choice_maximizes_marginal_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_points(&mut rng, 10, 2);
        let g: Vec<f64> = x.iter().map(|p| (6.0 * p[0]).cos()).collect();
        let gp = gp_fit(&x, &g).unwrap();
        for &l in &lengthscale_grid() {
            for &s in &SIGNAL_GRID {
                let other = GpPosterior::with_hyper(&x, &g, KernelHyper { lengthscale: l, signal: s, noise: GP_NOISE }).unwrap();
                assert!(other.log_marginal_likelihood() <= gp.log_marginal_likelihood() + 1e-12);
            }
        }
        assert_eq!(lengthscale_grid().len(), 16);
        assert!((lengthscale_grid()[0] - 0.05).abs() < 1e-15 && (lengthscale_grid()[15] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_are_rejected() {
        assert!(matches!(gp_fit(&[vec![0.5]], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn gaussian_ei_closed_forms() {
        assert_eq!(gaussian_ei(0.3, 0.0, 0.3), 0.0);
        assert_eq!(gaussian_ei(0.5, 0.0, 0.3), 0.5 - 0.3);
        assert!((gaussian_ei(1.0, 1.0, 1.0) - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!((gaussian_ei(1.0, 1.0, 1.0) - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn gaussian_ei_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = 1_000_000;
        let normals: Vec<f64> = (0..samples).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..50 {
            let mu: f64 = rng.random_range(-1.0..1.0);
            let sd: f64 = rng.random_range(0.05..1.0);
            let best: f64 = rng.random_range(-1.0..1.0);
            let mc = normals.iter().map(|z| (mu + sd * z - best).max(0.0)).sum::<f64>() / samples as f64;
            assert!((mc - gaussian_ei(mu, sd, best)).abs() < 1e-3);
        }
    }

    #[test]
    fn sobol_search_starts_with_the_shared_design() {
        let mut problem = make_problem("zdt1", Some(4)).unwrap();
        let mut xs = Vec::new();
        let traj = sobol_search(&mut problem, 0, 9, &mut |r: &RunRecord| {
            assert_eq!(r.phase, Phase::Init);
            xs.push(r.x.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(traj.x, initial_design(4, 9).unwrap());
        let bounds = problem.bounds().to_vec();
        let native: Vec<Vec<f64>> = traj.x.iter().map(|x| to_native(&bounds, x)).collect();
        assert_eq!(xs, native);
        let longer = sobol_search(&mut problem, 5, 9, &mut |_| Ok(())).unwrap();
        assert_eq!(longer.len(), 15);
        assert_eq!(&longer.x[..10], &traj.x[..]);
    }

    #[test]
    fn parego_step_and_run_share_the_driver() {
        let spec = AcquisitionSpec { candidate_pool: 64, restarts: 4, refine_steps: 5, ..AcquisitionSpec::new(AcqKind::Ei) };
        let mut problem = make_problem("zdt2", Some(3)).unwrap();
        let mut records = Vec::new();
        let traj = run_gp_parego(&mut problem, &spec, 3, 5, &mut |r: &RunRecord| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(traj.len(), 8 + 3);
        assert_eq!(&traj.x[..8], &initial_design(3, 5).unwrap()[..]);
        assert!(records[8..].iter().all(|r| r.acq == "gp-parego" && r.preference.is_some()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = gp_parego_step(&traj, &spec, &mut rng).unwrap();
        assert!(p.x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.utility.unwrap() >= 0.0);
    }
}
