//! In-context acquisition functions and the optimization loop that uses them.
//!
//! The trajectory is min-max normalized before every proposal and the ideal
//! point is the origin of that normalized space. Candidates live in the unit
//! cube; problems map them into their own boxes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::benchmarks::{sobol_points, to_native, Problem};
use crate::error::{Error, Result};
use crate::metrics::{dominates, ObjectiveBounds};
use crate::model::{Context, Model, PosteriorHistogram};
use crate::scalarize::{
    aggregation_target, dimension_constant, lambda_constant, sample_preference, signed_pow, Preference,
    ScalarizationContext,
};

/// Two candidates closer than this in every coordinate are duplicates.
pub const DUPLICATE_TOL: f64 = 1e-6;
const SIGMA_START: f64 = 0.1;
const SIGMA_END: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcqKind {
    Ei,
    Ucb,
    Uhvi,
}

impl AcqKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ei => "ei",
            Self::Ucb => "ucb",
            Self::Uhvi => "uhvi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ei" => Ok(Self::Ei),
            "ucb" => Ok(Self::Ucb),
            "uhvi" => Ok(Self::Uhvi),
            other => Err(Error::Config(format!("unknown acquisition `{other}` (expected ei, ucb or uhvi)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub kind: AcqKind,
    pub beta: f64,
    pub n_pref_samples: usize,
    pub q: usize,
    pub candidate_pool: usize,
    pub restarts: usize,
    pub refine_steps: usize,
}

impl AcquisitionSpec {
    pub fn new(kind: AcqKind) -> Self {
        Self { kind, beta: 1.0, n_pref_samples: 32, q: 1, candidate_pool: 1024, restarts: 20, refine_steps: 50 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta < 0.0 || self.n_pref_samples == 0 || self.q == 0 || self.candidate_pool == 0 {
            return Err(Error::Config(format!("invalid acquisition spec {self:?}")));
        }
        Ok(())
    }
}

/// Evaluated points: inputs in the unit cube, raw objective values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: Vec<f64>) {
        self.x.push(x);
        self.y.push(y);
    }

    /// Objectives min-max normalized over the trajectory.
    pub fn normalized(&self) -> Result<Vec<Vec<f64>>> {
        let m = self.y.first().ok_or(Error::EmptyTrajectory)?.len();
        let bounds = ObjectiveBounds::fit(self.y.iter().map(Vec::as_slice), m);
        Ok(self.y.iter().map(|y| bounds.apply(y)).collect())
    }
}

/// `max_i g_λ(y_i)` over normalized observations.
pub fn best_aggregation(y_norm: &[Vec<f64>], pref: &Preference) -> Result<f64> {
    if y_norm.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let ctx = ScalarizationContext::origin(pref.dim());
    Ok(y_norm.iter().map(|y| aggregation_target(y, pref, &ctx)).fold(f64::NEG_INFINITY, f64::max))
}

/// Preference-conditioned expected improvement over `best`.
pub fn acq_ei(posterior: &PosteriorHistogram, best: f64) -> f64 {
    posterior.ei_partial(best)
}

/// `μ + β σ` of the aggregation posterior.
pub fn acq_ucb(posterior: &PosteriorHistogram, beta: f64) -> f64 {
    posterior.ucb(beta)
}

/// Hypervolume-improvement utility from per-preference UCB values:
/// `c_m · mean_k c_λk^m · max(0, (−g*_k)^m − (−UCB_k)^m)`, with powers taken
/// sign-preserving.
pub fn uhvi_from_ucb(prefs: &[Preference], best: &[f64], ucb: &[f64]) -> f64 {
    let m = prefs[0].dim();
    let total: f64 = prefs
        .iter()
        .zip(best)
        .zip(ucb)
        .map(|((p, g), u)| lambda_constant(p).powi(m as i32) * (signed_pow(-g, m) - signed_pow(-u, m)).max(0.0))
        .sum();
    dimension_constant(m) * total / prefs.len() as f64
}

/// Source of preferences; swappable so tests can observe how many are drawn.
pub trait PreferenceSource {
    fn draw(&mut self, rng: &mut ChaCha8Rng, m: usize) -> Preference;
}

/// Uniform draws on the simplex.
#[derive(Debug, Default, Clone, Copy)]
pub struct SimplexPreferences;

impl PreferenceSource for SimplexPreferences {
    fn draw(&mut self, rng: &mut ChaCha8Rng, m: usize) -> Preference {
        sample_preference(rng, m)
    }
}

/// Model-side view of a trajectory: the encoded context and the normalized
/// objectives, possibly restricted to fit the model's prompt length.
pub struct Prompt {
    pub context: Context,
    pub y_norm: Vec<Vec<f64>>,
    pub d: usize,
    pub m: usize,
}

/// Indices of at most `limit` trajectory points: nondominated points first
/// (in order of appearance), then the most recent of the rest.
pub fn prompt_indices(y_norm: &[Vec<f64>], limit: usize) -> Vec<usize> {
    let n = y_norm.len();
    if n <= limit {
        return (0..n).collect();
    }
    let front: Vec<usize> = (0..n).filter(|&i| !y_norm.iter().any(|o| dominates(o, &y_norm[i]))).collect();
    let mut keep: Vec<usize> = front.into_iter().take(limit).collect();
    let rest: Vec<usize> = (0..n).rev().filter(|i| !keep.contains(i)).collect();
    let missing = limit - keep.len();
    keep.extend(rest.into_iter().take(missing));
    keep.sort_unstable();
    keep
}

impl Prompt {
    pub fn new(model: &Model, traj: &Trajectory) -> Result<Self> {
        let y_norm = traj.normalized()?;
        let d = traj.x[0].len();
        let m = y_norm[0].len();
        let keep = prompt_indices(&y_norm, model.config().max_sample_len - 1);
        let flat_x: Vec<f64> = keep.iter().flat_map(|&i| traj.x[i].iter().copied()).collect();
        let flat_y: Vec<f64> = keep.iter().flat_map(|&i| y_norm[i].iter().copied()).collect();
        let context = model.context(&flat_x, &flat_y, d, m)?;
        Ok(Self { context, y_norm, d, m })
    }

    /// Posterior histograms for every `(candidate, preference)` pair,
    /// candidate-major.
    pub fn posteriors(&self, model: &Model, xs: &[Vec<f64>], prefs: &[Preference]) -> Result<Vec<PosteriorHistogram>> {
        let mut qx = Vec::with_capacity(xs.len() * prefs.len() * self.d);
        let mut qp = Vec::with_capacity(xs.len() * prefs.len() * self.m);
        for x in xs {
            for p in prefs {
                qx.extend_from_slice(x);
                qp.extend_from_slice(p.weights());
            }
        }
        model.predict(&self.context, &qx, &qp)
    }
}

/// UHVI of a single candidate.
pub fn acq_uhvi(model: &Model, prompt: &Prompt, x: &[f64], prefs: &[Preference], beta: f64) -> Result<f64> {
    Ok(score_uhvi(model, prompt, std::slice::from_ref(&x.to_vec()), prefs, beta)?[0])
}

fn score_uhvi(model: &Model, prompt: &Prompt, xs: &[Vec<f64>], prefs: &[Preference], beta: f64) -> Result<Vec<f64>> {
    let best: Vec<f64> = prefs.iter().map(|p| best_aggregation(&prompt.y_norm, p)).collect::<Result<_>>()?;
    let post = prompt.posteriors(model, xs, prefs)?;
    Ok(post
        .chunks(prefs.len())
        .map(|hs| {
            let ucb: Vec<f64> = hs.iter().map(|h| acq_ucb(h, beta)).collect();
            uhvi_from_ucb(prefs, &best, &ucb)
        })
        .collect())
}

/// Proposes `k` candidates given the trajectory so far.
pub type Proposer<'a> = dyn FnMut(&Trajectory, usize, &mut ChaCha8Rng) -> Result<Vec<Proposal>> + 'a;

/// Scores candidates in the unit cube.
pub type Scorer<'a> = dyn FnMut(&[Vec<f64>]) -> Result<Vec<f64>> + 'a;

/// Maximizes `score` over `[0,1]^d`: score a scrambled Sobol pool, keep the
/// best `restarts` points, then refine each with Gaussian perturbations
/// whose scale decays geometrically. Returns the best point and its score.
pub fn optimize_acquisition(
    d: usize,
    spec: &AcquisitionSpec,
    score: &mut Scorer<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    let pool = sobol_points(d, spec.candidate_pool, rng.random())?;
    let values = score(&pool)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut current: Vec<Vec<f64>> = order.iter().take(spec.restarts.max(1)).map(|&i| pool[i].clone()).collect();
    let mut current_val: Vec<f64> = order.iter().take(spec.restarts.max(1)).map(|&i| values[i]).collect();
    for step in 0..spec.refine_steps {
        let frac = if spec.refine_steps > 1 { step as f64 / (spec.refine_steps - 1) as f64 } else { 0.0 };
        let sigma = SIGMA_START * (SIGMA_END / SIGMA_START).powf(frac);
        let proposals: Vec<Vec<f64>> = current
            .iter()
            .map(|x| {
                x.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(rng);
                        (v + sigma * z).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        let vals = score(&proposals)?;
        for (i, (p, v)) in proposals.into_iter().zip(vals).enumerate() {
            if v > current_val[i] {
                current[i] = p;
                current_val[i] = v;
            }
        }
    }
    let best = (0..current.len()).fold(0, |b, i| if current_val[i] > current_val[b] { i } else { b });
    Ok((current.swap_remove(best), current_val[best]))
}

/// One proposed candidate with the bookkeeping that goes into the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub x: Vec<f64>,
    pub preference: Option<Vec<f64>>,
    pub utility: Option<f64>,
}

fn optimize_for(
    model: &Model,
    prompt: &Prompt,
    spec: &AcquisitionSpec,
    prefs: &[Preference],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, f64)> {
    let d = prompt.d;
    match spec.kind {
        AcqKind::Ucb => {
            let mut score = |xs: &[Vec<f64>]| -> Result<Vec<f64>> {
                Ok(prompt.posteriors(model, xs, prefs)?.iter().map(|h| acq_ucb(h, spec.beta)).collect())
            };
            optimize_acquisition(d, spec, &mut score, rng)
        }
        AcqKind::Ei => {
            let best = best_aggregation(&prompt.y_norm, &prefs[0])?;
            let mut score = |xs: &[Vec<f64>]| -> Result<Vec<f64>> {
                Ok(prompt.posteriors(model, xs, prefs)?.iter().map(|h| acq_ei(h, best)).collect())
            };
            optimize_acquisition(d, spec, &mut score, rng)
        }
        AcqKind::Uhvi => {
            let mut score = |xs: &[Vec<f64>]| score_uhvi(model, prompt, xs, prefs, spec.beta);
            optimize_acquisition(d, spec, &mut score, rng)
        }
    }
}

fn is_duplicate(x: &[f64], others: &[Vec<f64>]) -> bool {
    others.iter().any(|o| o.iter().zip(x).all(|(a, b)| (a - b).abs() < DUPLICATE_TOL))
}

/// `q` candidates for the next round. EI and UCB optimize one sampled
/// preference per candidate; UHVI draws a fresh preference set per
/// candidate and shares it across every point scored for that candidate.
/// A candidate duplicating an evaluated point or an earlier candidate is
/// re-optimized once with fresh randomness and then accepted.
pub fn propose_batch(
    model: &Model,
    traj: &Trajectory,
    spec: &AcquisitionSpec,
    prefs_source: &mut dyn PreferenceSource,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Proposal>> {
    spec.validate()?;
    let prompt = Prompt::new(model, traj)?;
    let m = prompt.m;
    let mut out: Vec<Proposal> = Vec::with_capacity(spec.q);
    for _ in 0..spec.q {
        let count = if spec.kind == AcqKind::Uhvi { spec.n_pref_samples } else { 1 };
        let prefs: Vec<Preference> = (0..count).map(|_| prefs_source.draw(rng, m)).collect();
        let (mut x, mut u) = optimize_for(model, &prompt, spec, &prefs, rng)?;
        let taken: Vec<Vec<f64>> = traj.x.iter().cloned().chain(out.iter().map(|p| p.x.clone())).collect();
        if is_duplicate(&x, &taken) {
            let mut fresh = ChaCha8Rng::seed_from_u64(rng.random());
            (x, u) = optimize_for(model, &prompt, spec, &prefs, &mut fresh)?;
        }
        let preference = (spec.kind != AcqKind::Uhvi).then(|| prefs[0].weights().to_vec());
        out.push(Proposal { x, preference, utility: Some(u) });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Opt,
}

/// One evaluated point of a run, as written to the JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: usize,
    pub phase: Phase,
    /// Native problem coordinates.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub acq: String,
    pub preference: Option<Vec<f64>>,
    pub utility: Option<f64>,
    pub seed: u64,
    pub wall_ms: u64,
}

/// Size of the shared Sobol initial design.
pub fn initial_design_size(d: usize) -> usize {
    2 * (d + 1)
}

/// The initial design every algorithm starts from.
pub fn initial_design(d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    sobol_points(d, initial_design_size(d), seed)
}

/// Generic optimization driver: evaluates the initial design, then asks
/// `propose` for batches until `budget` further evaluations are spent.
/// Every record goes to `sink` as soon as it exists, so a failing run keeps
/// its partial log.
#[allow(clippy::too_many_arguments)]
pub fn run_loop(
    problem: &mut dyn Problem,
    acq_name: &str,
    budget: usize,
    q: usize,
    seed: u64,
    propose: &mut Proposer<'_>,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<Trajectory> {
    let d = problem.dim();
    let bounds = problem.bounds().to_vec();
    let mut traj = Trajectory::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut evaluate = |traj: &mut Trajectory, iter: usize, phase: Phase, p: Proposal, started: Instant| -> Result<()> {
        let native = to_native(&bounds, &p.x);
        let y = problem.evaluate(&native).map_err(|e| match e {
            Error::ProblemEvaluation(_) => e,
            other => Error::ProblemEvaluation(other.to_string()),
        })?;
        let record = RunRecord {
            iter,
            phase,
            x: native,
            y: y.clone(),
            acq: acq_name.to_string(),
            preference: p.preference,
            utility: p.utility,
            seed,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        sink(&record)?;
        traj.push(p.x, y);
        Ok(())
    };
    for x in initial_design(d, seed)? {
        evaluate(&mut traj, 0, Phase::Init, Proposal { x, preference: None, utility: None }, Instant::now())?;
    }
    let mut spent = 0;
    let mut iter = 0;
    while spent < budget {
        iter += 1;
        let started = Instant::now();
        let k = q.min(budget - spent);
        let batch = propose(&traj, k, &mut rng)?;
        for p in batch.into_iter().take(k) {
            evaluate(&mut traj, iter, Phase::Opt, p, started)?;
            spent += 1;
        }
    }
    Ok(traj)
}

/// In-context optimization of `problem` with a frozen model.
pub fn run_optimization(
    problem: &mut dyn Problem,
    model: &Model,
    spec: &AcquisitionSpec,
    budget: usize,
    seed: u64,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<Trajectory> {
    spec.validate()?;
    let mut source = SimplexPreferences;
    let mut propose = |traj: &Trajectory, k: usize, rng: &mut ChaCha8Rng| {
        let s = AcquisitionSpec { q: k, ..*spec };
        propose_batch(model, traj, &s, &mut source, rng)
    };
    run_loop(problem, spec.kind.as_str(), budget, spec.q, seed, &mut propose, sink)
}
