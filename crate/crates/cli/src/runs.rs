//! Problem and algorithm selection, run execution to JSONL, and anytime
//! quality curves over finished runs.

use std::fs::File;
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use fomemo::acquisition::{run_optimization, AcqKind, AcquisitionSpec, Phase, RunRecord, Trajectory};
use fomemo::baselines::{run_gp_parego, sobol_search};
use fomemo::benchmarks::{make_problem, ExternalProblem, Problem, DEFAULT_TIMEOUT};
use fomemo::metrics::{dominates, igd_plus, normalized_hv, weakly_dominates};
use fomemo::model::{load_checkpoint, Model};

use crate::error::{CliError, Result};

/// Points used when an analytic reference front is requested.
pub const REFERENCE_FRONT_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    Fomemo(AcqKind),
    Sobol,
    GpParego,
}

impl Algo {
    /// Accepts `ei`, `ucb`, `uhvi` (optionally prefixed `fomemo-`), `sobol`
    /// and `gp-parego`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "sobol" => Ok(Self::Sobol),
            "gp-parego" | "parego" => Ok(Self::GpParego),
            _ => AcqKind::parse(s.strip_prefix("fomemo-").unwrap_or(s))
                .map(Self::Fomemo)
                .map_err(|_| CliError::Config(format!("unknown algorithm `{s}` (expected ei, ucb, uhvi, sobol or gp-parego)"))),
        }
    }

    /// Family name: `fomemo`, `sobol` or `gp-parego`.
    pub fn family(&self) -> &'static str {
        match self {
            Self::Fomemo(_) => "fomemo",
            Self::Sobol => "sobol",
            Self::GpParego => "gp-parego",
        }
    }

    /// The `acq` field written into run records.
    pub fn acq(&self) -> &'static str {
        match self {
            Self::Fomemo(k) => k.as_str(),
            Self::Sobol => "sobol",
            Self::GpParego => "gp-parego",
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Fomemo(k) => format!("fomemo-{}", k.as_str()),
            other => other.acq().to_string(),
        }
    }

    pub fn needs_model(&self) -> bool {
        matches!(self, Self::Fomemo(_))
    }
}

/// How to build the objective function for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    /// Objective count and per-dimension bounds of an `external:` problem.
    pub external: Option<(usize, (f64, f64))>,
}

impl ProblemSpec {
    /// `name` is a registered problem or `external:<command>`.
    pub fn new(name: &str, dim: Option<usize>, objectives: Option<usize>, bounds: Option<(f64, f64)>) -> Result<Self> {
        if let Some(cmd) = name.strip_prefix("external:") {
            if cmd.trim().is_empty() {
                return Err(CliError::Config("external problem needs a command after `external:`".into()));
            }
            let dim = dim.ok_or_else(|| CliError::Config("external problems need --dim".into()))?;
            let m = objectives.ok_or_else(|| CliError::Config("external problems need --objectives".into()))?;
            return Ok(Self { name: name.to_string(), dim, external: Some((m, bounds.unwrap_or((0.0, 1.0)))) });
        }
        let problem = make_problem(name, dim)?;
        Ok(Self { name: name.to_string(), dim: problem.dim(), external: None })
    }

    pub fn open(&self) -> Result<Box<dyn Problem>> {
        match self.external {
            Some((m, b)) => {
                let cmd = &self.name["external:".len()..];
                Ok(Box::new(ExternalProblem::spawn(cmd, m, vec![b; self.dim], DEFAULT_TIMEOUT)?))
            }
            None => Ok(Box::new(make_problem(&self.name, Some(self.dim))?)),
        }
    }

    pub fn reference_front(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.open()?.true_front(REFERENCE_FRONT_POINTS)?)
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt = load_checkpoint(path)?;
    Ok(Model::new(ckpt.params, ckpt.support)?)
}

/// Runs one algorithm and streams its records to `out` as JSONL. Returns the
/// trajectory and the elapsed wall time.
pub fn execute_run(
    problem: &ProblemSpec,
    algo: Algo,
    model: Option<&Model>,
    spec: &AcquisitionSpec,
    budget: usize,
    seed: u64,
    out: &Path,
) -> Result<(Trajectory, Duration)> {
    let started = Instant::now();
    let file = File::create(out).map_err(|e| CliError::io(out, e))?;
    let mut writer = LineWriter::new(file);
    let mut sink = |r: &RunRecord| -> fomemo::Result<()> {
        let line = serde_json::to_string(r)?;
        writeln!(writer, "{line}")?;
        Ok(())
    };
    let mut p = problem.open()?;
    let traj = match algo {
        Algo::Fomemo(kind) => {
            let model = model.ok_or_else(|| CliError::Config(format!("{} needs --ckpt", algo.label())))?;
            run_optimization(p.as_mut(), model, &AcquisitionSpec { kind, ..*spec }, budget, seed, &mut sink)?
        }
        Algo::Sobol => sobol_search(p.as_mut(), budget, seed, &mut sink)?,
        Algo::GpParego => run_gp_parego(p.as_mut(), &AcquisitionSpec { kind: AcqKind::Ei, ..*spec }, budget, seed, &mut sink)?,
    };
    writer.flush().map_err(|e| CliError::io(out, e))?;
    Ok((traj, started.elapsed()))
}

/// Reads a run log, naming `file:line` on malformed input.
pub fn read_run(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Parse { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    IgdPlus,
    Hv,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "igdplus" | "igd+" => Ok(Self::IgdPlus),
            "hv" => Ok(Self::Hv),
            other => Err(CliError::Config(format!("unknown metric `{other}` (expected igdplus or hv)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::IgdPlus => "igdplus",
            Self::Hv => "hv",
        }
    }
}

/// Quality of the best-so-far front after `budget` post-initialization
/// evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub budget: usize,
    pub value: f64,
    /// Monte-Carlo sample count when the value is an estimate.
    pub samples: Option<usize>,
    pub wall_ms: u64,
}

fn insert_nondominated(front: &mut Vec<Vec<f64>>, y: &[f64]) -> bool {
    if front.iter().any(|p| weakly_dominates(p, y)) {
        return false;
    }
    front.retain(|p| !dominates(y, p));
    front.push(y.to_vec());
    true
}

/// Anytime curve: one point once the initial design is in, then one per
/// optimization evaluation.
pub fn anytime_curve(records: &[RunRecord], reference: &[Vec<f64>], metric: Metric, seed: u64) -> Result<Vec<CurvePoint>> {
    let mut front: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    let mut last: Option<CurvePoint> = None;
    let mut wall = 0u64;
    let mut batch_wall = (0usize, 0u64);
    let n_init = records.iter().take_while(|r| r.phase == Phase::Init).count();
    for (i, r) in records.iter().enumerate() {
        match r.phase {
            Phase::Init => wall += r.wall_ms,
            Phase::Opt => {
                if r.iter != batch_wall.0 {
                    batch_wall = (r.iter, 0);
                }
                // records of one batch carry time since the batch started
                wall += r.wall_ms.saturating_sub(batch_wall.1);
                batch_wall.1 = r.wall_ms.max(batch_wall.1);
            }
        }
        let changed = insert_nondominated(&mut front, &r.y);
        if i + 1 < n_init {
            continue;
        }
        let budget = i + 1 - n_init;
        let (value, samples) = match last {
            Some(p) if !changed => (p.value, p.samples),
            _ => match metric {
                Metric::IgdPlus => (igd_plus(&front, reference)?, None),
                Metric::Hv => {
                    let hv = normalized_hv(&front, reference, seed)?;
                    (hv.value, hv.samples)
                }
            },
        };
        let point = CurvePoint { budget, value, samples, wall_ms: wall };
        out.push(point);
        last = Some(point);
    }
    Ok(out)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
