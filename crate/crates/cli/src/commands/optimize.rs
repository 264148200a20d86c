use fomemo::acquisition::AcquisitionSpec;

use super::{create_dir, OptimizeArgs};
use crate::error::{CliError, Result};
use crate::manifest::{checkpoint_id, sha256_hex, unix_now, RunEntry, RunManifest, RunStatus};
use crate::runs::{execute_run, load_model, Algo, ProblemSpec};

pub const RUN_FILE: &str = "run.jsonl";

/// Hash of everything that determines a run's records.
pub fn cell_hash(
    problem: &ProblemSpec,
    algo: Algo,
    spec: &AcquisitionSpec,
    budget: usize,
    seed: u64,
    ckpt: Option<&str>,
) -> String {
    let key = serde_json::json!({
        "problem": problem.name,
        "dim": problem.dim,
        "algo": algo.label(),
        "spec": spec,
        "budget": budget,
        "seed": seed,
        "checkpoint": ckpt,
    });
    sha256_hex(key.to_string().as_bytes())
}

pub fn run(args: &OptimizeArgs) -> Result<()> {
    let algo = Algo::parse(&args.acq)?;
    if args.q == 0 {
        return Err(CliError::Config("--q must be at least 1".into()));
    }
    let p = &args.problem;
    let problem = ProblemSpec::new(&p.problem, p.dim, p.objectives, p.bounds)?;
    let spec = args.acq_args.spec(args.q);
    spec.validate()?;
    let (model, ckpt_id) = match (&args.ckpt, algo.needs_model()) {
        (Some(path), true) => (Some(load_model(path)?), Some(checkpoint_id(path)?)),
        (None, true) => return Err(CliError::Config(format!("{} needs --ckpt", algo.label()))),
        _ => (None, None),
    };
    create_dir(&args.out)?;
    let hash = cell_hash(&problem, algo, &spec, args.budget, args.seed, ckpt_id.as_deref());
    let mut manifest = RunManifest::new("optimize", hash.clone(), Some(args.seed), ckpt_id);
    manifest.runs.push(RunEntry {
        file: RUN_FILE.into(),
        problem: problem.name.clone(),
        dim: problem.dim,
        algo: algo.family().into(),
        acq: algo.acq().into(),
        replicate: 0,
        seed: args.seed,
        budget: args.budget,
        q: args.q,
        cell_hash: hash,
        status: RunStatus::Pending,
        error: None,
        wall_ms: 0,
    });
    manifest.save(&args.out)?;
    let result = execute_run(&problem, algo, model.as_ref(), &spec, args.budget, args.seed, &args.out.join(RUN_FILE));
    let entry = &mut manifest.runs[0];
    manifest.finished_unix = Some(unix_now());
    match result {
        Ok((traj, wall)) => {
            entry.status = RunStatus::Done;
            entry.wall_ms = wall.as_millis() as u64;
            manifest.save(&args.out)?;
            log::info!("{} evaluations written to {}", traj.len(), args.out.join(RUN_FILE).display());
            Ok(())
        }
        Err(e) => {
            entry.status = RunStatus::Failed;
            entry.error = Some(e.to_string());
            manifest.save(&args.out)?;
            Err(e)
        }
    }
}
