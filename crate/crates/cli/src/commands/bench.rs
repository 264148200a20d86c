use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fomemo::benchmarks::REGISTERED;

use super::optimize::cell_hash;
use super::{create_dir, BenchArgs};
use crate::error::{CliError, Result};
use crate::manifest::{checkpoint_id, derive_suite_seeds, sha256_hex, unix_now, RunEntry, RunManifest, RunStatus};
use crate::runs::{anytime_curve, execute_run, load_model, mean_std, read_run, Algo, CurvePoint, Metric, ProblemSpec};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "problem,algo,acq,budget,metric,mean,std,n";

/// Across-replicate aggregate at one budget.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub problem: String,
    pub algo: String,
    pub acq: String,
    pub budget: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Groups curves by (problem, algo, acq, metric, budget) and reports the
/// mean and sample standard deviation over replicates.
pub fn summarize(curves: &[(String, String, String, Metric, Vec<CurvePoint>)]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, &'static str, usize), Vec<f64>> = BTreeMap::new();
    for (problem, algo, acq, metric, curve) in curves {
        for p in curve {
            groups
                .entry((problem.clone(), algo.clone(), acq.clone(), metric.as_str(), p.budget))
                .or_default()
                .push(p.value);
        }
    }
    groups
        .into_iter()
        .map(|((problem, algo, acq, metric, budget), values)| {
            let (mean, std) = mean_std(&values);
            SummaryRow { problem, algo, acq, budget, metric: metric.to_string(), mean, std, n: values.len() }
        })
        .collect()
}

fn worker_count(requested: Option<usize>, jobs: usize) -> usize {
    let auto = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut n = requested.unwrap_or(auto);
    if let Some(cap) = std::env::var("FOMEMO_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        n = n.min(cap.max(1));
    }
    n.clamp(1, jobs.max(1))
}

fn suite_problems(args: &BenchArgs) -> Result<Vec<String>> {
    if let Some(list) = &args.problems {
        return Ok(list.iter().map(|s| s.trim().to_string()).collect());
    }
    match args.suite.as_str() {
        "synthetic" => Ok(REGISTERED.iter().map(|s| s.to_string()).collect()),
        other => Err(CliError::Config(format!("unknown suite `{other}` (expected synthetic)"))),
    }
}

pub fn run(args: &BenchArgs) -> Result<()> {
    let names = suite_problems(args)?;
    let problems: Vec<ProblemSpec> = names.iter().map(|n| ProblemSpec::new(n, None, None, None)).collect::<Result<_>>()?;
    let algos: Vec<Algo> = args.algos.iter().map(|a| Algo::parse(a)).collect::<Result<_>>()?;
    if args.seeds == 0 || args.q == 0 {
        return Err(CliError::Config("--seeds and --q must be at least 1".into()));
    }
    let spec = args.acq_args.spec(args.q);
    spec.validate()?;
    let (model, ckpt_id) = match (&args.ckpt, algos.iter().any(Algo::needs_model)) {
        (Some(path), true) => (Some(load_model(path)?), Some(checkpoint_id(path)?)),
        (None, true) => return Err(CliError::Config("model-based algorithms need --ckpt".into())),
        _ => (None, None),
    };
    let seeds = derive_suite_seeds(args.master_seed, &names, args.seeds)?;
    let out = args.out.as_path();
    create_dir(&out.join("runs"))?;

    let previous = RunManifest::load(out)?;
    let done: HashMap<String, RunEntry> = previous
        .map(|m| {
            m.runs
                .into_iter()
                .filter(|r| r.status == RunStatus::Done && out.join(&r.file).exists())
                .map(|r| (r.cell_hash.clone(), r))
                .collect()
        })
        .unwrap_or_default();

    let config_hash = sha256_hex(
        serde_json::json!({
            "problems": names, "algos": algos.iter().map(Algo::label).collect::<Vec<_>>(),
            "seeds": args.seeds, "master_seed": args.master_seed, "budget": args.budget, "spec": spec,
            "checkpoint": ckpt_id,
        })
        .to_string()
        .as_bytes(),
    );
    let mut manifest = RunManifest::new("bench", config_hash, Some(args.master_seed), ckpt_id.clone());
    let mut cells = Vec::new();
    for (pi, problem) in problems.iter().enumerate() {
        for &algo in &algos {
            for (r, &seed) in seeds[pi].iter().enumerate() {
                let hash = cell_hash(problem, algo, &spec, args.budget, seed, ckpt_id.as_deref());
                let entry = done.get(&hash).cloned().unwrap_or_else(|| RunEntry {
                    file: format!("runs/{}__{}__r{r}.jsonl", problem.name, algo.label()),
                    problem: problem.name.clone(),
                    dim: problem.dim,
                    algo: algo.family().into(),
                    acq: algo.acq().into(),
                    replicate: r,
                    seed,
                    budget: args.budget,
                    q: args.q,
                    cell_hash: hash,
                    status: RunStatus::Pending,
                    error: None,
                    wall_ms: 0,
                });
                cells.push((problem.clone(), algo, entry.status == RunStatus::Done));
                manifest.runs.push(entry);
            }
        }
    }
    let skipped = cells.iter().filter(|c| c.2).count();
    if skipped > 0 {
        log::info!("resuming: {skipped} of {} cells already complete", cells.len());
    }
    manifest.save(out)?;

    let pending: Vec<usize> = (0..cells.len()).filter(|&i| !cells[i].2).collect();
    let workers = worker_count(args.threads, pending.len());
    let next = AtomicUsize::new(0);
    let shared = Mutex::new(manifest);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                let (problem, algo, _) = &cells[i];
                let (file, seed) = {
                    let m = shared.lock().expect("manifest lock");
                    (m.runs[i].file.clone(), m.runs[i].seed)
                };
                let result = execute_run(problem, *algo, model.as_ref(), &spec, args.budget, seed, &out.join(&file));
                let mut m = shared.lock().expect("manifest lock");
                let entry = &mut m.runs[i];
                match result {
                    Ok((_, wall)) => {
                        entry.status = RunStatus::Done;
                        entry.wall_ms = wall.as_millis() as u64;
                        log::info!("done {file} in {:.1}s", wall.as_secs_f64());
                    }
                    Err(e) => {
                        log::error!("{file} failed: {e}");
                        entry.status = RunStatus::Failed;
                        entry.error = Some(e.to_string());
                    }
                }
                if let Err(e) = m.save(out) {
                    log::error!("could not update manifest: {e}");
                }
            });
        }
    });
    let mut manifest = shared.into_inner().expect("manifest lock");

    let mut curves = Vec::new();
    let mut references: HashMap<String, Option<Vec<Vec<f64>>>> = HashMap::new();
    for (entry, (problem, algo, _)) in manifest.runs.iter().zip(&cells) {
        if entry.status != RunStatus::Done {
            continue;
        }
        let reference = references
            .entry(problem.name.clone())
            .or_insert_with(|| problem.reference_front().ok())
            .clone();
        let Some(reference) = reference else { continue };
        let records = read_run(&out.join(&entry.file))?;
        for metric in [Metric::IgdPlus, Metric::Hv] {
            let curve = anytime_curve(&records, &reference, metric, entry.seed)?;
            curves.push((problem.name.clone(), algo.family().to_string(), algo.acq().to_string(), metric, curve));
        }
    }
    write_summary(&out.join(SUMMARY_FILE), &summarize(&curves))?;
    manifest.artifacts = vec![SUMMARY_FILE.into(), "runs".into()];
    manifest.finished_unix = Some(unix_now());
    manifest.save(out)?;

    let failed = manifest.runs.iter().filter(|r| r.status == RunStatus::Failed).count();
    if failed > 0 {
        return Err(CliError::PartialFailure { failed, total: manifest.runs.len() });
    }
    Ok(())
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let io = |e| CliError::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{SUMMARY_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(f, "{},{},{},{},{},{},{},{}", r.problem, r.algo, r.acq, r.budget, r.metric, r.mean, r.std, r.n).map_err(io)?;
    }
    f.flush().map_err(io)
}
