use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use fomemo::benchmarks::REGISTERED;

use super::ReportArgs;
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, RunStatus, MANIFEST_FILE};
use crate::runs::{anytime_curve, read_run, Metric, ProblemSpec};

pub const REPORT_HEADER: &str = "problem,algo,acq,seed,budget,metric,value,K,wall_ms";

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(MANIFEST_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        find_manifests(&d, out)?;
    }
    Ok(())
}

/// Objective vectors from a CSV file; a non-numeric first row is treated
/// as a header and `#` lines are comments.
pub fn load_reference(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Parse { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(CliError::Parse { path: path.to_path_buf(), line: i + 1, reason: e.to_string() }),
        }
    }
    if rows.is_empty() {
        return Err(CliError::Runtime(format!("{}: no reference points", path.display())));
    }
    Ok(rows)
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let metric = Metric::parse(&args.metric)?;
    let mut dirs = Vec::new();
    find_manifests(&args.runs, &mut dirs)?;
    if dirs.is_empty() {
        return Err(CliError::Runtime(format!("no {MANIFEST_FILE} under {}", args.runs.display())));
    }
    let fixed = match args.reference.as_str() {
        "analytic" => None,
        path => Some(load_reference(Path::new(path))?),
    };
    let mut analytic: HashMap<(String, usize), Vec<Vec<f64>>> = HashMap::new();
    let io = |e| CliError::io(&args.out, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(io)?);
    writeln!(f, "{REPORT_HEADER}").map_err(io)?;
    for dir in dirs {
        let Some(manifest) = RunManifest::load(&dir)? else { continue };
        for entry in manifest.runs.iter().filter(|r| r.status == RunStatus::Done) {
            let reference = match &fixed {
                Some(r) => r.clone(),
                None => {
                    let key = (entry.problem.clone(), entry.dim);
                    if !analytic.contains_key(&key) {
                        if !REGISTERED.contains(&entry.problem.as_str()) {
                            return Err(fomemo::Error::NoAnalyticFront(format!(
                                "missing reference for `{}`; pass --reference <csv>",
                                entry.problem
                            ))
                            .into());
                        }
                        let spec = ProblemSpec::new(&entry.problem, Some(entry.dim), None, None)?;
                        analytic.insert(key.clone(), spec.reference_front()?);
                    }
                    analytic[&key].clone()
                }
            };
            let records = read_run(&dir.join(&entry.file))?;
            for p in anytime_curve(&records, &reference, metric, args.seed)? {
                let k = p.samples.map(|k| k.to_string()).unwrap_or_default();
                writeln!(
                    f,
                    "{},{},{},{},{},{},{},{k},{}",
                    entry.problem,
                    entry.algo,
                    entry.acq,
                    entry.seed,
                    p.budget,
                    metric.as_str(),
                    p.value,
                    p.wall_ms
                )
                .map_err(io)?;
            }
        }
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_csv_with_header_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.csv");
        std::fs::write(&path, "f1,f2\n# comment\n0,1\n1,0\n").unwrap();
        assert_eq!(load_reference(&path).unwrap(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        std::fs::write(&path, "0,1\nx,0\n").unwrap();
        assert!(load_reference(&path).unwrap_err().to_string().contains(":2"));
    }
}
