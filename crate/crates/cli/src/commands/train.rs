use fomemo::trainer::{self, TrainPaths};

use super::{create_dir, TrainArgs};
use crate::config::TrainFile;
use crate::error::{CliError, Result};
use crate::manifest::{checkpoint_id, sha256_hex, unix_now, RunManifest};

pub fn run(args: &TrainArgs) -> Result<()> {
    let file = TrainFile::load(&args.config)?;
    let config = file.train_config();
    if args.dry_run {
        let scratch = tempfile::tempdir().map_err(|e| CliError::io(std::env::temp_dir(), e))?;
        let one = trainer::TrainConfig { epochs: 1, steps_per_epoch: 1, warmup_epochs: 0, eval_interval: 1, ..config };
        let outcome = trainer::train(&one, &file.model, &TrainPaths::in_dir(scratch.path()), None)?;
        println!(
            "dry run ok: {} parameters, one step at loss {:.4}",
            file.model.parameter_count(),
            outcome.step_losses.first().copied().unwrap_or(f64::NAN)
        );
        return Ok(());
    }
    let out = args.out.as_deref().ok_or_else(|| CliError::Config("--out is required unless --dry-run".into()))?;
    create_dir(out)?;
    let json = file.to_json();
    let config_path = out.join("config.json");
    std::fs::write(&config_path, &json).map_err(|e| CliError::io(&config_path, e))?;
    let mut paths = TrainPaths::in_dir(out);
    if args.keep_history {
        paths.history_dir = Some(out.join("history"));
    }
    let mut manifest = RunManifest::new("train", sha256_hex(json.as_bytes()), Some(config.seed), None);
    manifest.artifacts.push("config.json".into());
    manifest.save(out)?;
    let outcome = trainer::train(&config, &file.model, &paths, args.resume.as_deref())?;
    if let Some(c) = outcome.final_calibration {
        log::info!(
            "held-out nll {:.4} (bin-frequency baseline {:.4}), 50% coverage {:.3}, 90% coverage {:.3}",
            c.nll,
            c.baseline_nll,
            c.coverage_50,
            c.coverage_90
        );
    }
    manifest.checkpoint_id = Some(checkpoint_id(&outcome.checkpoint)?);
    manifest.artifacts.extend(["model.ckpt".to_string(), "metrics.csv".to_string()]);
    if args.keep_history {
        manifest.artifacts.push("history".into());
    }
    manifest.finished_unix = Some(unix_now());
    manifest.save(out)
}
