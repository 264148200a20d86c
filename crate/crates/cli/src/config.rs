//! Versioned JSON training configuration.

use std::path::Path;

use fomemo::model::ModelConfig;
use fomemo::prior::ShapeLimits;
use fomemo::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub seed: u64,
    pub eval_interval: usize,
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub schema: u32,
    pub model: ModelConfig,
    pub training: TrainingSection,
}

impl TrainFile {
    /// Toy-scale defaults.
    pub fn toy() -> Self {
        let model = ModelConfig::TOY;
        let t = TrainConfig::toy(&model);
        Self {
            schema: SCHEMA_VERSION,
            model,
            training: TrainingSection {
                batch_size: t.batch_size,
                steps_per_epoch: t.steps_per_epoch,
                epochs: t.epochs,
                warmup_epochs: t.warmup_epochs,
                peak_lr: t.peak_lr,
                seed: t.seed,
                eval_interval: t.eval_interval,
            },
        }
    }

    /// Parses and validates, reporting the offending field path and
    /// position on failure.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let at = format!("line {} column {}", inner.line(), inner.column());
            if path == "." {
                CliError::Config(format!("{origin}: {inner} ({at})"))
            } else {
                CliError::Config(format!("{origin}: field `{path}`: {inner}"))
            }
        })?;
        file.validate().map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "field `schema`: unsupported version {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        self.model.validate().map_err(|e| CliError::Config(format!("field `model`: {e}")))?;
        self.train_config().validate().map_err(|e| CliError::Config(format!("field `training`: {e}")))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            batch_size: t.batch_size,
            steps_per_epoch: t.steps_per_epoch,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            peak_lr: t.peak_lr,
            seed: t.seed,
            eval_interval: t.eval_interval,
            limits: ShapeLimits::from_model(&self.model),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_round_trips() {
        let toy = TrainFile::toy();
        assert_eq!(TrainFile::parse(&toy.to_json(), "toy").unwrap(), toy);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainFile::toy().to_json()).unwrap();
        v["training"].as_object_mut().unwrap().remove("peak_lr");
        let err = TrainFile::parse(&v.to_string(), "cfg.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("peak_lr") && msg.contains("training"), "{msg}");
        assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
    }

    #[test]
    fn wrong_type_names_the_nested_field_and_unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainFile::toy().to_json()).unwrap();
        v["model"]["n_layers"] = serde_json::json!("four");
        let msg = TrainFile::parse(&v.to_string(), "cfg.json").unwrap_err().to_string();
        assert!(msg.contains("model.n_layers"), "{msg}");
        let mut v: serde_json::Value = serde_json::from_str(&TrainFile::toy().to_json()).unwrap();
        v["training"]["dropout"] = serde_json::json!(0.1);
        assert!(TrainFile::parse(&v.to_string(), "cfg.json").unwrap_err().to_string().contains("dropout"));
    }

    #[test]
    fn schema_version_and_syntax_errors() {
        let mut v: serde_json::Value = serde_json::from_str(&TrainFile::toy().to_json()).unwrap();
        v["schema"] = serde_json::json!(2);
        assert!(TrainFile::parse(&v.to_string(), "c").unwrap_err().to_string().contains("schema"));
        let msg = TrainFile::parse("{\n  \"schema\": 1,\n  oops\n}", "c").unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(
            batch in 1usize..512, spe in 1usize..1000, epochs in 2usize..100, lr in 1e-6f64..1e-2,
            seed in any::<u64>(), interval in 1usize..10, layers in 1usize..6, heads in prop::sample::select(vec![1usize, 2, 4, 8]),
        ) {
            let mut f = TrainFile::toy();
            f.training = TrainingSection { batch_size: batch, steps_per_epoch: spe, epochs, warmup_epochs: 1, peak_lr: lr, seed, eval_interval: interval };
            f.model.n_layers = layers;
            f.model.n_heads = heads;
            let once = TrainFile::parse(&f.to_json(), "p").unwrap();
            let twice = TrainFile::parse(&once.to_json(), "p").unwrap();
            prop_assert_eq!(once, f);
            prop_assert_eq!(twice, once);
        }
    }
}
