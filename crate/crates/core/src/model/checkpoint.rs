//! On-disk model container: an 8-byte magic, a `u32` header length, a JSON
//! header (config, support, tensor manifest) and little-endian `f32` data in
//! manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{Layout, Params, TensorSpec};
use super::{ModelConfig, RiemannSupport};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FOMEMO01";

/// Optimizer position saved alongside the weights so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub support: RiemannSupport,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    support: RiemannSupport,
    tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer_step: Option<u64>,
}

fn err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes `ckpt` to `path` through a temporary file and a rename, so readers
/// never observe a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let p = &ckpt.params;
    let mut tensors = p.layout.tensors.clone();
    let total = p.layout.total;
    if let Some(opt) = &ckpt.optimizer {
        if opt.first_moment.len() != total || opt.second_moment.len() != total {
            return Err(err(path, "optimizer moments do not match the parameter count"));
        }
        tensors.push(TensorSpec { name: "adam.m".into(), shape: vec![total], offset: total });
        tensors.push(TensorSpec { name: "adam.v".into(), shape: vec![total], offset: 2 * total });
    }
    let header = Header {
        config: p.config,
        support: ckpt.support.clone(),
        tensors,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |v: &[f32]| v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    put(&p.data);
    if let Some(opt) = &ckpt.optimizer {
        put(&opt.first_moment);
        put(&opt.second_moment);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| err(path, e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| err(path, e.to_string()))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(err(path, "missing FOMEMO01 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| err(path, format!("bad header: {e}")))?;
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    let total = layout.total;
    let n_params: usize = header.tensors.iter().filter(|t| !t.name.starts_with("adam.")).map(TensorSpec::len).sum();
    if n_params != total {
        return Err(err(path, format!("manifest holds {n_params} parameters, config implies {total}")));
    }
    for (want, got) in layout.tensors.iter().zip(&header.tensors) {
        if want != got {
            return Err(err(path, format!("tensor {} does not match the layout", got.name)));
        }
    }
    let floats: Vec<f32> = bytes[12 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let expect = if header.optimizer_step.is_some() { 3 * total } else { total };
    if floats.len() != expect || !(bytes.len() - 12 - hlen).is_multiple_of(4) {
        return Err(err(path, format!("expected {expect} floats, found {}", floats.len())));
    }
    if header.support.n_bins() != header.config.n_bins {
        return Err(err(path, "support size disagrees with n_bins"));
    }
    let optimizer = header.optimizer_step.map(|step| OptimizerState {
        step,
        first_moment: floats[total..2 * total].to_vec(),
        second_moment: floats[2 * total..].to_vec(),
    });
    let params = Params { config: header.config, layout: Arc::new(layout), data: floats[..total].to_vec() };
    Ok(Checkpoint { params, support: header.support, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_riemann_support;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Checkpoint {
        let cfg = ModelConfig { embed_dim: 8, ff_hidden_dim: 8, n_heads: 2, n_layers: 1, n_bins: 4, ..ModelConfig::TOY };
        let params = Params::init(cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let samples: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        Checkpoint { params, support: build_riemann_support(&samples, 4).unwrap(), optimizer: None }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = small();
        let n = ckpt.params.len();
        ckpt.optimizer = Some(OptimizerState { step: 17, first_moment: vec![0.5; n], second_moment: vec![0.25; n] });
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.data, ckpt.params.data);
        assert_eq!(back.params.config, ckpt.params.config);
        assert_eq!(back.support, ckpt.support);
        assert_eq!(back.optimizer, ckpt.optimizer);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"FOMEMO01");
    }

    #[test]
    fn corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &small()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
        fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }
}
