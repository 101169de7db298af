//! Checkpoints: a magic header, a JSON manifest (names, shapes, frozen
//! flags, config, vocabulary, step), then every tensor as little-endian f64.
//! Round trips are bit-exact.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::init_params;
use crate::numerics::{ParamSet, Real, Tensor};

const MAGIC: &[u8; 8] = b"KMVGCKPT";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub dtype: String,
    pub step: usize,
    pub config: RunConfig,
    /// Tokenizer words in id order.
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorMeta>,
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &ParamSet<T>,
    config: &RunConfig,
    vocab: &[String],
    step: usize,
) -> Result<()> {
    let manifest = Manifest {
        format: FORMAT,
        dtype: "f64".into(),
        step,
        config: config.clone(),
        vocab: vocab.to_vec(),
        tensors: params
            .iter()
            .map(|(name, p)| TensorMeta {
                name: name.to_string(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_json)?;
    for (_, p) in params.iter() {
        for &v in p.value.as_slice() {
            out.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamSet<T>, Manifest)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    let bad = |why: String| Error::Checkpoint(format!("{}: {why}", path.display()));

    if raw.len() < 16 || &raw[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if raw.len() < 16 + len {
        return Err(bad("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&raw[16..16 + len])
        .map_err(|e| bad(format!("malformed manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format {}", manifest.format)));
    }

    let mut pos = 16 + len;
    let mut params = ParamSet::new();
    for meta in &manifest.tensors {
        let n = meta.rows * meta.cols;
        let end = pos + n * 8;
        if raw.len() < end {
            return Err(bad(format!("truncated payload at `{}`", meta.name)));
        }
        let data: Vec<T> = raw[pos..end]
            .chunks_exact(8)
            .map(|c| T::cast(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.insert(&meta.name, Tensor::new(meta.rows, meta.cols, data)?, meta.trainable);
        pos = end;
    }
    if pos != raw.len() {
        return Err(bad("trailing bytes after payload".into()));
    }
    verify_against_config(&params, &manifest)?;
    Ok((params, manifest))
}

/// The stored tensors must exactly match the inventory the stored config
/// would create — catches checkpoints evaluated against the wrong config.
fn verify_against_config<T: Real>(params: &ParamSet<T>, manifest: &Manifest) -> Result<()> {
    let expected: ParamSet<T> = init_params(&manifest.config.effective_model(), 0);
    if expected.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors but its config defines {}",
            params.len(),
            expected.len()
        )));
    }
    for (name, p) in expected.iter() {
        let stored = params.get(name).map_err(|_| {
            Error::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if stored.value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` is {}x{} but its config implies {}x{}",
                stored.value.rows(),
                stored.value.cols(),
                p.value.rows(),
                p.value.cols()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{freeze_mask_decoder, ModelConfig};
    use tempfile::tempdir;

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::tiny();
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny_run_config();
        let mut params: ParamSet<f64> = init_params(&cfg.model, 42);
        freeze_mask_decoder(&mut params);
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let vocab = vec!["nodule".to_string(), "in".to_string()];
        save_checkpoint(&path, &params, &cfg, &vocab, 17).unwrap();

        let (back, manifest): (ParamSet<f64>, _) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.vocab, vocab);
        assert_eq!(back.len(), params.len());
        for (name, p) in params.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.trainable, p.trainable, "{name}");
            assert_eq!(
                b.value.as_slice(),
                p.value.as_slice(),
                "{name} payload differs"
            );
        }
        assert!(!back.get("maskdec.proj.w").unwrap().trainable);
        assert!(!back.get("prompt.fourier").unwrap().trainable);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = tiny_run_config();
        let params: ParamSet<f64> = init_params(&cfg.model, 1);
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&path, &params, &cfg, &[], 0).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(dir.path().join("trunc.ckpt"), &bytes).unwrap();
        assert!(load_checkpoint::<f64>(&dir.path().join("trunc.ckpt")).is_err());

        std::fs::write(dir.path().join("junk.ckpt"), b"hello").unwrap();
        assert!(load_checkpoint::<f64>(&dir.path().join("junk.ckpt")).is_err());
    }

    #[test]
    fn mismatched_config_is_an_explicit_error() {
        // store with a doctored config whose dims disagree with the tensors
        let cfg = tiny_run_config();
        let params: ParamSet<f64> = init_params(&cfg.model, 1);
        let mut lying = cfg.clone();
        lying.model.channels *= 2;
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&path, &params, &lying, &[], 0).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("config"), "{err}");
    }
}
