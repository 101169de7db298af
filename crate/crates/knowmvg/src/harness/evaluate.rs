//! Checkpoint evaluation: rebuild the model from a checkpoint, predict fused
//! boxes over a split, and report mIoU / AP metrics.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::load_checkpoint;
use super::config::RunConfig;
use super::data::{load_split, Sample};
use super::tokenizer::Tokenizer;
use super::train::{select_prompts, KnowledgeContext};
use crate::encoder::KnowledgePrompts;
use crate::error::Result;
use crate::loss::{evaluate, BBox, EvalReport};
use crate::model::{forward_decode, forward_encode, read_box, ModelConfig, Session};
use crate::numerics::{ParamSet, Real};

/// Fused-box predictions for a whole split. Runs samples in parallel unless
/// the run is pinned to one thread; results are ordered either way.
pub fn predict_boxes<T: Real>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    samples: &[Sample<T>],
    kctx: Option<&KnowledgeContext<T>>,
    cfg: &RunConfig,
) -> Result<Vec<BBox<T>>> {
    let propagated = match kctx {
        Some(k) => Some(k.propagate(params, model.gcn_depth)?),
        None => None,
    };
    let one = |sample: &Sample<T>| -> Result<BBox<T>> {
        let mut s = Session::new(params);
        let (z, latent) = forward_encode(&mut s, model, &sample.core)?;
        let prompts = match &propagated {
            Some(p) => select_prompts(&s, model, &latent, p),
            None => KnowledgePrompts::empty(model.knowledge_dim),
        };
        let pass = forward_decode(&mut s, model, z, latent, &prompts, None)?;
        Ok(read_box(&s, pass.fused_box))
    };
    if cfg.train.deterministic {
        samples.iter().map(one).collect()
    } else {
        samples.par_iter().map(one).collect()
    }
}

/// Evaluate a checkpoint on one split of a dataset. Optionally writes the
/// report as JSON and the per-sample IoUs as CSV.
pub fn evaluate_checkpoint<T: Real>(
    ckpt: &Path,
    data_dir: &Path,
    split: &str,
    out_json: Option<&Path>,
    out_csv: Option<&Path>,
) -> Result<EvalReport> {
    let (params, manifest) = load_checkpoint::<T>(ckpt)?;
    let cfg = manifest.config;
    let model = cfg.effective_model();
    let tokenizer = Tokenizer::from_words(manifest.vocab);
    let samples: Vec<Sample<T>> = load_split(data_dir, split, &tokenizer, &model)?;
    let kctx = if model.use_kps {
        KnowledgeContext::build(data_dir, &model, cfg.seed)?
    } else {
        None
    };
    let preds = predict_boxes(&params, &model, &samples, kctx.as_ref(), &cfg)?;
    let golds: Vec<BBox<T>> = samples.iter().map(|s| s.core.gold_box).collect();
    let report = evaluate(&preds, &golds)?;

    if let Some(path) = out_json {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(path) = out_csv {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "id,iou")?;
        for (s, iou) in samples.iter().zip(&report.per_sample_iou) {
            writeln!(f, "{},{iou}", s.core.id)?;
        }
        f.flush()?;
    }
    Ok(report)
}
