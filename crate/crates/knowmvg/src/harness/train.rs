//! Grounding phase: batched gradient steps over the synthetic corpus,
//! periodic validation, best-checkpoint tracking, and an optional early
//! stop on validation mIoU.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::checkpoint::save_checkpoint;
use super::config::RunConfig;
use super::data::{dataset_paths, load_records, load_split, Sample};
use super::evaluate::predict_boxes;
use super::optim::{accumulate, scale_grads, AdamW};
use super::tokenizer::Tokenizer;
use crate::encoder::{
    gcn_forward, select_topk, GcnLayer, GcnWeights, HashedBagEmbedder, KnowledgePrompts,
    NodeEmbeddings, embed_nodes, normalized_adjacency,
};
use crate::error::{Error, Result};
use crate::kg::{build_graph, load_corpus, FixtureClient, KnowledgeGraph, LexiconProvider};
use crate::loss::{box_input, smooth_l1_var, total_loss_var, LossBreakdown, LossWeights};
use crate::model::{
    forward_decode, forward_encode, freeze_mask_decoder, init_params, ForwardPass,
    KnowledgeInputs, LatentTokens, ModelConfig, Session,
};
use crate::numerics::{derive_rng, GradMap, ParamSet, Real, Tensor, Var};

/// Knowledge-side state shared by training and evaluation: the graph, its
/// normalized adjacency, and the initial node embeddings.
#[derive(Clone, Debug)]
pub struct KnowledgeContext<T: Real> {
    pub kg: KnowledgeGraph,
    pub a_hat: Tensor<T>,
    pub h0: NodeEmbeddings<T>,
}

impl<T: Real> KnowledgeContext<T> {
    /// Build from the dataset's fixtures. Returns `None` when the corpus
    /// yields no entities (prompting is then skipped).
    pub fn build(data_dir: &Path, model: &ModelConfig, seed: u64) -> Result<Option<Self>> {
        let (corpus_path, lexicon_path, knowledge_dir) = dataset_paths(data_dir)?;
        let corpus = load_corpus(&corpus_path)?;
        let provider = LexiconProvider::from_file(&lexicon_path)?;
        let client = FixtureClient::new(knowledge_dir);
        let kg = build_graph(&corpus, &provider, &client)?;
        Self::from_graph(kg, model, seed)
    }

    pub fn from_graph(kg: KnowledgeGraph, model: &ModelConfig, seed: u64) -> Result<Option<Self>> {
        if kg.is_empty() {
            return Ok(None);
        }
        let embedder = HashedBagEmbedder::new(model.knowledge_dim, seed);
        let h0 = embed_nodes(&kg, &embedder)?;
        let a_hat = normalized_adjacency(&kg.adjacency_matrix());
        Ok(Some(KnowledgeContext { kg, a_hat, h0 }))
    }

    /// GCN weights as currently held by the parameter set.
    pub fn gcn_weights(&self, params: &ParamSet<T>, depth: usize) -> Result<GcnWeights<T>> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            layers.push(GcnLayer {
                w: params.value(&format!("gcn.l{i}.w"))?.clone(),
                b: params.value(&format!("gcn.l{i}.b"))?.clone(),
            });
        }
        Ok(GcnWeights { layers })
    }

    /// Off-tape propagation used for prompt selection. `gcn_forward` wants
    /// the raw adjacency; it applies the degree normalization itself.
    pub fn propagate(&self, params: &ParamSet<T>, depth: usize) -> Result<NodeEmbeddings<T>> {
        gcn_forward(&self.h0, &self.kg.adjacency_matrix(), &self.gcn_weights(params, depth)?)
    }

    pub fn inputs(&self) -> KnowledgeInputs<T> {
        KnowledgeInputs {
            a_hat: self.a_hat.clone(),
            h0: self.h0.matrix.clone(),
        }
    }
}

/// Rank the propagated nodes against this sample's knowledge query.
pub fn select_prompts<T: Real>(
    s: &Session<T>,
    model: &ModelConfig,
    latent: &LatentTokens,
    propagated: &NodeEmbeddings<T>,
) -> KnowledgePrompts<T> {
    let query = s.g.value(latent.h_vlm).row(0);
    select_topk(propagated, query, model.top_k)
}

/// Tape-side loss for one sample. The coarse box is supervised alongside the
/// fused box whenever the two differ, folded into the same components.
pub fn sample_loss<T: Real>(
    s: &mut Session<T>,
    model: &ModelConfig,
    pass: &ForwardPass,
    sample: &Sample<T>,
    weights: &LossWeights,
) -> (Var, LossBreakdown) {
    let labels: Vec<T> = sample
        .core
        .phrase_labels
        .iter()
        .map(|&b| if b { T::one() } else { T::zero() })
        .collect();
    let labels = s.input(Tensor::new(labels.len(), 1, labels).expect("label column"));
    let txt = s.g.bce_with_logits_mean(pass.latent.phrase_logits, labels);

    let gold = box_input(&mut s.g, &sample.core.gold_box);
    let giou_of = |s: &mut Session<T>, pred: Var| {
        let g = crate::loss::giou_var(&mut s.g, pred, gold);
        let neg = s.g.scale(g, T::cast(-1.0));
        s.g.add_const(neg, T::one())
    };
    let l1_fused = smooth_l1_var(&mut s.g, pass.fused_box, gold);
    let gi_fused = giou_of(s, pass.fused_box);
    let (l1, gi) = if model.use_gla {
        let l1_coarse = smooth_l1_var(&mut s.g, pass.local_box, gold);
        let gi_coarse = giou_of(s, pass.local_box);
        let half = T::cast(0.5);
        let l1 = s.g.add(l1_fused, l1_coarse);
        let gi = s.g.add(gi_fused, gi_coarse);
        (s.g.scale(l1, half), s.g.scale(gi, half))
    } else {
        (l1_fused, gi_fused)
    };
    let (total, [txt_w, l1_w, gi_w]) = total_loss_var(&mut s.g, txt, l1, gi, weights);
    let b = |v: Var| s.g.scalar_value(v).as_f64();
    let (txt_v, l1_v, gi_v) = (b(txt_w), b(l1_w), b(gi_w));
    let breakdown = LossBreakdown {
        txt: txt_v,
        l1: l1_v,
        giou_loss: gi_v,
        box_loss: l1_v + gi_v,
        total: b(total),
    };
    (total, breakdown)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub best_miou: f64,
    pub best_step: usize,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        txt: sum(|p| p.txt),
        l1: sum(|p| p.l1),
        giou_loss: sum(|p| p.giou_loss),
        box_loss: sum(|p| p.box_loss),
        total: sum(|p| p.total),
    }
}

/// Run the grounding phase. `initial` carries phase-0 weights (and is
/// otherwise a fresh initialization); the mask decoder is frozen either way.
pub fn train<T: Real>(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    initial: Option<ParamSet<T>>,
) -> Result<TrainOutcome> {
    let model = cfg.effective_model();
    std::fs::create_dir_all(out_dir)?;

    let records = load_records(data_dir, "train")?;
    let tokenizer = Tokenizer::from_reports(records.iter().map(|r| r.report.as_str()));
    if tokenizer.id_count() > model.vocab_size {
        return Err(Error::Config(format!(
            "training split needs {} token ids but model.vocab_size is {}",
            tokenizer.id_count(),
            model.vocab_size
        )));
    }
    let vocab = tokenizer.words();
    let train_set: Vec<Sample<T>> = load_split(data_dir, "train", &tokenizer, &model)?;
    let val_set: Vec<Sample<T>> = load_split(data_dir, "val", &tokenizer, &model)?;

    let kctx = if model.use_kps {
        KnowledgeContext::build(data_dir, &model, cfg.seed)?
    } else {
        None
    };
    if model.use_kps && kctx.is_none() {
        log::warn!("knowledge graph is empty; prompting is disabled for this run");
    }

    let mut params = initial.unwrap_or_else(|| init_params(&model, cfg.seed));
    freeze_mask_decoder(&mut params);

    let mut opt = AdamW::new(
        cfg.train.lr,
        cfg.train.weight_decay,
        cfg.train.warmup_steps,
        cfg.train.max_steps,
    );
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.jsonl"))?);
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch = 0usize;
    let mut order_rng = derive_rng(cfg.seed, "order-0");
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;

    let mut best_miou = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut steps_run = 0usize;

    for step in 0..cfg.train.max_steps {
        let lr_now = opt.next_lr();
        let mut grads = GradMap::new();
        let mut parts = Vec::with_capacity(cfg.train.batch_size);
        let propagated = match &kctx {
            Some(k) => Some(k.propagate(&params, model.gcn_depth)?),
            None => None,
        };
        for _ in 0..cfg.train.batch_size {
            if cursor == order.len() {
                epoch += 1;
                order_rng = derive_rng(cfg.seed, &format!("order-{epoch}"));
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let sample = &train_set[order[cursor]];
            cursor += 1;

            let mut s = Session::new(&params);
            let (z, latent) = forward_encode(&mut s, &model, &sample.core)?;
            let (prompts, knowledge) = match (&kctx, &propagated) {
                (Some(k), Some(p)) => (
                    select_prompts(&s, &model, &latent, p),
                    Some(k.inputs()),
                ),
                _ => (KnowledgePrompts::empty(model.knowledge_dim), None),
            };
            assert!(
                model.use_kps || prompts.effective_k() == 0,
                "prompts must stay empty when knowledge prompting is off"
            );
            let pass = forward_decode(&mut s, &model, z, latent, &prompts, knowledge.as_ref())?;
            let (total, breakdown) = sample_loss(&mut s, &model, &pass, sample, &cfg.loss);
            if !breakdown.total.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at step {step} on sample {}: txt={} l1={} giou={} total={}",
                    sample.core.id,
                    breakdown.txt,
                    breakdown.l1,
                    breakdown.giou_loss,
                    breakdown.total
                )));
            }
            parts.push(breakdown);
            let sample_grads = s.grads(total);
            accumulate(&mut grads, sample_grads);
        }
        scale_grads(&mut grads, 1.0 / cfg.train.batch_size as f64);
        opt.step(&mut params, &grads);
        steps_run = step + 1;

        let mean = mean_breakdown(&parts);
        let line = serde_json::json!({
            "step": step,
            "lr": lr_now,
            "txt": mean.txt,
            "l1": mean.l1,
            "giou": mean.giou_loss,
            "box": mean.box_loss,
            "total": mean.total,
        });
        writeln!(metrics, "{line}")?;

        let last_step = step + 1 == cfg.train.max_steps;
        if (step + 1) % cfg.train.eval_every == 0 || last_step {
            let preds = predict_boxes(&params, &model, &val_set, kctx.as_ref(), cfg)?;
            let golds: Vec<_> = val_set.iter().map(|s| s.core.gold_box.clone()).collect();
            let report = crate::loss::evaluate(&preds, &golds)?;
            let line = serde_json::json!({
                "step": step,
                "val_miou": report.miou,
                "val_ap10": report.ap10,
                "val_ap30": report.ap30,
                "val_ap50": report.ap50,
            });
            writeln!(metrics, "{line}")?;
            metrics.flush()?;
            log::info!(
                "step {:>5}: total {:.4} | val mIoU {:.4} AP50 {:.3}",
                step + 1,
                mean.total,
                report.miou,
                report.ap50
            );
            if report.miou > best_miou {
                best_miou = report.miou;
                best_step = step + 1;
                save_checkpoint(&best_path, &params, cfg, &vocab, best_step)?;
            }
            if cfg.train.early_stop_miou > 0.0 && report.miou >= cfg.train.early_stop_miou {
                log::info!("early stop: val mIoU {:.4} reached the target", report.miou);
                break;
            }
        }
    }

    save_checkpoint(&last_path, &params, cfg, &vocab, steps_run)?;
    metrics.flush()?;
    Ok(TrainOutcome {
        steps: steps_run,
        best_miou,
        best_step,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::generate_dataset;
    use crate::model::ModelConfig;
    use tempfile::tempdir;

    fn tiny_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model = ModelConfig::tiny();
        cfg.data.n_samples = 20;
        cfg.train.max_steps = 8;
        cfg.train.batch_size = 2;
        cfg.train.eval_every = 4;
        cfg.train.warmup_steps = 4;
        cfg.train.early_stop_miou = 0.0;
        cfg
    }

    #[test]
    fn short_run_trains_checkpoints_and_logs() {
        let data = tempdir().unwrap();
        let out = tempdir().unwrap();
        let cfg = tiny_cfg(9);
        generate_dataset(&cfg, data.path()).unwrap();
        let outcome = train::<f64>(&cfg, data.path(), out.path(), None).unwrap();
        assert_eq!(outcome.steps, 8);
        assert!(outcome.best_checkpoint.exists());
        assert!(outcome.last_checkpoint.exists());
        assert!(outcome.best_miou.is_finite());

        let metrics = std::fs::read_to_string(out.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        // 8 step lines + 2 eval lines
        assert_eq!(lines.len(), 10);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert!(first["total"].as_f64().unwrap().is_finite());
        // the loss additivity invariants hold in the log
        assert!(
            (first["box"].as_f64().unwrap()
                - first["l1"].as_f64().unwrap()
                - first["giou"].as_f64().unwrap())
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn frozen_groups_do_not_move_during_training() {
        let data = tempdir().unwrap();
        let out = tempdir().unwrap();
        let mut cfg = tiny_cfg(10);
        cfg.train.max_steps = 5;
        generate_dataset(&cfg, data.path()).unwrap();

        let before: ParamSet<f64> = init_params(&cfg.effective_model(), cfg.seed);
        let outcome = train::<f64>(&cfg, data.path(), out.path(), None).unwrap();
        let (after, _) =
            super::super::checkpoint::load_checkpoint::<f64>(&outcome.last_checkpoint).unwrap();

        let mut trainable_moved = false;
        for (name, p) in after.iter() {
            let orig = before.value(name).unwrap();
            let same = orig.as_slice() == p.value.as_slice();
            let frozen = name.starts_with("prompt.")
                || name.starts_with("pmask.")
                || name.starts_with("maskdec.");
            if frozen {
                assert!(same, "frozen `{name}` changed during training");
            } else if !same {
                trainable_moved = true;
            }
        }
        assert!(trainable_moved, "no trainable parameter moved at all");
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let data = tempdir().unwrap();
        let cfg = tiny_cfg(11);
        generate_dataset(&cfg, data.path()).unwrap();
        let out1 = tempdir().unwrap();
        let out2 = tempdir().unwrap();
        train::<f64>(&cfg, data.path(), out1.path(), None).unwrap();
        train::<f64>(&cfg, data.path(), out2.path(), None).unwrap();
        assert_eq!(
            std::fs::read(out1.path().join("last.ckpt")).unwrap(),
            std::fs::read(out2.path().join("last.ckpt")).unwrap(),
            "checkpoints differ across identical runs"
        );
        assert_eq!(
            std::fs::read_to_string(out1.path().join("metrics.jsonl")).unwrap(),
            std::fs::read_to_string(out2.path().join("metrics.jsonl")).unwrap()
        );
    }

    #[test]
    fn kps_off_trains_without_knowledge() {
        let data = tempdir().unwrap();
        let out = tempdir().unwrap();
        let mut cfg = tiny_cfg(12);
        cfg.ablation.kps_on = false;
        cfg.train.max_steps = 3;
        generate_dataset(&cfg, data.path()).unwrap();
        let outcome = train::<f64>(&cfg, data.path(), out.path(), None).unwrap();
        assert!(outcome.best_checkpoint.exists());
    }

    #[test]
    fn vocabulary_overflow_is_a_config_error() {
        let data = tempdir().unwrap();
        let out = tempdir().unwrap();
        let mut cfg = tiny_cfg(13);
        cfg.model.vocab_size = 4; // far below the corpus vocabulary
        generate_dataset(&cfg, data.path()).unwrap();
        let err = train::<f64>(&cfg, data.path(), out.path(), None).unwrap_err();
        assert!(err.to_string().contains("vocab_size"), "{err}");
    }
}
