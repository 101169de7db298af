//! Phase 0: teach the image encoder and mask decoder to segment the lesion
//! before the grounding phase starts. The decoder sees randomized prompt
//! tokens (zero to k+1 rows) so its masks stay stable no matter what the
//! grounding phase later feeds it. Ends by freezing the mask decoder; a
//! held-out IoU gate turns silent failure into a hard error.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::RunConfig;
use super::data::Sample;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::{decode_mask, encode_image, freeze_mask_decoder, Session};
use crate::numerics::{derive_rng, GradMap, ParamSet, Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Phase0Report {
    pub steps: usize,
    pub final_loss: f64,
    pub holdout_iou: f64,
}

/// Cap on holdout samples scored by the gate.
const GATE_SAMPLES: usize = 100;

fn mask_target<T: Real>(sample: &Sample<T>) -> Result<Tensor<T>> {
    let m = sample
        .core
        .gold_mask
        .as_ref()
        .ok_or_else(|| {
            Error::Train(format!(
                "mask pretraining needs lesion masks, but sample {} has none",
                sample.core.id
            ))
        })?;
    Tensor::new(m.len(), 1, m.as_slice().to_vec())
}

/// Binary IoU of a sigmoid mask (thresholded at 0.5) against a 0/1 target.
fn mask_iou<T: Real>(pred: &[T], gold: &[T]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &g) in pred.iter().zip(gold) {
        let p = p.as_f64() > 0.5;
        let g = g.as_f64() >= 0.5;
        if p && g {
            inter += 1.0;
        }
        if p || g {
            union += 1.0;
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

pub fn pretrain_mask<T: Real>(
    cfg: &RunConfig,
    params: &mut ParamSet<T>,
    train: &[Sample<T>],
    holdout: &[Sample<T>],
) -> Result<Phase0Report> {
    let model = &cfg.model;
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::Train("mask pretraining needs non-empty splits".into()));
    }
    let t_cfg = &cfg.train;
    let mut opt = AdamW::new(t_cfg.phase0_lr, 0.0, t_cfg.phase0_warmup, 0);
    let mut order_rng = derive_rng(cfg.seed, "phase0-order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;

    let mut last_loss = f64::NAN;
    for step in 0..t_cfg.phase0_steps {
        let mut grads = GradMap::new();
        let mut loss_sum = 0.0;
        for b in 0..t_cfg.phase0_batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let sample = &train[order[cursor]];
            cursor += 1;

            let mut s = Session::new(params);
            let z = encode_image(&mut s, model, &sample.core.image)?;
            let mut tok_rng = derive_rng(cfg.seed, &format!("phase0-tok-{step}-{b}"));
            let rows: usize = tok_rng.random_range(0..=model.top_k + 1);
            let t = (rows > 0)
                .then(|| s.input(Tensor::randn(rows, model.channels, 0.1, &mut tok_rng)));
            let (_mask, up_logits) = decode_mask(&mut s, model, &z, t);
            let target = s.input(mask_target(sample)?);
            let loss = s.g.bce_with_logits_mean(up_logits, target);
            loss_sum += s.g.scalar_value(loss).as_f64();
            let sample_grads = s.grads(loss);
            super::optim::accumulate(&mut grads, sample_grads);
        }
        super::optim::scale_grads(&mut grads, 1.0 / t_cfg.phase0_batch as f64);
        opt.step(params, &grads);
        last_loss = loss_sum / t_cfg.phase0_batch as f64;
        if !last_loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite mask loss {last_loss} at phase-0 step {step}"
            )));
        }
        if (step + 1) % 25 == 0 {
            log::info!("phase0 step {:>4}: bce {last_loss:.4}", step + 1);
        }
    }

    // Gate: held-out segmentation quality, prompt-free forward.
    let mut iou_sum = 0.0;
    let gate_n = holdout.len().min(GATE_SAMPLES);
    for sample in &holdout[..gate_n] {
        let mut s = Session::new(params);
        let z = encode_image(&mut s, model, &sample.core.image)?;
        let (mask, _logits) = decode_mask(&mut s, model, &z, None);
        let target = mask_target(sample)?;
        iou_sum += mask_iou(s.g.value(mask).as_slice(), target.as_slice());
    }
    let holdout_iou = iou_sum / gate_n as f64;
    let report = Phase0Report {
        steps: t_cfg.phase0_steps,
        final_loss: last_loss,
        holdout_iou,
    };
    if holdout_iou < t_cfg.mask_iou_gate {
        return Err(Error::Train(format!(
            "mask pretraining failed its quality gate: held-out mask IoU {holdout_iou:.3} < {:.3} \
             (final bce {last_loss:.4} after {} steps over {} samples). \
             More phase0_steps, a different phase0_lr, or checking the masks usually fixes this.",
            t_cfg.mask_iou_gate, t_cfg.phase0_steps, train.len()
        )));
    }
    let frozen = freeze_mask_decoder(params);
    log::info!(
        "phase0 done: holdout mask IoU {holdout_iou:.3}, froze {frozen} mask-decoder tensors"
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{generate_dataset, load_records, load_split};
    use crate::harness::tokenizer::Tokenizer;
    use crate::model::{init_params, ModelConfig};
    use tempfile::tempdir;

    fn tiny_setup(seed: u64) -> (RunConfig, Vec<Sample<f64>>, Vec<Sample<f64>>) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model = ModelConfig::tiny();
        cfg.data.n_samples = 20;
        cfg.train.phase0_steps = 12;
        cfg.train.phase0_batch = 2;
        cfg.train.phase0_warmup = 3;
        let dir = tempdir().unwrap();
        generate_dataset(&cfg, dir.path()).unwrap();
        let records = load_records(dir.path(), "train").unwrap();
        let tok = Tokenizer::from_reports(records.iter().map(|r| r.report.as_str()));
        let train = load_split(dir.path(), "train", &tok, &cfg.model).unwrap();
        let val = load_split(dir.path(), "val", &tok, &cfg.model).unwrap();
        (cfg, train, val)
    }

    #[test]
    fn loss_drops_and_decoder_freezes() {
        let (mut cfg, train, val) = tiny_setup(3);
        cfg.train.mask_iou_gate = 0.0; // gate disabled: this test is about mechanics
        let mut params: ParamSet<f64> = init_params(&cfg.model, cfg.seed);

        // measure the starting loss on the first training sample
        let probe = |params: &ParamSet<f64>| {
            let mut s = Session::new(params);
            let z = encode_image(&mut s, &cfg.model, &train[0].core.image).unwrap();
            let (_m, logits) = decode_mask(&mut s, &cfg.model, &z, None);
            let target = s.input(mask_target(&train[0]).unwrap());
            let l = s.g.bce_with_logits_mean(logits, target);
            s.g.scalar_value(l)
        };
        let before = probe(&params);
        let report = pretrain_mask(&cfg, &mut params, &train, &val).unwrap();
        let after = probe(&params);
        assert!(after < before, "bce did not improve: {before} -> {after}");
        assert!(report.final_loss.is_finite());
        assert!(!params.get("maskdec.outtok").unwrap().trainable);
        assert!(!params.get("maskdec.blk0.t2i.q.w").unwrap().trainable);
    }

    #[test]
    fn impossible_gate_is_a_hard_error_with_diagnostics() {
        let (mut cfg, train, val) = tiny_setup(4);
        cfg.train.phase0_steps = 2;
        cfg.train.mask_iou_gate = 0.99;
        let mut params: ParamSet<f64> = init_params(&cfg.model, cfg.seed);
        let err = pretrain_mask(&cfg, &mut params, &train, &val).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("IoU"), "{msg}");
        assert!(msg.contains("steps"), "{msg}");
        // nothing was frozen on failure
        assert!(params.get("maskdec.outtok").unwrap().trainable);
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let (mut cfg, train, val) = tiny_setup(5);
        cfg.train.mask_iou_gate = 0.0;
        let mut p1: ParamSet<f64> = init_params(&cfg.model, cfg.seed);
        let mut p2: ParamSet<f64> = init_params(&cfg.model, cfg.seed);
        let r1 = pretrain_mask(&cfg, &mut p1, &train, &val).unwrap();
        let r2 = pretrain_mask(&cfg, &mut p2, &train, &val).unwrap();
        assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
        assert_eq!(r1.holdout_iou.to_bits(), r2.holdout_iou.to_bits());
        for (name, p) in p1.iter() {
            assert_eq!(
                p.value.as_slice(),
                p2.value(name).unwrap().as_slice(),
                "{name} diverged"
            );
        }
    }

    #[test]
    fn binary_iou_hand_values() {
        // pred selects 2 cells, gold selects 2, overlap 1 → IoU 1/3
        let pred = [0.9, 0.8, 0.1, 0.2];
        let gold = [1.0, 0.0, 1.0, 0.0];
        assert!((mask_iou(&pred, &gold) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou::<f64>(&[0.0; 4], &[0.0; 4]), 1.0);
    }
}
