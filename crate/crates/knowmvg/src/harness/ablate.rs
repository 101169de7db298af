//! Mechanism ablation: baseline / prompts-only / dual-route-only / full,
//! trained over shared seeds and a shared dataset, reported as a 4-row
//! table (Markdown + CSV).

use std::collections::BTreeMap;
use std::path::Path;

use super::config::RunConfig;
use super::data::{generate_dataset, load_records, load_split, Sample};
use super::evaluate::evaluate_checkpoint;
use super::phase0::pretrain_mask;
use super::tokenizer::Tokenizer;
use super::train::train;
use crate::error::Result;
use crate::loss::EvalReport;
use crate::model::init_params;
use crate::numerics::{ParamSet, Real};

/// (name, prompts on, dual route on)
pub const CELLS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("kps_only", true, false),
    ("gla_only", false, true),
    ("full", true, true),
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub cell: String,
    pub miou: f64,
    pub ap10: f64,
    pub ap30: f64,
    pub ap50: f64,
    pub seed_mious: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn format_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| cell | mIoU | AP@0.1 | AP@0.3 | AP@0.5 |\n|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.cell, r.miou, r.ap10, r.ap30, r.ap50
        ));
    }
    out
}

pub fn format_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("cell,miou,ap10,ap30,ap50\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.cell, r.miou, r.ap10, r.ap30, r.ap50
        ));
    }
    out
}

/// Run all four cells over `ablation.seeds` seeds. Every cell at a given
/// seed starts from the same phase-0 weights, so the comparison isolates the
/// routing, not the pretraining. Early stopping is disabled so every cell
/// gets the same step budget. Metrics come from each cell's best checkpoint
/// on the validation split; medians across seeds fill the table.
pub fn run_ablation<T: Real>(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    if !data_dir.join("train.jsonl").exists() {
        log::info!("no dataset at {}; generating one", data_dir.display());
        generate_dataset(cfg, data_dir)?;
    }

    let mut reports: BTreeMap<&'static str, Vec<EvalReport>> = BTreeMap::new();
    for seed_offset in 0..cfg.ablation.seeds {
        let mut cfg_seed = cfg.clone();
        cfg_seed.seed = cfg.seed + seed_offset as u64;
        cfg_seed.train.early_stop_miou = 0.0;

        // phase 0 once per seed, shared by every cell
        let records = load_records(data_dir, "train")?;
        let tokenizer = Tokenizer::from_reports(records.iter().map(|r| r.report.as_str()));
        let train_set: Vec<Sample<T>> =
            load_split(data_dir, "train", &tokenizer, &cfg_seed.model)?;
        let val_set: Vec<Sample<T>> = load_split(data_dir, "val", &tokenizer, &cfg_seed.model)?;
        let mut params0: ParamSet<T> = init_params(&cfg_seed.model, cfg_seed.seed);
        let p0 = pretrain_mask(&cfg_seed, &mut params0, &train_set, &val_set)?;
        log::info!(
            "seed {}: phase0 holdout mask IoU {:.3}",
            cfg_seed.seed,
            p0.holdout_iou
        );

        for (cell, kps_on, gla_on) in CELLS {
            let mut cfg_cell = cfg_seed.clone();
            cfg_cell.ablation.kps_on = kps_on;
            cfg_cell.ablation.gla_on = gla_on;
            let cell_dir = out_dir.join(format!("{cell}/seed{seed_offset}"));
            let outcome = train::<T>(&cfg_cell, data_dir, &cell_dir, Some(params0.clone()))?;
            let report =
                evaluate_checkpoint::<T>(&outcome.best_checkpoint, data_dir, "val", None, None)?;
            log::info!(
                "seed {} cell {cell}: val mIoU {:.4} (best step {})",
                cfg_seed.seed,
                report.miou,
                outcome.best_step
            );
            reports.entry(cell).or_default().push(report);
        }
    }

    let rows: Vec<AblationRow> = CELLS
        .iter()
        .map(|(cell, _, _)| {
            let rs = &reports[cell];
            let pick = |f: fn(&EvalReport) -> f64| median(&rs.iter().map(f).collect::<Vec<_>>());
            AblationRow {
                cell: cell.to_string(),
                miou: pick(|r| r.miou),
                ap10: pick(|r| r.ap10),
                ap30: pick(|r| r.ap30),
                ap50: pick(|r| r.ap50),
                seed_mious: rs.iter().map(|r| r.miou).collect(),
            }
        })
        .collect();

    std::fs::write(out_dir.join("ablation.md"), format_markdown(&rows))?;
    std::fs::write(out_dir.join("ablation.csv"), format_csv(&rows))?;
    Ok(rows)
}
