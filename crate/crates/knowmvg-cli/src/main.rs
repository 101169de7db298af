//! Command-line front end: dataset generation, knowledge-graph construction,
//! the two training phases, evaluation, figure rendering, the ablation
//! table, and an end-to-end gradient check.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use knowmvg::harness::ablate::format_markdown;
use knowmvg::harness::{
    evaluate_checkpoint, generate_dataset, load_checkpoint, load_records, load_split,
    pretrain_mask, render_sample, run_ablation, run_grad_suite, save_checkpoint, train,
    RunConfig, Tokenizer,
};
use knowmvg::kg::{
    build_graph, load_corpus, save_graph, CachedClient, FixtureClient, LexiconProvider,
    RemoteClient, RemoteOptions,
};
use knowmvg::model::init_params;
use knowmvg::{Elem, ParamSet};

#[derive(Parser)]
#[command(
    name = "knowmvg",
    version,
    about = "Knowledge-prompted visual grounding: data, training, evaluation, figures."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every data-facing command.
#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (each command has a default under runs/).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dataset directory; defaults to `data.dir` from the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn data_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| cfg.data.dir.clone())
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default configuration as TOML.
    DumpConfig,
    /// Generate the synthetic dataset and its knowledge fixtures.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Build the knowledge graph from a corpus and save it as JSON.
    BuildKg {
        #[command(flatten)]
        common: Common,
        /// Remote knowledge endpoint; bundled fixture files are used when
        /// omitted. The credential comes from KNOWMVG_KG_API_KEY.
        #[arg(long)]
        remote: Option<String>,
        /// On-disk cache for remote lookups.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Phase 0: pretrain the mask decoder and save it frozen.
    PretrainMask {
        #[command(flatten)]
        common: Common,
    },
    /// Train the grounding model. Runs phase 0 first unless --phase0 points
    /// at an existing checkpoint (or the global route is disabled).
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding pretrained mask-decoder weights.
        #[arg(long)]
        phase0: Option<PathBuf>,
        /// Single-threaded, bit-reproducible execution.
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Also write per-sample IoUs as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Render box overlay, mask heat-map and attention figures for a sample.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run the four-cell ablation and write the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Verify analytic gradients end to end at a small configuration.
    CheckGrads {
        /// Seed for the synthetic check sample.
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match Cli::parse().cmd {
        Cmd::DumpConfig => {
            print!("{}", RunConfig::default_toml());
            Ok(())
        }
        Cmd::GenData { common } => gen_data(&common),
        Cmd::BuildKg {
            common,
            remote,
            cache_dir,
        } => build_kg(&common, remote.as_deref(), cache_dir.as_deref()),
        Cmd::PretrainMask { common } => pretrain(&common),
        Cmd::Train {
            common,
            phase0,
            deterministic,
        } => run_train(&common, phase0.as_deref(), deterministic),
        Cmd::Eval {
            common,
            ckpt,
            split,
            csv,
        } => eval(&common, &ckpt, &split, csv),
        Cmd::Render {
            common,
            ckpt,
            split,
            index,
        } => render(&common, &ckpt, &split, index),
        Cmd::Ablate { common } => ablate(&common),
        Cmd::CheckGrads { seed } => check_grads(seed),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let out = common
        .out_dir
        .clone()
        .unwrap_or_else(|| common.data_dir(&cfg));
    let summary = generate_dataset(&cfg, &out)?;
    println!(
        "wrote {} samples to {} (train/val/test = {}/{}/{}; entities: {})",
        summary.n,
        out.display(),
        summary.split_sizes[0],
        summary.split_sizes[1],
        summary.split_sizes[2],
        summary.entities.join(", "),
    );
    Ok(())
}

fn build_kg(common: &Common, remote: Option<&str>, cache_dir: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let data_dir = common.data_dir(&cfg);
    let corpus = load_corpus(&data_dir.join("corpus.jsonl"))?;
    let provider = LexiconProvider::from_file(&data_dir.join("lexicon.txt"))?;
    let kg = match remote {
        Some(url) => {
            let client = RemoteClient::new(url, RemoteOptions::default());
            match cache_dir {
                Some(dir) => build_graph(&corpus, &provider, &CachedClient::new(client, dir)?)?,
                None => build_graph(&corpus, &provider, &client)?,
            }
        }
        None => build_graph(&corpus, &provider, &FixtureClient::new(data_dir.join("knowledge")))?,
    };
    let out = common.out_dir("runs/kg");
    std::fs::create_dir_all(&out)?;
    let path = out.join("graph.json");
    save_graph(&kg, &path)?;
    println!(
        "graph: {} nodes, {} triples -> {}",
        kg.node_count(),
        kg.triples().len(),
        path.display()
    );
    Ok(())
}

/// Load the train/val splits with a tokenizer built from the train reports.
fn load_phase0_splits(
    cfg: &RunConfig,
    data_dir: &Path,
) -> Result<(Tokenizer, Vec<knowmvg::harness::Sample<Elem>>, Vec<knowmvg::harness::Sample<Elem>>)> {
    let records = load_records(data_dir, "train")?;
    let tokenizer = Tokenizer::from_reports(records.iter().map(|r| r.report.as_str()));
    let train = load_split(data_dir, "train", &tokenizer, &cfg.model)?;
    let val = load_split(data_dir, "val", &tokenizer, &cfg.model)?;
    Ok((tokenizer, train, val))
}

fn pretrain(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let data_dir = common.data_dir(&cfg);
    let out = common.out_dir("runs/phase0");
    let (tokenizer, train_split, val_split) = load_phase0_splits(&cfg, &data_dir)?;
    let mut params = init_params::<Elem>(&cfg.model, cfg.seed);
    let report = pretrain_mask(&cfg, &mut params, &train_split, &val_split)?;
    let path = out.join("phase0.ckpt");
    save_checkpoint(&path, &params, &cfg, &tokenizer.words(), report.steps)?;
    println!(
        "phase 0 done: {} steps, final loss {:.4}, held-out mask IoU {:.3} -> {}",
        report.steps,
        report.final_loss,
        report.holdout_iou,
        path.display()
    );
    Ok(())
}

fn run_train(common: &Common, phase0: Option<&Path>, deterministic: bool) -> Result<()> {
    let mut cfg = common.load()?;
    if deterministic {
        cfg.train.deterministic = true;
    }
    let data_dir = common.data_dir(&cfg);
    let out = common.out_dir("runs/train");

    let initial: Option<ParamSet> = match phase0 {
        Some(path) => {
            let (params, manifest) = load_checkpoint::<Elem>(path)?;
            if manifest.config.model != cfg.model {
                bail!(
                    "phase-0 checkpoint {} was trained with a different model section",
                    path.display()
                );
            }
            Some(params)
        }
        None if cfg.effective_model().use_gla => {
            log::info!("no --phase0 checkpoint; running mask pretraining first");
            let (tokenizer, train_split, val_split) = load_phase0_splits(&cfg, &data_dir)?;
            let mut params = init_params::<Elem>(&cfg.model, cfg.seed);
            let report = pretrain_mask(&cfg, &mut params, &train_split, &val_split)?;
            let path = out.join("phase0.ckpt");
            save_checkpoint(&path, &params, &cfg, &tokenizer.words(), report.steps)?;
            log::info!(
                "phase 0: held-out mask IoU {:.3}, saved {}",
                report.holdout_iou,
                path.display()
            );
            Some(params)
        }
        None => None,
    };

    let outcome = train(&cfg, &data_dir, &out, initial)?;
    println!(
        "trained {} steps; best val mIoU {:.4} at step {} -> {}",
        outcome.steps,
        outcome.best_miou,
        outcome.best_step,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, split: &str, csv: bool) -> Result<()> {
    let cfg = common.load()?;
    let data_dir = common.data_dir(&cfg);
    let out = common.out_dir("runs/eval");
    std::fs::create_dir_all(&out)?;
    let json = out.join("report.json");
    let csv_path = out.join("per_sample.csv");
    let report = evaluate_checkpoint::<Elem>(
        ckpt,
        &data_dir,
        split,
        Some(&json),
        csv.then_some(csv_path.as_path()),
    )?;
    println!(
        "{split}: mIoU {:.4}  AP@0.1 {:.4}  AP@0.3 {:.4}  AP@0.5 {:.4} -> {}",
        report.miou,
        report.ap10,
        report.ap30,
        report.ap50,
        json.display()
    );
    Ok(())
}

fn render(common: &Common, ckpt: &Path, split: &str, index: usize) -> Result<()> {
    let cfg = common.load()?;
    let data_dir = common.data_dir(&cfg);
    let out = common.out_dir("runs/render");
    let files = render_sample::<Elem>(ckpt, &data_dir, split, index, &out)?;
    println!("wrote {} figures:", files.len());
    for f in files {
        println!("  {}", f.display());
    }
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let data_dir = common.data_dir(&cfg);
    let out = common.out_dir("runs/ablate");
    let rows = run_ablation::<Elem>(&cfg, &data_dir, &out)?;
    print!("{}", format_markdown(&rows));
    println!("table written to {}", out.join("ablation.md").display());
    Ok(())
}

fn check_grads(seed: u64) -> Result<()> {
    let reports = run_grad_suite::<f64>(seed)?;
    let mut failed = 0usize;
    for r in &reports {
        println!("{r}");
        if !r.pass {
            failed += 1;
        }
    }
    let worst = reports
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    println!(
        "checked {} trainable tensors; worst relative error {:.3e}",
        reports.len(),
        worst
    );
    if failed > 0 {
        bail!("{failed} tensors failed the gradient check");
    }
    Ok(())
}
