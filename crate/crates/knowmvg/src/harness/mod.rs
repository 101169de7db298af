//! Training and evaluation harness: synthetic data, the optimizer, the two
//! training phases, checkpoints, and the reporting commands behind the CLI.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod gradsuite;
pub mod optim;
pub mod pgm;
pub mod phase0;
pub mod render;
pub mod tokenizer;
pub mod train;

pub use ablate::{run_ablation, AblationRow, CELLS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use config::{AblationConfig, DataConfig, RunConfig, TrainConfig};
pub use data::{generate_dataset, load_records, load_split, DataRecord, Sample};
pub use evaluate::{evaluate_checkpoint, predict_boxes};
pub use gradsuite::run_grad_suite;
pub use optim::AdamW;
pub use phase0::{pretrain_mask, Phase0Report};
pub use render::render_sample;
pub use tokenizer::Tokenizer;
pub use train::{train, KnowledgeContext, TrainOutcome};
