//! knowmvg — knowledge-prompted visual grounding for radiology reports.
//!
//! The crate is organised as a pipeline:
//!
//! * [`kg`] builds a small knowledge graph from a report corpus plus an
//!   entity-description source (bundled fixtures or a remote service);
//! * [`encoder`] turns graph nodes into embeddings, runs a graph
//!   convolutional encoder over them and selects the prompts most relevant
//!   to a multimodal query vector;
//! * [`model`] is the grounding network: a patch image encoder, a
//!   query-token multimodal fuser, and a dual global/local box decoding
//!   pipeline steered by the selected knowledge prompts;
//! * [`loss`] and the metrics it hosts score predicted boxes;
//! * [`harness`] holds the config, synthetic data generator, optimizer,
//!   trainer, evaluator, renderer and checkpoint codec behind the CLI.
//!
//! All numerics are generic over [`numerics::Real`]; the crate-root aliases
//! fix the default precision used by the harness and CLI.

pub mod encoder;
pub mod error;
pub mod harness;
pub mod kg;
pub mod loss;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};

/// Default scalar type for the shipped pipeline.
pub type Elem = f64;
/// Single-precision alternate; every public numeric API accepts it too.
pub type Elem32 = f32;

pub type Tensor = numerics::Tensor<Elem>;
pub type Tensor32 = numerics::Tensor<Elem32>;
pub type Graph = numerics::Graph<Elem>;
pub type ParamSet = numerics::ParamSet<Elem>;
