//! The grounding model: image/text encoding into latent tokens, a coarse box
//! prompt, a frozen mask decoder feeding a dense global prompt, a shared box
//! decoder with two prompt routes, and learnable global–local fusion.

pub mod blocks;
pub mod forward;
pub mod init;

pub use forward::{
    build_prompt_tokens, decode_global, decode_local, decode_mask, encode_box_prompt,
    encode_image, encode_multimodal, extract_output, forward, forward_decode, forward_encode,
    fuse_and_predict, mask_to_dense, patchify, predict_local_box, read_box, EncodedImage,
    ForwardPass, KnowledgeInputs, LatentTokens,
};
pub use init::{freeze_mask_decoder, init_params, FROZEN_PRIOR_PREFIXES};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::BBox;
use crate::numerics::{GradMap, Graph, ParamSet, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input images are `image_size` × `image_size`, values in [0,1].
    pub image_size: usize,
    pub patch_size: usize,
    /// Channel width c of image tokens and decoder state.
    pub channels: usize,
    /// Latent grounding-token dimension d_m.
    pub latent_dim: usize,
    /// Knowledge embedding dimension d.
    pub knowledge_dim: usize,
    /// Global mask side length G'.
    pub mask_size: usize,
    /// Random Fourier frequency count in the corner encoding.
    pub fourier_features: usize,
    pub max_report_tokens: usize,
    pub vocab_size: usize,
    /// Knowledge prompts selected per sample.
    pub top_k: usize,
    pub gcn_depth: usize,
    /// Reuse one box head for the coarse and the fused prediction.
    pub share_fusion_head: bool,
    pub use_kps: bool,
    pub use_gla: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            patch_size: 8,
            channels: 64,
            latent_dim: 64,
            knowledge_dim: 64,
            mask_size: 64,
            fourier_features: 128,
            max_report_tokens: 16,
            vocab_size: 64,
            top_k: 4,
            gcn_depth: 2,
            share_fusion_head: true,
            use_kps: true,
            use_gla: true,
        }
    }
}

impl ModelConfig {
    /// Image-token grid side G.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("knowledge_dim", self.knowledge_dim),
            ("mask_size", self.mask_size),
            ("fourier_features", self.fourier_features),
            ("max_report_tokens", self.max_report_tokens),
            ("vocab_size", self.vocab_size),
            ("gcn_depth", self.gcn_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.grid() < 2 {
            return Err(Error::Config("token grid must be at least 2x2".into()));
        }
        if self.mask_size < self.grid() {
            return Err(Error::Config(format!(
                "mask_size {} must be at least the token grid {}",
                self.mask_size,
                self.grid()
            )));
        }
        Ok(())
    }

    /// A small configuration for fast tests: 4×4 token grid, 16 channels.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 16,
            latent_dim: 16,
            knowledge_dim: 16,
            mask_size: 8,
            fourier_features: 8,
            max_report_tokens: 8,
            vocab_size: 32,
            top_k: 2,
            ..ModelConfig::default()
        }
    }
}

/// One grounding example: an image, its tokenized report, per-token phrase
/// membership, and the gold box (plus a gold mask for mask pretraining).
#[derive(Clone, Debug)]
pub struct GroundingSample<T: Real> {
    pub id: String,
    /// H×W grid, values in [0,1].
    pub image: Tensor<T>,
    /// Token ids, non-empty, at most `max_report_tokens`.
    pub tokens: Vec<usize>,
    pub phrase_labels: Vec<bool>,
    pub gold_box: BBox<T>,
    /// G'×G' binary lesion mask, present for synthetic data.
    pub gold_mask: Option<Tensor<T>>,
}

/// Everything the forward pass emits, detached from the tape.
#[derive(Clone, Debug)]
pub struct GroundingOutput<T: Real> {
    pub phrase_labels: Vec<bool>,
    pub local_box: BBox<T>,
    /// G'×G' sigmoid mask; absent when the global route is disabled.
    pub global_mask: Option<Tensor<T>>,
    pub fused_box: BBox<T>,
    pub alpha: T,
    /// Per-route, per-block, per-token attention over the image grid, each
    /// reshaped to G×G. Order: local route blocks then global route blocks,
    /// tokens in their decoder order within each block.
    pub attention_maps: Vec<Tensor<T>>,
}

/// A single forward/backward tape bound to a parameter snapshot. Parameters
/// enter the tape lazily as named leaves so gradients can be read back by
/// name afterwards.
pub struct Session<'p, T: Real> {
    pub g: Graph<T>,
    params: &'p ParamSet<T>,
    bound: IndexMap<String, Var>,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Session {
            g: Graph::new(),
            params,
            bound: IndexMap::new(),
        }
    }

    /// Bind (or re-use) the named parameter as a tape leaf.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let param = self
            .params
            .get(name)
            .unwrap_or_else(|e| panic!("model parameter missing: {e}"));
        let v = self.g.leaf(param.value.clone(), param.trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.g.input(value)
    }

    pub fn has_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Run backward from a scalar and collect gradients for every bound
    /// trainable parameter, keyed by name.
    pub fn grads(&mut self, loss: Var) -> GradMap<T> {
        let mut store = self.g.backward(loss);
        let mut out = GradMap::new();
        for (name, &v) in &self.bound {
            if let Some(t) = store.take(v) {
                out.insert(name.clone(), t);
            }
        }
        out
    }
}
