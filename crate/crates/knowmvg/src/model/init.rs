//! Parameter inventory and initialization. Every tensor is seeded from
//! (root seed, parameter name) so insertion order never matters.

use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::numerics::rng::derive_rng;
use crate::numerics::{ParamSet, Real, Tensor};

/// Prefixes that are frozen from initialization onward: the corner prompt
/// encoding (γ, corner-type embeddings) and the mask-to-dense conv stack.
pub const FROZEN_PRIOR_PREFIXES: [&str; 2] = ["prompt.", "pmask."];

/// Fixed 2D sine–cosine table for the image grid: the first half of the
/// channels encodes column position, the second half row position, each as
/// interleaved sin/cos over geometrically spaced frequencies. Starting from
/// an informative table (rather than noise) is what lets the box heads reach
/// sub-patch precision quickly; the tensor stays trainable.
fn sincos_grid<T: Real>(grid: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    let mut out = Tensor::zeros(grid * grid, c);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for (offset, pos) in [(0, gx), (half, gy)] {
                for k in 0..half {
                    let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
                    let angle = pos as f64 * freq;
                    let v = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                    out[(row, offset + k)] = T::cast(v);
                }
            }
        }
    }
    out
}

/// Hidden width of the P_mask conv stack.
pub const PMASK_HIDDEN: usize = 16;

struct Builder<T: Real> {
    params: ParamSet<T>,
    seed: u64,
}

impl<T: Real> Builder<T> {
    fn rng(&self, name: &str) -> ChaCha8Rng {
        derive_rng(self.seed, name)
    }

    fn randn(&mut self, name: &str, rows: usize, cols: usize, std: f64, trainable: bool) {
        let mut rng = self.rng(name);
        let value = Tensor::randn(rows, cols, std, &mut rng);
        self.params.insert(name, value, trainable);
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize, trainable: bool) {
        self.params.insert(name, Tensor::zeros(rows, cols), trainable);
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, trainable: bool) {
        self.randn(
            &format!("{prefix}.w"),
            d_in,
            d_out,
            1.0 / (d_in as f64).sqrt(),
            trainable,
        );
        self.zeros(&format!("{prefix}.b"), 1, d_out, trainable);
    }

    fn layer_norm(&mut self, prefix: &str, width: usize, trainable: bool) {
        self.params
            .insert(format!("{prefix}.g"), Tensor::full(1, width, T::one()), trainable);
        self.zeros(&format!("{prefix}.b"), 1, width, trainable);
    }

    fn attn(&mut self, prefix: &str, width: usize, trainable: bool) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{part}"), width, width, trainable);
        }
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize, trainable: bool) {
        self.linear(&format!("{prefix}.l1"), d_in, d_hidden, trainable);
        self.linear(&format!("{prefix}.l2"), d_hidden, d_out, trainable);
    }

    fn attn_block(&mut self, prefix: &str, width: usize, trainable: bool) {
        self.attn(&format!("{prefix}.attn"), width, trainable);
        self.layer_norm(&format!("{prefix}.ln1"), width, trainable);
        self.mlp(&format!("{prefix}.ffn"), width, 2 * width, width, trainable);
        self.layer_norm(&format!("{prefix}.ln2"), width, trainable);
    }

    fn one_way_block(&mut self, prefix: &str, width: usize, trainable: bool) {
        self.attn(&format!("{prefix}.self"), width, trainable);
        self.layer_norm(&format!("{prefix}.ln1"), width, trainable);
        self.attn(&format!("{prefix}.t2i"), width, trainable);
        self.layer_norm(&format!("{prefix}.ln2"), width, trainable);
        self.mlp(&format!("{prefix}.ffn"), width, 2 * width, width, trainable);
        self.layer_norm(&format!("{prefix}.ln3"), width, trainable);
    }

    fn two_way_block(&mut self, prefix: &str, width: usize, trainable: bool) {
        self.one_way_block(prefix, width, trainable);
        self.attn(&format!("{prefix}.i2t"), width, trainable);
        self.layer_norm(&format!("{prefix}.ln4"), width, trainable);
    }
}

/// Build the full parameter set for a configuration. The prompt encoder and
/// P_mask stack are born frozen; the mask decoder trains during mask
/// pretraining and is frozen afterwards via [`freeze_mask_decoder`].
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamSet<T> {
    let c = cfg.channels;
    let dm = cfg.latent_dim;
    let d = cfg.knowledge_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut b = Builder {
        params: ParamSet::new(),
        seed,
    };

    // image encoder
    b.linear("enc.patch", p2, c, true);
    b.params.insert("enc.pos", sincos_grid(cfg.grid(), c), true);
    b.mlp("enc.ffn", c, 2 * c, c, true);
    b.layer_norm("enc.ln1", c, true);

    // report encoder
    b.randn("txt.embed", cfg.vocab_size, c, 0.02, true);
    b.randn("txt.pos", cfg.max_report_tokens, c, 0.02, true);
    b.attn_block("txt.blk", c, true);

    // multimodal query over (image tokens ++ text tokens)
    b.randn("mm.query", 1, c, 0.02, true);
    b.attn_block("mm.blk0", c, true);
    b.attn_block("mm.blk1", c, true);
    b.linear("mm.hbox", c, dm, true);
    b.linear("mm.vlm", dm, d, true);
    b.linear("mm.phrase", c, 1, true);

    // knowledge propagation and prompt projections
    for i in 0..cfg.gcn_depth {
        b.linear(&format!("gcn.l{i}"), d, d, true);
    }
    b.linear("kps.proj", d, c, true);
    b.linear("tok.proj", dm, c, true);

    // box head(s)
    b.mlp("fphi", dm, dm, 4, true);
    if !cfg.share_fusion_head {
        b.mlp("fphi_fused", dm, dm, 4, true);
    }

    // corner prompt encoding (frozen priors)
    {
        let mut rng = b.rng("prompt.fourier");
        let freqs = Tensor::randn(cfg.fourier_features, 2, 1.0, &mut rng)
            .map(|x| x * T::cast(std::f64::consts::TAU));
        b.params.insert("prompt.fourier", freqs, false);
    }
    let f_std = 1.0 / (cfg.fourier_features as f64).sqrt();
    b.randn("prompt.fcos", cfg.fourier_features, c, f_std, false);
    b.randn("prompt.fsin", cfg.fourier_features, c, f_std, false);
    b.randn("prompt.tl", 1, c, 0.02, false);
    b.randn("prompt.br", 1, c, 0.02, false);

    // shared box decoder
    b.randn("boxdec.outtok", 1, c, 0.02, true);
    b.one_way_block("boxdec.blk0", c, true);
    b.one_way_block("boxdec.blk1", c, true);
    b.linear("boxdec.out", c, dm, true);

    // mask decoder (frozen after phase-0)
    b.randn("maskdec.outtok", 1, c, 0.02, true);
    b.two_way_block("maskdec.blk0", c, true);
    b.two_way_block("maskdec.blk1", c, true);
    b.linear("maskdec.proj", c, c, true);

    // mask-to-dense conv stack (frozen prior)
    b.randn("pmask.conv1.w", 9, PMASK_HIDDEN, 1.0 / 3.0, false);
    b.zeros("pmask.conv1.b", 1, PMASK_HIDDEN, false);
    b.randn(
        "pmask.conv2.w",
        9 * PMASK_HIDDEN,
        c,
        1.0 / (9.0 * PMASK_HIDDEN as f64).sqrt(),
        false,
    );
    b.zeros("pmask.conv2.b", 1, c, false);

    // global–local fusion weight
    b.zeros("fusion.alpha_raw", 1, 1, true);

    b.params
}

/// Freeze the mask decoder after phase-0 pretraining. Returns the number of
/// tensors frozen.
pub fn freeze_mask_decoder<T: Real>(params: &mut ParamSet<T>) -> usize {
    params.freeze_prefix("maskdec.")
}
