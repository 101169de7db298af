//! The forward pass, assembled from graph ops so a single backward call
//! reaches every trainable parameter.

use super::blocks::{attn_block, box_transform, f_phi, linear, one_way_block, two_way_block};
use super::{GroundingOutput, GroundingSample, ModelConfig, Session};
use crate::encoder::{gcn_forward_graph, KnowledgePrompts};
use crate::error::{Error, Result};
use crate::loss::BBox;
use crate::numerics::{Real, Tensor, Var};

/// Image tokens on the tape plus their grid geometry.
#[derive(Clone, Copy, Debug)]
pub struct EncodedImage {
    /// G²×c token grid (z_enc), row-major over the patch grid.
    pub features: Var,
    pub grid: usize,
    pub source_size: (usize, usize),
}

/// Latent multimodal state: the grounding token, the knowledge query, and
/// per-report-token phrase logits.
#[derive(Clone, Copy, Debug)]
pub struct LatentTokens {
    pub h_box: Var,
    pub h_vlm: Var,
    /// n×1 logits, one row per report token.
    pub phrase_logits: Var,
}

/// Knowledge-graph tensors for in-graph propagation: the normalized
/// adjacency and the initial node embeddings. When supplied, the selected
/// prompt rows are recomputed on the tape so GCN weights receive gradients.
#[derive(Clone, Debug)]
pub struct KnowledgeInputs<T: Real> {
    pub a_hat: Tensor<T>,
    pub h0: Tensor<T>,
}

/// Split an H×W image into non-overlapping patches, one flattened patch per
/// row, patches ordered row-major over the patch grid.
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Tensor<T> {
    let g_r = image.rows() / patch;
    let g_c = image.cols() / patch;
    let mut out = Tensor::zeros(g_r * g_c, patch * patch);
    for pr in 0..g_r {
        for pc in 0..g_c {
            let row = out.row_mut(pr * g_c + pc);
            for dy in 0..patch {
                let src = image.row(pr * patch + dy);
                for dx in 0..patch {
                    row[dy * patch + dx] = src[pc * patch + dx];
                }
            }
        }
    }
    out
}

pub fn encode_image<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<EncodedImage> {
    if image.shape() != (cfg.image_size, cfg.image_size) {
        return Err(Error::contract(format!(
            "expected a {0}x{0} image, got {1}x{2}",
            cfg.image_size,
            image.rows(),
            image.cols()
        )));
    }
    if image
        .as_slice()
        .iter()
        .any(|&v| v < T::zero() || v > T::one())
    {
        return Err(Error::contract("image values must lie in [0,1]"));
    }
    let patches = s.input(patchify(image, cfg.patch_size));
    let z = linear(s, "enc.patch", patches);
    let pos = s.p("enc.pos");
    let z = s.g.add(z, pos);
    let m = super::blocks::mlp(s, "enc.ffn", z);
    let features = super::blocks::residual_ln(s, "enc.ln1", z, m);
    Ok(EncodedImage {
        features,
        grid: cfg.grid(),
        source_size: (image.rows(), image.cols()),
    })
}

pub fn encode_multimodal<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    z: &EncodedImage,
    tokens: &[usize],
) -> Result<LatentTokens> {
    if tokens.is_empty() {
        return Err(Error::contract("report must have at least one token"));
    }
    if tokens.len() > cfg.max_report_tokens {
        return Err(Error::contract(format!(
            "report has {} tokens, limit is {}",
            tokens.len(),
            cfg.max_report_tokens
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let embed = s.p("txt.embed");
    let e = s.g.gather_rows(embed, tokens);
    let pos_all = s.p("txt.pos");
    let pos = s.g.slice_rows(pos_all, 0, tokens.len());
    let x = s.g.add(e, pos);
    let (x, _) = attn_block(s, "txt.blk", x, x);
    let phrase_logits = linear(s, "mm.phrase", x);

    let ctx = s.g.concat_rows(&[z.features, x]);
    let mut q = s.p("mm.query");
    for blk in ["mm.blk0", "mm.blk1"] {
        let (next, _) = attn_block(s, blk, q, ctx);
        q = next;
    }
    let h_box = linear(s, "mm.hbox", q);
    let h_vlm = linear(s, "mm.vlm", h_box);
    Ok(LatentTokens {
        h_box,
        h_vlm,
        phrase_logits,
    })
}

/// Coarse box b = f_Φ(h_box), as a 1×4 corner row on the tape.
pub fn predict_local_box<T: Real>(s: &mut Session<T>, h_box: Var) -> Var {
    let logits = f_phi(s, "fphi", h_box);
    box_transform(s, logits)
}

/// Seeded Fourier corner encoding γ of a 1×2 point.
fn gamma<T: Real>(s: &mut Session<T>, point: Var) -> Var {
    let freqs = s.p("prompt.fourier");
    let ang = s.g.matmul_nt(point, freqs);
    let c = s.g.cos(ang);
    let sn = s.g.sin(ang);
    let fcos = s.p("prompt.fcos");
    let fsin = s.p("prompt.fsin");
    let a = s.g.matmul(c, fcos);
    let b = s.g.matmul(sn, fsin);
    s.g.add(a, b)
}

/// Sparse prompt s = [γ(b_tl) + e_tl ; γ(b_br) + e_br] — all parameters
/// frozen, rows strictly per-corner.
pub fn encode_box_prompt<T: Real>(s: &mut Session<T>, box_corners: Var) -> Var {
    let tl = s.g.slice_cols(box_corners, 0, 2);
    let br = s.g.slice_cols(box_corners, 2, 4);
    let g_tl = gamma(s, tl);
    let g_br = gamma(s, br);
    let e_tl = s.p("prompt.tl");
    let e_br = s.p("prompt.br");
    let row_tl = s.g.add(g_tl, e_tl);
    let row_br = s.g.add(g_br, e_br);
    s.g.concat_rows(&[row_tl, row_br])
}

/// Run the shared box decoder over image tokens with the given prompt rows.
/// Returns the output token's state projected to d_m, plus the per-block
/// token-over-image attention probabilities.
fn run_box_decoder<T: Real>(
    s: &mut Session<T>,
    image_tokens: Var,
    prompt_rows: &[Var],
) -> (Var, Vec<Var>) {
    let outtok = s.p("boxdec.outtok");
    let mut parts = vec![outtok];
    parts.extend_from_slice(prompt_rows);
    let mut t = s.g.concat_rows(&parts);
    let mut maps = Vec::new();
    for blk in ["boxdec.blk0", "boxdec.blk1"] {
        let (next, probs) = one_way_block(s, blk, t, image_tokens);
        t = next;
        maps.push(probs);
    }
    let out = s.g.slice_rows(t, 0, 1);
    (linear(s, "boxdec.out", out), maps)
}

/// Local route (sparse prompt only): tokens = [output-token; s].
pub fn decode_local<T: Real>(
    s: &mut Session<T>,
    z: &EncodedImage,
    sparse: Var,
) -> (Var, Vec<Var>) {
    run_box_decoder(s, z.features, &[sparse])
}

/// Build t = Cat(projected h_k, projected h_box). With no knowledge prompts
/// the knowledge rows are simply absent.
pub fn build_prompt_tokens<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    prompts: &KnowledgePrompts<T>,
    knowledge: Option<&KnowledgeInputs<T>>,
    h_box: Var,
) -> Var {
    let kb = linear(s, "tok.proj", h_box);
    if prompts.effective_k() == 0 {
        return kb;
    }
    let selected = match knowledge {
        Some(kin) => {
            let a_hat = s.input(kin.a_hat.clone());
            let h0 = s.input(kin.h0.clone());
            let layers: Vec<(Var, Var)> = (0..cfg.gcn_depth)
                .map(|i| {
                    (
                        s.p(&format!("gcn.l{i}.w")),
                        s.p(&format!("gcn.l{i}.b")),
                    )
                })
                .collect();
            let propagated = gcn_forward_graph(&mut s.g, a_hat, h0, &layers);
            s.g.gather_rows(propagated, &prompts.source_indices)
        }
        None => s.input(prompts.embeddings.clone()),
    };
    let hk = linear(s, "kps.proj", selected);
    s.g.concat_rows(&[hk, kb])
}

/// Frozen mask decoder: tokens = [mask output token; t] over image tokens,
/// two-way attention, then a per-pixel dot with the mask token. Returns the
/// sigmoid mask (G'²×1) and its pre-sigmoid logits for training.
pub fn decode_mask<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    z: &EncodedImage,
    t: Option<Var>,
) -> (Var, Var) {
    let outtok = s.p("maskdec.outtok");
    let mut tokens = match t {
        Some(t) => {
            let parts = [outtok, t];
            s.g.concat_rows(&parts)
        }
        None => outtok,
    };
    let mut img = z.features;
    for blk in ["maskdec.blk0", "maskdec.blk1"] {
        let (nt, ni, _) = two_way_block(s, blk, tokens, img);
        tokens = nt;
        img = ni;
    }
    let m_tok = s.g.slice_rows(tokens, 0, 1);
    let img_proj = linear(s, "maskdec.proj", img);
    let logits = s.g.matmul_nt(img_proj, m_tok);
    let up = s
        .g
        .resize_bilinear(logits, z.grid, z.grid, cfg.mask_size, cfg.mask_size);
    let mask = s.g.sigmoid(up);
    (mask, up)
}

/// Dense prompt d = P_mask(R(m)): resize the mask back to the token grid and
/// push it through the frozen conv stack to channel width c.
pub fn mask_to_dense<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    mask: Var,
) -> Var {
    let g = cfg.grid();
    let small = s
        .g
        .resize_bilinear(mask, cfg.mask_size, cfg.mask_size, g, g);
    let col1 = s.g.im2col(small, g, g, 3);
    let h = linear(s, "pmask.conv1", col1);
    let h = s.g.relu(h);
    let col2 = s.g.im2col(h, g, g, 3);
    linear(s, "pmask.conv2", col2)
}

/// Global route: z'_enc = z_enc + d, then the shared box decoder with the
/// knowledge/box token set t.
pub fn decode_global<T: Real>(
    s: &mut Session<T>,
    z: &EncodedImage,
    dense: Var,
    t: Var,
) -> (Var, Vec<Var>) {
    let z2 = s.g.add(z.features, dense);
    run_box_decoder(s, z2, &[t])
}

/// z_box = α·z_local + (1−α)·z_global with α = sigmoid(raw).
pub fn fuse<T: Real>(s: &mut Session<T>, z_local: Var, z_global: Var) -> (Var, Var) {
    let raw = s.p("fusion.alpha_raw");
    let alpha = s.g.sigmoid(raw);
    let one = s.input(Tensor::scalar(T::one()));
    let om = s.g.sub(one, alpha);
    let zl = s.g.scale_by(alpha, z_local);
    let zg = s.g.scale_by(om, z_global);
    (alpha, s.g.add(zl, zg))
}

/// Fusion plus the final box; the fused box comes from the same head as the
/// coarse box unless unshared in config.
pub fn fuse_and_predict<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    z_local: Var,
    z_global: Var,
) -> (Var, Var) {
    let (alpha, z_box) = fuse(s, z_local, z_global);
    let head = if cfg.share_fusion_head {
        "fphi"
    } else {
        "fphi_fused"
    };
    let logits = f_phi(s, head, z_box);
    (alpha, box_transform(s, logits))
}

/// Tape handles for everything the loss and the exporter need.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub z: EncodedImage,
    pub latent: LatentTokens,
    /// Coarse box (1×4 corners) from the latent head; prompt source and
    /// auxiliary supervision target on every route.
    pub local_box: Var,
    pub fused_box: Var,
    pub alpha: Var,
    /// Sigmoid mask, G'²×1 (global route only).
    pub mask: Option<Var>,
    pub z_local: Var,
    pub z_global: Option<Var>,
    /// Token-over-image probability matrices, local route blocks first.
    pub attention: Vec<Var>,
    /// (route, block index) for each entry of `attention`.
    pub attention_meta: Vec<(&'static str, usize)>,
}

/// Encoding stage: image and multimodal latents. Splitting here lets the
/// caller read h_vlm off the tape to select knowledge prompts before the
/// decoding stage continues on the same tape.
pub fn forward_encode<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    sample: &GroundingSample<T>,
) -> Result<(EncodedImage, LatentTokens)> {
    let z = encode_image(s, cfg, &sample.image)?;
    let latent = encode_multimodal(s, cfg, &z, &sample.tokens)?;
    Ok((z, latent))
}

/// Full composition. `prompts` may be empty (KPS off); `knowledge` switches
/// the selected prompt rows to an in-graph GCN recomputation.
pub fn forward<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    sample: &GroundingSample<T>,
    prompts: &KnowledgePrompts<T>,
    knowledge: Option<&KnowledgeInputs<T>>,
) -> Result<ForwardPass> {
    let (z, latent) = forward_encode(s, cfg, sample)?;
    forward_decode(s, cfg, z, latent, prompts, knowledge)
}

/// Decoding stage: coarse box, both prompt routes, fusion.
pub fn forward_decode<T: Real>(
    s: &mut Session<T>,
    cfg: &ModelConfig,
    z: EncodedImage,
    latent: LatentTokens,
    prompts: &KnowledgePrompts<T>,
    knowledge: Option<&KnowledgeInputs<T>>,
) -> Result<ForwardPass> {
    let local_box = predict_local_box(s, latent.h_box);
    let sparse = encode_box_prompt(s, local_box);

    let use_kps = cfg.use_kps && prompts.effective_k() > 0;
    let mut attention = Vec::new();
    let mut attention_meta = Vec::new();
    let mut take = |dst: &mut Vec<Var>, maps: Vec<Var>, route: &'static str| {
        for (i, m) in maps.into_iter().enumerate() {
            dst.push(m);
            attention_meta.push((route, i));
        }
    };

    if cfg.use_gla {
        let (z_local, local_maps) = decode_local(s, &z, sparse);
        take(&mut attention, local_maps, "local");
        let t = if use_kps {
            build_prompt_tokens(s, cfg, prompts, knowledge, latent.h_box)
        } else {
            linear(s, "tok.proj", latent.h_box)
        };
        let (mask, _logits) = decode_mask(s, cfg, &z, Some(t));
        let dense = mask_to_dense(s, cfg, mask);
        let (z_global, global_maps) = decode_global(s, &z, dense, t);
        take(&mut attention, global_maps, "global");
        let (alpha, fused_box) = fuse_and_predict(s, cfg, z_local, z_global);
        Ok(ForwardPass {
            z,
            latent,
            local_box,
            fused_box,
            alpha,
            mask: Some(mask),
            z_local,
            z_global: Some(z_global),
            attention,
            attention_meta,
        })
    } else {
        // single route: knowledge prompt rows (if any) join the sparse prompt,
        // and the decoder state alone drives the final box
        let mut rows = vec![sparse];
        if use_kps {
            let t = build_prompt_tokens(s, cfg, prompts, knowledge, latent.h_box);
            rows.push(t);
        }
        let (z_local, maps) = run_box_decoder(s, z.features, &rows);
        take(&mut attention, maps, "local");
        let head = if cfg.share_fusion_head {
            "fphi"
        } else {
            "fphi_fused"
        };
        let logits = f_phi(s, head, z_local);
        let fused_box = box_transform(s, logits);
        let raw = s.p("fusion.alpha_raw");
        let alpha = s.g.sigmoid(raw);
        Ok(ForwardPass {
            z,
            latent,
            local_box,
            fused_box,
            alpha,
            mask: None,
            z_local,
            z_global: None,
            attention,
            attention_meta,
        })
    }
}

/// Read a 1×4 corner row off the tape as a box.
pub fn read_box<T: Real>(s: &Session<T>, v: Var) -> BBox<T> {
    BBox::from_corner_slice(s.g.value(v).as_slice())
        .expect("box transform guarantees validity")
}

/// Detach a finished pass into plain values.
pub fn extract_output<T: Real>(
    s: &Session<T>,
    cfg: &ModelConfig,
    pass: &ForwardPass,
) -> GroundingOutput<T> {
    let phrase_labels = s
        .g
        .value(pass.latent.phrase_logits)
        .as_slice()
        .iter()
        .map(|&l| l > T::zero())
        .collect();
    let global_mask = pass.mask.map(|m| {
        Tensor::new(
            cfg.mask_size,
            cfg.mask_size,
            s.g.value(m).as_slice().to_vec(),
        )
        .expect("mask is G'xG' by construction")
    });
    let g = pass.z.grid;
    let mut attention_maps = Vec::new();
    for &probs in &pass.attention {
        let p = s.g.value(probs);
        for r in 0..p.rows() {
            attention_maps.push(
                Tensor::new(g, g, p.row(r).to_vec()).expect("rows span the image grid"),
            );
        }
    }
    GroundingOutput {
        phrase_labels,
        local_box: read_box(s, pass.local_box),
        global_mask,
        fused_box: read_box(s, pass.fused_box),
        alpha: s.g.value(pass.alpha).item(),
        attention_maps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{
        gcn_forward, normalized_adjacency, GcnLayer, GcnWeights, NodeEmbeddings, Stage,
    };
    use crate::loss::{giou_var, smooth_l1_var};
    use crate::model::blocks::box_transform;
    use crate::model::init_params;
    use crate::numerics::rng::derive_rng;
    use crate::numerics::{check_gradients, GradCheckSettings, GradMap, ParamSet};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_image(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..n * n).map(|_| rng.random::<f64>()).collect();
        Tensor::new(n, n, data).unwrap()
    }

    fn sample(cfg: &ModelConfig, seed: u64) -> GroundingSample<f64> {
        let mut rng = derive_rng(seed, "sample");
        GroundingSample {
            id: format!("s{seed}"),
            image: uniform_image(cfg.image_size, &mut rng),
            tokens: vec![1, 2, 3],
            phrase_labels: vec![false, true, false],
            gold_box: BBox::new(0.25, 0.25, 0.625, 0.625).unwrap(),
            gold_mask: None,
        }
    }

    fn some_prompts(cfg: &ModelConfig, seed: u64) -> crate::encoder::KnowledgePrompts<f64> {
        let mut rng = derive_rng(seed, "prompts");
        crate::encoder::KnowledgePrompts {
            embeddings: Tensor::randn(2, cfg.knowledge_dim, 1.0, &mut rng),
            source_indices: vec![0, 1],
            scores: vec![0.9, 0.8],
        }
    }

    #[test]
    fn zero_logits_give_the_centered_default_box() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 0);
        let mut s = Session::new(&params);
        let logits = s.input(Tensor::zeros(1, 4));
        let corners = box_transform(&mut s, logits);
        assert_eq!(s.g.value(corners).as_slice(), [0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn extreme_negative_size_logits_floor_at_epsilon() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 0);
        let mut s = Session::new(&params);
        let logits = s.input(Tensor::row_vector(vec![0.0, 0.0, -800.0, -800.0]));
        let corners = box_transform(&mut s, logits);
        let b = read_box(&s, corners);
        assert!((b.x2 - b.x1 - 1e-3).abs() < 1e-12);
        assert!((b.y2 - b.y1 - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn emitted_corners_round_trip_through_cxcywh() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 4);
        let mut rng = derive_rng(4, "hbox");
        for _ in 0..20 {
            let mut s = Session::new(&params);
            let h = s.input(Tensor::randn(1, cfg.latent_dim, 2.0, &mut rng));
            let corners = predict_local_box(&mut s, h);
            let b = read_box(&s, corners);
            let [cx, cy, w, h2] = b.to_cxcywh();
            assert!((cx - w / 2.0 - b.x1).abs() < 1e-9);
            assert!((cy - h2 / 2.0 - b.y1).abs() < 1e-9);
            assert!((cx + w / 2.0 - b.x2).abs() < 1e-9);
            assert!((cy + h2 / 2.0 - b.y2).abs() < 1e-9);
        }
    }

    #[test]
    fn image_encoding_is_deterministic_and_flip_sensitive() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 1);
        let mut rng = derive_rng(1, "img");
        let img = uniform_image(cfg.image_size, &mut rng);

        let mut s1 = Session::new(&params);
        let z1 = encode_image(&mut s1, &cfg, &img).unwrap();
        let mut s2 = Session::new(&params);
        let z2 = encode_image(&mut s2, &cfg, &img).unwrap();
        assert_eq!(
            s1.g.value(z1.features).as_slice(),
            s2.g.value(z2.features).as_slice()
        );

        let mut flipped = img.clone();
        for r in 0..flipped.rows() {
            flipped.row_mut(r).reverse();
        }
        let mut s3 = Session::new(&params);
        let z3 = encode_image(&mut s3, &cfg, &flipped).unwrap();
        assert!(
            s1.g.value(z1.features)
                .max_abs_diff(s3.g.value(z3.features))
                > 1e-6
        );

        let zero = Tensor::zeros(cfg.image_size, cfg.image_size);
        let mut s4 = Session::new(&params);
        let z4 = encode_image(&mut s4, &cfg, &zero).unwrap();
        assert!(s4.g.value(z4.features).all_finite());

        let bad = Tensor::zeros(cfg.image_size + 1, cfg.image_size);
        assert!(encode_image(&mut Session::new(&params), &cfg, &bad).is_err());
    }

    #[test]
    fn multimodal_latents_are_deterministic_with_contracted_shapes() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 2);
        let mut rng = derive_rng(2, "img");
        let img = uniform_image(cfg.image_size, &mut rng);

        let run = || {
            let mut s = Session::new(&params);
            let z = encode_image(&mut s, &cfg, &img).unwrap();
            let lat = encode_multimodal(&mut s, &cfg, &z, &[1, 5, 2]).unwrap();
            (
                s.g.value(lat.h_box).as_slice().to_vec(),
                s.g.value(lat.h_vlm).shape(),
                s.g.value(lat.phrase_logits).shape(),
            )
        };
        let (h1, vlm_shape, pl_shape) = run();
        let (h2, _, _) = run();
        assert_eq!(h1, h2);
        assert_eq!(vlm_shape, (1, cfg.knowledge_dim));
        assert_eq!(pl_shape, (3, 1));

        let mut s = Session::new(&params);
        let z = encode_image(&mut s, &cfg, &img).unwrap();
        assert!(encode_multimodal(&mut s, &cfg, &z, &[]).is_err());
        assert!(encode_multimodal(&mut s, &cfg, &z, &[cfg.vocab_size]).is_err());
    }

    #[test]
    fn box_prompt_rows_are_per_corner() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 3);

        let encode = |b: [f64; 4]| {
            let mut s = Session::new(&params);
            let bv = s.input(Tensor::row_vector(b.to_vec()));
            let sp = encode_box_prompt(&mut s, bv);
            (
                s.g.value(sp).row(0).to_vec(),
                s.g.value(sp).row(1).to_vec(),
            )
        };
        let (tl_a, br_a) = encode([0.2, 0.3, 0.6, 0.7]);
        let (tl_a2, br_a2) = encode([0.2, 0.3, 0.6, 0.7]);
        assert_eq!(tl_a, tl_a2);
        assert_eq!(br_a, br_a2);
        let (tl_b, br_b) = encode([0.2, 0.3, 0.8, 0.9]);
        assert_eq!(tl_a, tl_b);
        assert_ne!(br_a, br_b);
    }

    #[test]
    fn shifting_the_prompt_box_shifts_the_attention_centroid() {
        let cfg = ModelConfig::tiny();
        let mut params = init_params::<f64>(&cfg, 0);
        let c = cfg.channels;
        // neutralize block-0 self-attention and craft an identity query path
        *params.value_mut("boxdec.blk0.self.o.w").unwrap() = Tensor::zeros(c, c);
        let mut eye = Tensor::zeros(c, c);
        for i in 0..c {
            eye[(i, i)] = 1.0;
        }
        *params.value_mut("boxdec.blk0.t2i.q.w").unwrap() = eye.clone();
        *params.value_mut("boxdec.blk0.t2i.k.w").unwrap() = eye;
        // γ channels 0/1 become sin(0.1·x), sin(0.1·y)
        let mut fourier = Tensor::zeros(cfg.fourier_features, 2);
        fourier[(0, 0)] = 0.1;
        fourier[(1, 1)] = 0.1;
        *params.value_mut("prompt.fourier").unwrap() = fourier;
        *params.value_mut("prompt.fcos").unwrap() = Tensor::zeros(cfg.fourier_features, c);
        let mut fsin = Tensor::zeros(cfg.fourier_features, c);
        fsin[(0, 0)] = 1.0;
        fsin[(1, 1)] = 1.0;
        *params.value_mut("prompt.fsin").unwrap() = fsin;
        *params.value_mut("prompt.tl").unwrap() = Tensor::zeros(1, c);
        *params.value_mut("prompt.br").unwrap() = Tensor::zeros(1, c);

        let g = cfg.grid();
        let mut grid = Tensor::zeros(g * g, c);
        for r in 0..g {
            for col in 0..g {
                grid[(r * g + col, 0)] = col as f64 / (g - 1) as f64;
                grid[(r * g + col, 1)] = r as f64 / (g - 1) as f64;
            }
        }

        let centroid_x = |b: [f64; 4]| {
            let mut s = Session::new(&params);
            let features = s.input(grid.clone());
            let z = EncodedImage {
                features,
                grid: g,
                source_size: (cfg.image_size, cfg.image_size),
            };
            let bv = s.input(Tensor::row_vector(b.to_vec()));
            let sp = encode_box_prompt(&mut s, bv);
            let (_, maps) = decode_local(&mut s, &z, sp);
            let probs = s.g.value(maps[0]); // block 0, rows = [out, tl, br]
            let mut cx = 0.0;
            for j in 0..g * g {
                cx += probs[(1, j)] * ((j % g) as f64 / (g - 1) as f64);
            }
            cx
        };
        let left = centroid_x([0.2, 0.3, 0.6, 0.7]);
        let right = centroid_x([0.4, 0.3, 0.8, 0.7]);
        assert!(
            right > left,
            "attention centroid did not follow the box: {left} vs {right}"
        );
    }

    #[test]
    fn fusion_limits_and_fixed_point() {
        let cfg = ModelConfig::tiny();
        let mut params = init_params::<f64>(&cfg, 5);
        let mut rng = derive_rng(5, "fuse");
        let zl_t = Tensor::randn(1, cfg.latent_dim, 1.0, &mut rng);
        let zg_t = Tensor::randn(1, cfg.latent_dim, 1.0, &mut rng);

        *params.value_mut("fusion.alpha_raw").unwrap() = Tensor::scalar(20.0);
        let mut s = Session::new(&params);
        let zl = s.input(zl_t.clone());
        let zg = s.input(zg_t.clone());
        let (alpha, z_box) = fuse(&mut s, zl, zg);
        assert!(s.g.value(alpha).item() > 0.999_999);
        assert!(s.g.value(z_box).max_abs_diff(&zl_t) < 1e-6);

        *params.value_mut("fusion.alpha_raw").unwrap() = Tensor::scalar(0.0);
        let mut s = Session::new(&params);
        let zl = s.input(zl_t.clone());
        let zg = s.input(zg_t.clone());
        let (alpha, z_box) = fuse(&mut s, zl, zg);
        assert_eq!(s.g.value(alpha).item(), 0.5);
        for i in 0..cfg.latent_dim {
            assert_eq!(
                s.g.value(z_box)[(0, i)],
                0.5 * zl_t[(0, i)] + 0.5 * zg_t[(0, i)]
            );
        }

        *params.value_mut("fusion.alpha_raw").unwrap() = Tensor::scalar(0.3);
        let mut s = Session::new(&params);
        let zl = s.input(zl_t.clone());
        let zg = s.input(zl_t.clone());
        let (_, z_box) = fuse(&mut s, zl, zg);
        assert!(s.g.value(z_box).max_abs_diff(&zl_t) < 1e-15);
    }

    #[test]
    fn zero_dense_prompt_reduces_the_global_route_to_the_local_one() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 6);
        let mut rng = derive_rng(6, "img");
        let img = uniform_image(cfg.image_size, &mut rng);

        let mut s = Session::new(&params);
        let z = encode_image(&mut s, &cfg, &img).unwrap();
        let bv = s.input(Tensor::row_vector(vec![0.2, 0.2, 0.5, 0.5]));
        let sp = encode_box_prompt(&mut s, bv);
        let (z_local, _) = decode_local(&mut s, &z, sp);
        let zeros = s.input(Tensor::zeros(cfg.grid() * cfg.grid(), cfg.channels));
        let (z_global, _) = decode_global(&mut s, &z, zeros, sp);
        assert_eq!(
            s.g.value(z_local).as_slice(),
            s.g.value(z_global).as_slice()
        );
    }

    #[test]
    fn dense_prompt_perturbation_changes_the_global_route() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 6);
        let mut rng = derive_rng(6, "img");
        let img = uniform_image(cfg.image_size, &mut rng);

        let mut s = Session::new(&params);
        let z = encode_image(&mut s, &cfg, &img).unwrap();
        let bv = s.input(Tensor::row_vector(vec![0.2, 0.2, 0.5, 0.5]));
        let sp = encode_box_prompt(&mut s, bv);
        let zeros = s.input(Tensor::zeros(cfg.grid() * cfg.grid(), cfg.channels));
        let (za, _) = decode_global(&mut s, &z, zeros, sp);
        let ones = s.input(Tensor::full(cfg.grid() * cfg.grid(), cfg.channels, 0.5));
        let (zb, _) = decode_global(&mut s, &z, ones, sp);
        assert!(s.g.value(za).max_abs_diff(s.g.value(zb)) > 1e-9);
    }

    #[test]
    fn mask_route_ignores_the_sparse_prompt() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 7);
        let mut rng = derive_rng(7, "img");
        let img = uniform_image(cfg.image_size, &mut rng);

        let run = |corners: [f64; 4]| {
            let mut s = Session::new(&params);
            let z = encode_image(&mut s, &cfg, &img).unwrap();
            let bv = s.input(Tensor::row_vector(corners.to_vec()));
            let sp = encode_box_prompt(&mut s, bv);
            let (z_local, _) = decode_local(&mut s, &z, sp);
            let hb = s.input(Tensor::full(1, cfg.latent_dim, 0.1));
            let t = linear(&mut s, "tok.proj", hb);
            let (mask, _) = decode_mask(&mut s, &cfg, &z, Some(t));
            (
                s.g.value(z_local).as_slice().to_vec(),
                s.g.value(mask).as_slice().to_vec(),
            )
        };
        let (zl_a, m_a) = run([0.1, 0.1, 0.4, 0.4]);
        let (zl_b, m_b) = run([0.5, 0.5, 0.9, 0.9]);
        assert_eq!(m_a, m_b, "mask must not consume the sparse prompt");
        assert_ne!(zl_a, zl_b, "local route must consume the sparse prompt");
        assert!(m_a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(m_a.len(), cfg.mask_size * cfg.mask_size);
    }

    #[test]
    fn forward_is_deterministic_and_ablation_contracts_hold() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 8);
        let sm = sample(&cfg, 8);
        let prompts = some_prompts(&cfg, 8);

        let full = |cfg: &ModelConfig| {
            let mut s = Session::new(&params);
            let pass = forward(&mut s, cfg, &sm, &prompts, None).unwrap();
            extract_output(&s, cfg, &pass)
        };
        let a = full(&cfg);
        let b = full(&cfg);
        assert_eq!(a.fused_box.corners(), b.fused_box.corners());
        assert!(a.alpha > 0.0 && a.alpha < 1.0);
        assert!(a.global_mask.is_some());
        assert!(!a.attention_maps.is_empty());
        for m in &a.attention_maps {
            assert_eq!(m.shape(), (cfg.grid(), cfg.grid()));
        }

        // GLA off: one decoder route, its state drives the box; no mask
        let mut gla_off = cfg.clone();
        gla_off.use_gla = false;
        let o = full(&gla_off);
        assert_ne!(o.fused_box.corners(), o.local_box.corners());
        assert!(o.fused_box.area() > 0.0);
        assert!(o.global_mask.is_none());

        // KPS off (empty prompts) still yields a valid output
        let mut s = Session::new(&params);
        let empty = crate::encoder::KnowledgePrompts::empty(cfg.knowledge_dim);
        let pass = forward(&mut s, &cfg, &sm, &empty, None).unwrap();
        let o = extract_output(&s, &cfg, &pass);
        assert!(o.fused_box.area() > 0.0);
    }

    #[test]
    fn attention_rows_are_normalized_everywhere() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 9);
        let sm = sample(&cfg, 9);
        let prompts = some_prompts(&cfg, 9);
        let mut s = Session::new(&params);
        let pass = forward(&mut s, &cfg, &sm, &prompts, None).unwrap();
        for &probs in &pass.attention {
            let p = s.g.value(probs);
            for r in 0..p.rows() {
                let sum: f64 = p.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn in_graph_knowledge_propagation_matches_the_plain_encoder() {
        let cfg = ModelConfig::tiny();
        let params = init_params::<f64>(&cfg, 10);
        let sm = sample(&cfg, 10);
        let mut rng = derive_rng(10, "kg");
        let n = 5;
        let mut adj = Tensor::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.5 {
                    adj[(i, j)] = 1.0;
                    adj[(j, i)] = 1.0;
                }
            }
        }
        let h0 = Tensor::randn(n, cfg.knowledge_dim, 1.0, &mut rng);

        let weights = GcnWeights {
            layers: (0..cfg.gcn_depth)
                .map(|i| GcnLayer {
                    w: params.value(&format!("gcn.l{i}.w")).unwrap().clone(),
                    b: params.value(&format!("gcn.l{i}.b")).unwrap().clone(),
                })
                .collect(),
        };
        let propagated = gcn_forward(
            &NodeEmbeddings {
                matrix: h0.clone(),
                stage: Stage::Initial,
            },
            &adj,
            &weights,
        )
        .unwrap();
        let indices = vec![3usize, 1];
        let mut emb = Tensor::zeros(2, cfg.knowledge_dim);
        for (slot, &i) in indices.iter().enumerate() {
            emb.row_mut(slot).copy_from_slice(propagated.matrix.row(i));
        }
        let prompts = crate::encoder::KnowledgePrompts {
            embeddings: emb,
            source_indices: indices,
            scores: vec![0.7, 0.6],
        };

        let run = |knowledge: Option<&KnowledgeInputs<f64>>| {
            let mut s = Session::new(&params);
            let pass = forward(&mut s, &cfg, &sm, &prompts, knowledge).unwrap();
            read_box(&s, pass.fused_box).corners()
        };
        let detached = run(None);
        let kin = KnowledgeInputs {
            a_hat: normalized_adjacency(&adj),
            h0,
        };
        let in_graph = run(Some(&kin));
        assert_eq!(detached, in_graph);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut params = init_params::<f64>(&cfg, 11);
        let sm = sample(&cfg, 11);
        let prompts = some_prompts(&cfg, 11);
        let mut rng = derive_rng(11, "kg");
        let n = 4;
        let mut adj = Tensor::zeros(n, n);
        adj[(0, 1)] = 1.0;
        adj[(1, 0)] = 1.0;
        adj[(1, 2)] = 1.0;
        adj[(2, 1)] = 1.0;
        let kin = KnowledgeInputs {
            a_hat: normalized_adjacency(&adj),
            h0: Tensor::randn(n, cfg.knowledge_dim, 1.0, &mut rng),
        };
        let prompts = crate::encoder::KnowledgePrompts {
            source_indices: vec![2, 0],
            ..prompts
        };

        let run = |ps: &ParamSet<f64>, want_grads: bool| {
            let mut s = Session::new(ps);
            let pass = forward(&mut s, &cfg, &sm, &prompts, Some(&kin))?;
            let labels = s.input(Tensor::new(
                sm.tokens.len(),
                1,
                sm.phrase_labels
                    .iter()
                    .map(|&b| if b { 1.0 } else { 0.0 })
                    .collect(),
            )?);
            let txt = s.g.bce_with_logits_mean(pass.latent.phrase_logits, labels);
            let gold = crate::loss::box_input(&mut s.g, &sm.gold_box);
            let l1 = smooth_l1_var(&mut s.g, pass.fused_box, gold);
            let gv = giou_var(&mut s.g, pass.fused_box, gold);
            let one = s.input(Tensor::scalar(1.0));
            let gl = s.g.sub(one, gv);
            let partial = s.g.add(txt, l1);
            let total = s.g.add(partial, gl);
            let value = s.g.scalar_value(total);
            if !want_grads {
                return Ok((value, None));
            }
            let grads = s.grads(total);
            Ok((value, Some(grads)))
        };
        let settings = GradCheckSettings {
            max_coords_per_tensor: 2,
            ..GradCheckSettings::default()
        };
        let reports = check_gradients(&mut params, run, &settings).unwrap();
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.pass, "{r}");
        }
        // frozen priors must not be probed as trainable
        assert!(reports.iter().all(|r| !r.name.starts_with("prompt.")));
        let _ = GradMap::<f64>::new();
    }
}
