//! Figure rendering: input image, box overlay (gold / coarse / fused), the
//! global mask heat-map, and per-route attention heat-maps, all as PNGs.

use std::path::{Path, PathBuf};

use super::checkpoint::load_checkpoint;
use super::data::load_split;
use super::tokenizer::Tokenizer;
use super::train::{select_prompts, KnowledgeContext};
use crate::encoder::KnowledgePrompts;
use crate::error::{Error, Result};
use crate::loss::BBox;
use crate::model::{forward_decode, forward_encode, read_box, Session};
use crate::numerics::Real;

fn png_error(e: png::EncodingError) -> Error {
    Error::Data(format!("png encoding failed: {e}"))
}

fn write_png(path: &Path, width: usize, height: usize, rgb: bool, data: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if rgb {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_error)?;
    writer.write_image_data(data).map_err(png_error)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Normalized coordinate → pixel index, rounded half up.
fn to_px(v: f64, size: usize) -> usize {
    ((v * size as f64 + 0.5).floor() as i64).clamp(0, size as i64) as usize
}

fn draw_rect(rgb: &mut [u8], size: usize, b: &BBox<f64>, color: [u8; 3]) {
    let [x1, y1, x2, y2] = b.corners();
    let px1 = to_px(x1, size).min(size - 1);
    let py1 = to_px(y1, size).min(size - 1);
    let px2 = to_px(x2, size).saturating_sub(1).clamp(px1, size - 1);
    let py2 = to_px(y2, size).saturating_sub(1).clamp(py1, size - 1);
    let mut put = |x: usize, y: usize| {
        let at = (y * size + x) * 3;
        rgb[at..at + 3].copy_from_slice(&color);
    };
    for x in px1..=px2 {
        put(x, py1);
        put(x, py2);
    }
    for y in py1..=py2 {
        put(px1, y);
        put(px2, y);
    }
}

/// Min-max normalize a map to [0,1]; constant maps go to zero.
fn normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn upscale_nearest(values: &[f64], side: usize, factor: usize) -> Vec<u8> {
    let out_side = side * factor;
    let mut out = vec![0u8; out_side * out_side];
    for y in 0..out_side {
        for x in 0..out_side {
            out[y * out_side + x] = to_byte(values[(y / factor) * side + x / factor]);
        }
    }
    out
}

/// Render one sample from a split through a checkpoint. Returns the files
/// written.
pub fn render_sample<T: Real>(
    ckpt: &Path,
    data_dir: &Path,
    split: &str,
    index: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (params, manifest) = load_checkpoint::<T>(ckpt)?;
    let cfg = manifest.config;
    let model = cfg.effective_model();
    let tokenizer = Tokenizer::from_words(manifest.vocab);
    let samples = load_split::<T>(data_dir, split, &tokenizer, &model)?;
    let sample = samples.get(index).ok_or_else(|| {
        Error::Data(format!(
            "split `{split}` has {} samples; index {index} is out of range",
            samples.len()
        ))
    })?;
    let kctx = if model.use_kps {
        KnowledgeContext::build(data_dir, &model, cfg.seed)?
    } else {
        None
    };

    let mut s = Session::new(&params);
    let (z, latent) = forward_encode(&mut s, &model, &sample.core)?;
    let prompts = match &kctx {
        Some(k) => {
            let propagated = k.propagate(&params, model.gcn_depth)?;
            select_prompts(&s, &model, &latent, &propagated)
        }
        None => KnowledgePrompts::empty(model.knowledge_dim),
    };
    let pass = forward_decode(&mut s, &model, z, latent, &prompts, None)?;

    std::fs::create_dir_all(out_dir)?;
    let size = model.image_size;
    let mut written = Vec::new();

    // input
    let gray: Vec<u8> = sample.core.image.as_slice().iter().map(|v| to_byte(v.as_f64())).collect();
    let input_path = out_dir.join("input.png");
    write_png(&input_path, size, size, false, &gray)?;
    written.push(input_path);

    // overlay: gold green, coarse blue, fused red
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for &g in &gray {
        rgb.extend_from_slice(&[g, g, g]);
    }
    let as_f64_box = |b: &BBox<T>| {
        let [x1, y1, x2, y2] = b.corners();
        BBox::new(x1.as_f64(), y1.as_f64(), x2.as_f64(), y2.as_f64()).expect("valid box")
    };
    draw_rect(&mut rgb, size, &as_f64_box(&sample.core.gold_box), [40, 220, 40]);
    draw_rect(&mut rgb, size, &as_f64_box(&read_box(&s, pass.local_box)), [80, 120, 255]);
    draw_rect(&mut rgb, size, &as_f64_box(&read_box(&s, pass.fused_box)), [255, 70, 70]);
    let overlay_path = out_dir.join("overlay.png");
    write_png(&overlay_path, size, size, true, &rgb)?;
    written.push(overlay_path);

    // global mask heat-map (values are already in [0,1])
    if let Some(mask) = pass.mask {
        let values = s.g.value(mask);
        let side = model.mask_size;
        let bytes: Vec<u8> = values.as_slice().iter().map(|v| to_byte(v.as_f64())).collect();
        let mask_path = out_dir.join("mask.png");
        write_png(&mask_path, side, side, false, &bytes)?;
        written.push(mask_path);
    }

    // attention heat-maps: one per decoder token, per block, per route,
    // min-max normalized and upscaled to the image size
    let grid = model.grid();
    for (probs, &(route, block)) in pass.attention.iter().zip(&pass.attention_meta) {
        let matrix = s.g.value(*probs);
        for tok in 0..matrix.rows() {
            let row: Vec<f64> = matrix.row(tok).iter().map(|v| v.as_f64()).collect();
            let normed = normalize(&row);
            let bytes = upscale_nearest(&normed, grid, model.patch_size);
            let path = out_dir.join(format!("attn_{route}_b{block}_t{tok:02}.png"));
            write_png(&path, size, size, false, &bytes)?;
            written.push(path);
        }
    }

    log::info!(
        "rendered {} ({split}[{index}]) to {} files under {}",
        sample.core.id,
        written.len(),
        out_dir.display()
    );
    Ok(written)
}
