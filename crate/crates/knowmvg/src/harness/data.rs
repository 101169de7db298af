//! Synthetic grounding corpus: textured images with one lesion shape placed
//! in a named region of a 3×3 grid, reports templated as
//! "<finding> in the <region>", and knowledge fixtures tying each finding to
//! its home region. Same seed → bit-identical dataset.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pgm;
use super::tokenizer::{split_words, Tokenizer};
use crate::error::{Error, Result};
use crate::kg::{EntityProvider, FixtureClient, KnowledgeClient, LexiconProvider};
use crate::loss::BBox;
use crate::model::{GroundingSample, ModelConfig};
use crate::numerics::{derive_rng, Real, Tensor};

/// (finding, home-region index). The home region receives the lesion 80% of
/// the time so the knowledge fixtures carry real signal without making the
/// text redundant.
const FINDINGS: [(&str, usize); 6] = [
    ("pneumothorax", 0),
    ("opacity", 2),
    ("consolidation", 3),
    ("nodule", 4),
    ("atelectasis", 6),
    ("effusion", 8),
];

const HOME_PROB: f64 = 0.8;

fn region_name(region: usize) -> String {
    let row = ["upper", "middle", "lower"][region / 3];
    let col = ["left", "center", "right"][region % 3];
    if region == 4 {
        "center".to_string()
    } else {
        format!("{row} {col}")
    }
}

/// One line of a split file. `image` is a path relative to the dataset root.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataRecord {
    pub id: String,
    pub image: String,
    pub report: String,
    pub phrase_labels: Vec<u8>,
    #[serde(rename = "box")]
    pub gold_box: [f64; 4],
}

/// A loaded example: the model-facing sample plus its provenance.
#[derive(Clone, Debug)]
pub struct Sample<T: Real> {
    pub core: GroundingSample<T>,
    pub report: String,
    pub kg_entities: Vec<String>,
}

pub struct GenSummary {
    pub n: usize,
    pub split_sizes: [usize; 3],
    pub entities: Vec<String>,
}

enum Shape {
    Blob,
    Wedge { shift: f64 },
    Bar,
}

struct Drawn {
    image: Tensor<f64>,
    support: Tensor<f64>,
    gold_box: [f64; 4],
    mass_inside: f64,
}

fn draw(rng: &mut rand_chacha::ChaCha8Rng, size: usize, region: usize) -> Drawn {
    let s = size as f64;
    let u = s / 128.0; // geometry scale relative to the reference size
    let cell = s / 3.0;
    let (row, col) = (region / 3, region % 3);

    let kind = match rng.random_range(0..3) {
        0 => Shape::Blob,
        1 => Shape::Wedge {
            shift: rng.random_range(-0.4..0.4),
        },
        _ => Shape::Bar,
    };
    let (a, b) = match kind {
        Shape::Blob => (
            rng.random_range(10.0..14.0) * u,
            rng.random_range(10.0..14.0) * u,
        ),
        Shape::Wedge { .. } => (
            rng.random_range(11.0..15.0) * u,
            rng.random_range(11.0..15.0) * u,
        ),
        Shape::Bar => {
            let long = rng.random_range(12.0..16.0) * u;
            let short = rng.random_range(4.5..7.0) * u;
            if rng.random::<f64>() < 0.5 {
                (long, short)
            } else {
                (short, long)
            }
        }
    };
    // Keep the whole shape strictly inside its cell so region words stay
    // truthful.
    let mx = a + 2.0 * u;
    let my = b + 2.0 * u;
    let cx = rng.random_range(cell * col as f64 + mx..cell * (col + 1) as f64 - mx);
    let cy = rng.random_range(cell * row as f64 + my..cell * (row + 1) as f64 - my);

    let (fx, fy) = (rng.random_range(1..4) as f64, rng.random_range(1..4) as f64);
    let (px, py) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let lesion_base = 0.70 + rng.random_range(0.0..0.15);

    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match kind {
            Shape::Blob => (dx / a).powi(2) + (dy / b).powi(2) <= 1.0,
            Shape::Bar => dx.abs() <= a && dy.abs() <= b,
            Shape::Wedge { shift } => {
                // triangle: two base corners below, apex above
                let pts = [(cx - a, cy + b), (cx + a, cy + b), (cx + shift * a, cy - b)];
                let sign = |(x1, y1): (f64, f64), (x2, y2): (f64, f64)| {
                    (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
                };
                let d0 = sign(pts[0], pts[1]);
                let d1 = sign(pts[1], pts[2]);
                let d2 = sign(pts[2], pts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    };

    let mut image = Tensor::zeros(size, size);
    let mut support = Tensor::zeros(size, size);
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..size {
        for x in 0..size {
            let noise: f64 = rng.random_range(0.0..0.05);
            let wave = 0.06
                * (std::f64::consts::TAU * fx * x as f64 / s + px).sin()
                * (std::f64::consts::TAU * fy * y as f64 / s + py).sin();
            let mut v = 0.12 + wave + noise;
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                v = lesion_base + rng.random_range(0.0..0.08);
                support.row_mut(y)[x] = 1.0;
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
            image.row_mut(y)[x] = v.clamp(0.0, 1.0);
        }
    }
    assert!(x_min <= x_max, "lesion support is empty");
    let gold_box = [
        x_min as f64 / s,
        y_min as f64 / s,
        (x_max + 1) as f64 / s,
        (y_max + 1) as f64 / s,
    ];

    // Fraction of lesion pixels inside the gold box, measured rather than
    // assumed: the box is the support's tight hull so anything below 1.0
    // would mean the rasterizer and the box disagree.
    let mut total = 0.0;
    let mut inside_box = 0.0;
    for y in 0..size {
        for x in 0..size {
            if support.row(y)[x] > 0.0 {
                total += 1.0;
                if x >= x_min && x <= x_max && y >= y_min && y <= y_max {
                    inside_box += 1.0;
                }
            }
        }
    }
    let mass_inside = inside_box / total;
    assert!(
        mass_inside >= 0.95,
        "gold box captures only {mass_inside:.3} of the lesion mass"
    );

    Drawn {
        image,
        support,
        gold_box,
        mass_inside,
    }
}

fn gen_one(seed: u64, idx: usize, size: usize) -> (DataRecord, Drawn, String) {
    let mut rng = derive_rng(seed, &format!("sample-{idx:05}"));
    let (finding, home) = FINDINGS[rng.random_range(0..FINDINGS.len())];
    let region = if rng.random::<f64>() < HOME_PROB {
        home
    } else {
        rng.random_range(0..9)
    };
    let drawn = draw(&mut rng, size, region);
    let report = format!("{finding} in the {}", region_name(region));
    let words = split_words(&report);
    let phrase_labels: Vec<u8> = words
        .iter()
        .map(|w| u8::from(w == finding))
        .collect();
    let id = format!("s{idx:05}");
    let record = DataRecord {
        id: id.clone(),
        image: format!("images/{id}.pgm"),
        report,
        phrase_labels,
        gold_box: drawn.gold_box,
    };
    (record, drawn, finding.to_string())
}

fn write_jsonl(path: &Path, records: &[DataRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Generate the dataset under `out`: images, full-resolution lesion masks,
/// 7:1:2 split files, and the knowledge-side fixtures (corpus, lexicon,
/// per-entity localization files).
pub fn generate_dataset(cfg: &super::RunConfig, out: &Path) -> Result<GenSummary> {
    let n = cfg.data.n_samples;
    let size = cfg.model.image_size;
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    std::fs::create_dir_all(out.join("knowledge"))?;

    let mut records = Vec::with_capacity(n);
    let mut min_mass: f64 = 1.0;
    for idx in 0..n {
        let (record, drawn, _finding) = gen_one(cfg.seed, idx, size);
        pgm::write_pgm(&out.join(&record.image), &drawn.image)?;
        pgm::write_pgm(&out.join(format!("masks/{}.pgm", record.id)), &drawn.support)?;
        min_mass = min_mass.min(drawn.mass_inside);
        records.push(record);
    }
    log::info!("generated {n} samples; worst in-box lesion mass {min_mass:.4}");

    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let splits = [
        ("train", &records[..n_train]),
        ("val", &records[n_train..n_train + n_val]),
        ("test", &records[n_train + n_val..]),
    ];
    for (name, slice) in splits {
        write_jsonl(&out.join(format!("{name}.jsonl")), slice)?;
    }

    // Knowledge fixtures. Every finding gets its home region plus a shared
    // description so localization nodes are reused across entities.
    let entities: Vec<String> = FINDINGS.iter().map(|(f, _)| f.to_string()).collect();
    std::fs::write(out.join("lexicon.txt"), entities.join("\n") + "\n")?;
    for (finding, home) in FINDINGS {
        let descriptions =
            vec![format!("{} zone", region_name(home)), "chest cavity".to_string()];
        let file = out.join(format!("knowledge/{finding}.json"));
        std::fs::write(file, serde_json::to_string_pretty(&descriptions)?)?;
    }

    let mut corpus = std::io::BufWriter::new(std::fs::File::create(out.join("corpus.jsonl"))?);
    for r in &records[..n_train] {
        let row = serde_json::json!({
            "record_id": r.id,
            "question_text": format!("where is the {}", first_phrase_word(r)),
            "answer_text": r.report,
        });
        serde_json::to_writer(&mut corpus, &row)?;
        corpus.write_all(b"\n")?;
    }
    corpus.flush()?;

    // Every entity mentioned in any report must resolve in the fixtures.
    let provider = LexiconProvider::from_file(&out.join("lexicon.txt"))?;
    let client = FixtureClient::new(out.join("knowledge"));
    for r in &records {
        let found = provider.extract(&r.report)?;
        if found.is_empty() {
            return Err(Error::Data(format!("report for {} mentions no entity", r.id)));
        }
        for entity in found.iter() {
            if client.lookup(entity)?.descriptions.is_empty() {
                return Err(Error::Data(format!(
                    "entity `{entity}` in {} has no knowledge fixture",
                    r.id
                )));
            }
        }
    }

    Ok(GenSummary {
        n,
        split_sizes: [n_train, n_val, n - n_train - n_val],
        entities,
    })
}

fn first_phrase_word(r: &DataRecord) -> String {
    let words = split_words(&r.report);
    words
        .iter()
        .zip(&r.phrase_labels)
        .find(|(_, &l)| l == 1)
        .map(|(w, _)| w.clone())
        .unwrap_or_else(|| words[0].clone())
}

pub fn load_records(dir: &Path, split: &str) -> Result<Vec<DataRecord>> {
    let path = dir.join(format!("{split}.jsonl"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read split {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DataRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed record: {e}", path.display(), i + 1))
        })?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("split {} is empty", path.display())));
    }
    Ok(records)
}

/// Bin a full-resolution binary mask down to `side` × `side` by block max.
fn fold_mask<T: Real>(full: &Tensor<T>, side: usize) -> Tensor<T> {
    let (h, w) = full.shape();
    let mut out = Tensor::zeros(side, side);
    for y in 0..h {
        for x in 0..w {
            if full.row(y)[x].as_f64() >= 0.5 {
                out.row_mut(y * side / h)[x * side / w] = T::one();
            }
        }
    }
    out
}

/// Materialize one split: read images (validating their size against the
/// model config), tokenize reports, fold masks to the mask grid, and extract
/// lexicon entities for provenance.
pub fn load_split<T: Real>(
    dir: &Path,
    split: &str,
    tok: &Tokenizer,
    model: &ModelConfig,
) -> Result<Vec<Sample<T>>> {
    let records = load_records(dir, split)?;
    let lexicon_path = dir.join("lexicon.txt");
    let provider = lexicon_path
        .exists()
        .then(|| LexiconProvider::from_file(&lexicon_path))
        .transpose()?;

    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let image: Tensor<T> = pgm::read_pgm(&dir.join(&r.image))?;
        if image.shape() != (model.image_size, model.image_size) {
            return Err(Error::Data(format!(
                "image {} is {}x{} but the model expects {}x{}",
                r.image,
                image.rows(),
                image.cols(),
                model.image_size,
                model.image_size
            )));
        }
        let words = split_words(&r.report);
        if words.len() != r.phrase_labels.len() {
            return Err(Error::Data(format!(
                "{}: {} phrase labels for {} report tokens",
                r.id,
                r.phrase_labels.len(),
                words.len()
            )));
        }
        let tokens = tok.encode(&r.report, model.max_report_tokens)?;
        let phrase_labels: Vec<bool> = r.phrase_labels[..tokens.len()]
            .iter()
            .map(|&l| l != 0)
            .collect();
        let mask_path = dir.join(format!("masks/{}.pgm", r.id));
        let gold_mask = if mask_path.exists() {
            let full: Tensor<T> = pgm::read_pgm(&mask_path)?;
            Some(fold_mask(&full, model.mask_size))
        } else {
            None
        };
        let kg_entities = match &provider {
            Some(p) => p.extract(&r.report)?.iter().map(str::to_string).collect(),
            None => Vec::new(),
        };
        samples.push(Sample {
            core: GroundingSample {
                id: r.id,
                image,
                tokens,
                phrase_labels,
                gold_box: BBox::from_corner_slice(&r.gold_box.map(T::cast))?,
                gold_mask,
            },
            report: r.report,
            kg_entities,
        });
    }
    Ok(samples)
}

/// Dataset root sanity check used by commands that need the fixtures.
pub fn dataset_paths(dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let corpus = dir.join("corpus.jsonl");
    let lexicon = dir.join("lexicon.txt");
    let knowledge = dir.join("knowledge");
    for p in [&corpus, &lexicon, &knowledge] {
        if !p.exists() {
            return Err(Error::Data(format!(
                "dataset at {} is missing {}; run gen-data first",
                dir.display(),
                p.display()
            )));
        }
    }
    Ok((corpus, lexicon, knowledge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::RunConfig;
    use tempfile::tempdir;

    fn small_cfg(n: usize, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.data.n_samples = n;
        cfg
    }

    #[test]
    fn same_seed_is_bit_identical_and_seeds_differ() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let d3 = tempdir().unwrap();
        generate_dataset(&small_cfg(12, 5), d1.path()).unwrap();
        generate_dataset(&small_cfg(12, 5), d2.path()).unwrap();
        generate_dataset(&small_cfg(12, 6), d3.path()).unwrap();
        for name in ["train.jsonl", "val.jsonl", "test.jsonl", "corpus.jsonl"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name} differs across identical seeds"
            );
        }
        let img = "images/s00003.pgm";
        assert_eq!(
            std::fs::read(d1.path().join(img)).unwrap(),
            std::fs::read(d2.path().join(img)).unwrap()
        );
        assert_ne!(
            std::fs::read(d1.path().join("train.jsonl")).unwrap(),
            std::fs::read(d3.path().join("train.jsonl")).unwrap()
        );
    }

    #[test]
    fn boxes_are_tight_and_region_words_hold() {
        // The gold box must be the tight hull of bright pixels, and the box
        // centre must land in the cell named by the report.
        let dir = tempdir().unwrap();
        generate_dataset(&small_cfg(30, 11), dir.path()).unwrap();
        let records = load_records(dir.path(), "train").unwrap();
        for r in &records {
            let [x1, y1, x2, y2] = r.gold_box;
            assert!(0.0 <= x1 && x1 < x2 && x2 <= 1.0);
            assert!(0.0 <= y1 && y1 < y2 && y2 <= 1.0);
            let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
            let words = split_words(&r.report);
            // template: <finding> in the <region words...>
            assert_eq!(&words[1..3], ["in", "the"]);
            let region = words[3..].join(" ");
            let col = match region.as_str() {
                "center" => 1,
                _ if region.ends_with("left") => 0,
                _ if region.ends_with("right") => 2,
                _ => 1,
            };
            let row = match region.split(' ').next().unwrap() {
                "upper" => 0,
                "lower" => 2,
                _ => 1,
            };
            assert_eq!((cx * 3.0).floor() as usize, col, "{}: {region}", r.id);
            assert_eq!((cy * 3.0).floor() as usize, row, "{}: {region}", r.id);

            // tightness: support pixels exist on every box edge
            let mask: Tensor<f64> =
                pgm::read_pgm(&dir.path().join(format!("masks/{}.pgm", r.id))).unwrap();
            let s = mask.rows();
            let (px1, py1) = ((x1 * s as f64).round() as usize, (y1 * s as f64).round() as usize);
            let (px2, py2) = (
                (x2 * s as f64).round() as usize - 1,
                (y2 * s as f64).round() as usize - 1,
            );
            let col_has = |x: usize| (py1..=py2).any(|y| mask.row(y)[x] > 0.5);
            let row_has = |y: usize| (px1..=px2).any(|x| mask.row(y)[x] > 0.5);
            assert!(col_has(px1) && col_has(px2) && row_has(py1) && row_has(py2));
            // nothing outside the box
            for y in 0..s {
                for x in 0..s {
                    if mask.row(y)[x] > 0.5 {
                        assert!(x >= px1 && x <= px2 && y >= py1 && y <= py2);
                    }
                }
            }
        }
    }

    #[test]
    fn loader_round_trips_samples() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg(20, 3);
        let summary = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(summary.split_sizes, [14, 2, 4]);

        let records = load_records(dir.path(), "train").unwrap();
        let tok = Tokenizer::from_reports(records.iter().map(|r| r.report.as_str()));
        let samples: Vec<Sample<f64>> =
            load_split(dir.path(), "train", &tok, &cfg.model).unwrap();
        assert_eq!(samples.len(), 14);
        for s in &samples {
            assert_eq!(s.core.tokens.len(), s.core.phrase_labels.len());
            assert!(s.core.phrase_labels.iter().filter(|&&b| b).count() == 1);
            let mask = s.core.gold_mask.as_ref().expect("mask present");
            assert_eq!(mask.shape(), (cfg.model.mask_size, cfg.model.mask_size));
            assert!(mask.as_slice().iter().any(|&v| v == 1.0));
            assert_eq!(s.kg_entities.len(), 1, "{}: {:?}", s.core.id, s.kg_entities);
            assert!(s.report.contains(&s.kg_entities[0]));
            let img = &s.core.image;
            assert!(img.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn loader_rejects_mismatched_image_size() {
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg(10, 1);
        cfg.model.image_size = 64;
        cfg.model.mask_size = 32;
        generate_dataset(&cfg, dir.path()).unwrap();
        let records = load_records(dir.path(), "train").unwrap();
        let tok = Tokenizer::from_reports(records.iter().map(|r| r.report.as_str()));
        let err = load_split::<f64>(dir.path(), "train", &tok, &ModelConfig::default());
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("64x64"), "{msg}");
        assert!(msg.contains("128"), "{msg}");
    }

    #[test]
    fn masks_fold_by_block_max() {
        let mut full = Tensor::<f64>::zeros(8, 8);
        full.row_mut(3)[5] = 1.0;
        let folded = fold_mask(&full, 4);
        assert_eq!(folded.row(1)[2], 1.0);
        assert_eq!(folded.as_slice().iter().sum::<f64>(), 1.0);
    }
}
