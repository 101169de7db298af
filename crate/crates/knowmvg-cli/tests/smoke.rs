//! End-to-end smoke run of the binary: tiny config, every data-facing verb.

use std::path::Path;
use std::process::Command;

fn knowmvg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_knowmvg"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout:\n{stdout}\nstderr:\n{stderr}",
        cmd
    );
    stdout + &stderr
}

#[test]
fn full_pipeline_at_toy_scale() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    let data = dir.path().join("data");
    let out = dir.path().join("out");

    // dump-config output must itself be a loadable config
    let dumped = run(knowmvg().args(["dump-config"]));
    let toml_start = dumped.find("seed").expect("config body");
    let mut doc = dumped[toml_start..].to_string();
    doc = doc.replace("image_size = 128", "image_size = 32");
    doc = doc.replace("channels = 64", "channels = 16");
    doc = doc.replace("latent_dim = 64", "latent_dim = 16");
    doc = doc.replace("knowledge_dim = 64", "knowledge_dim = 16");
    doc = doc.replace("mask_size = 64", "mask_size = 16");
    doc = doc.replace("fourier_features = 128", "fourier_features = 16");
    doc = doc.replace("n_samples = 2000", "n_samples = 60");
    doc = doc.replace("max_steps = 2000", "max_steps = 6");
    doc = doc.replace("eval_every = 50", "eval_every = 3");
    doc = doc.replace("phase0_steps = 150", "phase0_steps = 4");
    doc = doc.replace("mask_iou_gate = 0.5", "mask_iou_gate = 0.0");
    doc = doc.replace("early_stop_miou = 0.65", "early_stop_miou = 2.0");
    std::fs::write(&config, &doc).unwrap();
    let cfg = ["--config", config.to_str().unwrap()];
    let dd = ["--data-dir", data.to_str().unwrap()];

    run(knowmvg().args(["gen-data"]).args(cfg).args(dd));
    for split in ["train", "val", "test"] {
        assert!(data.join(format!("{split}.jsonl")).exists(), "{split} split written");
    }

    let train_out = out.join("train");
    run(knowmvg()
        .args(["train"])
        .args(cfg)
        .args(dd)
        .args(["--out-dir", train_out.to_str().unwrap()]));
    let best = train_out.join("best.ckpt");
    assert!(best.exists() && train_out.join("last.ckpt").exists());
    assert!(train_out.join("metrics.jsonl").exists());

    let eval_out = out.join("eval");
    let log = run(knowmvg()
        .args(["eval", "--ckpt", best.to_str().unwrap(), "--split", "val", "--csv"])
        .args(cfg)
        .args(dd)
        .args(["--out-dir", eval_out.to_str().unwrap()]));
    assert!(log.contains("mIoU"), "eval prints the headline metric: {log}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("report.json")).unwrap())
            .unwrap();
    assert!(report["miou"].is_number());
    let csv = std::fs::read_to_string(eval_out.join("per_sample.csv")).unwrap();
    assert!(csv.lines().count() > 1, "per-sample rows present");

    let render_out = out.join("render");
    run(knowmvg()
        .args(["render", "--ckpt", best.to_str().unwrap(), "--index", "2"])
        .args(cfg)
        .args(dd)
        .args(["--out-dir", render_out.to_str().unwrap()]));
    assert!(std::fs::read_dir(&render_out).unwrap().count() > 0, "render wrote images");

    // KG verb against the bundled fixtures
    let kg_data = dir.path().join("kgdata");
    std::fs::create_dir_all(&kg_data).unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../knowmvg/fixtures/kg");
    for entry in std::fs::read_dir(&fixtures).unwrap() {
        let entry = entry.unwrap();
        let to = kg_data.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            std::fs::create_dir_all(&to).unwrap();
            for f in std::fs::read_dir(entry.path()).unwrap() {
                let f = f.unwrap();
                std::fs::copy(f.path(), to.join(f.file_name())).unwrap();
            }
        } else {
            std::fs::copy(entry.path(), &to).unwrap();
        }
    }
    let kg_out = out.join("kg");
    let log = run(knowmvg()
        .args(["build-kg"])
        .args(cfg)
        .args(["--data-dir", kg_data.to_str().unwrap()])
        .args(["--out-dir", kg_out.to_str().unwrap()]));
    assert!(kg_out.join("graph.json").exists(), "graph written: {log}");

    // grad check runs at its own built-in scale
    let log = run(knowmvg().args(["check-grads", "--seed", "3"]));
    assert!(log.contains("checked") && !log.contains("FAIL"), "check-grads clean: {log}");
}
