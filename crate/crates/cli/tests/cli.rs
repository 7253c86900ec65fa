use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use instassemble::diffusion::{model_from_checkpoint, sample, SampleConfig};
use instassemble::params::{content_hash, Checkpoint};
use instassemble::raster::RgbImage;
use instassemble::synth_data::read_annotation;
use instassemble::vocab::Vocab;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_instassemble"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn hash(p: &Path) -> String {
    content_hash(&std::fs::read(p).unwrap())
}

/// A model small enough for debug-speed end-to-end runs.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "model": {
            "image_size": 16, "patch_size": 4, "width": 8, "blocks": 1, "heads": 2,
            "mlp_ratio": 2, "dense_k": 2, "fourier_freqs": 2, "visual_patch": 4,
            "lora_rank": 2, "lora_alpha": 2.0, "max_instances": 8
        },
        "train": { "batch_size": 2 },
        "sample": { "steps": 3 },
        "data": { "count": 6 }
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    base: PathBuf,
    layout: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = write_tiny_config(&root);
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--seed", "3", "--out", s(&data)]);
    let base = root.join("base");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--steps", "3", "--out", s(&base)]);
    let layout = root.join("layout");
    ok(&[
        "train", "--config", s(&config), "--phase", "layout", "--data", s(&data),
        "--base-checkpoint", s(&base.join("final.ckpt")), "--steps", "2", "--out", s(&layout),
    ]);
    Fixture { _dir: dir, root, config, data, base, layout }
}

fn dir_hashes(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for sub in ["images", "annotations"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        out.extend(names.into_iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), hash(&p))));
    }
    out
}

#[test]
fn gen_data_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-data", "--config", s(&config), "--seed", "9", "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&config), "--seed", "9", "--out", s(&b)]);
    ok(&["gen-data", "--config", s(&config), "--seed", "10", "--out", s(&c)]);
    assert_eq!(dir_hashes(&a).len(), 12);
    assert_eq!(dir_hashes(&a), dir_hashes(&b));
    assert_ne!(dir_hashes(&a), dir_hashes(&c));
}

#[test]
fn presets_bound_the_instance_count() {
    let dir = tempfile::tempdir().unwrap();
    for (preset, max) in [("sparse", 4), ("dense", 16)] {
        let out = dir.path().join(preset);
        ok(&["gen-data", "--preset", preset, "--count", "20", "--out", s(&out)]);
        let mut most = 0;
        for e in std::fs::read_dir(out.join("annotations")).unwrap() {
            let n = read_annotation(&e.unwrap().path()).unwrap().instance_info.len();
            assert!((1..=max).contains(&n), "{preset}: {n} instances");
            most = most.max(n);
        }
        assert!(preset == "sparse" || most > 4, "dense preset never exceeded 4 instances");
    }
}

#[test]
fn unknown_preset_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--preset", "crowded", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn layout_phase_requires_base_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let out = run(&["train", "--config", s(&config), "--phase", "layout", "--data", s(&data), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("base checkpoint"));
}

#[test]
fn end_to_end_pipeline() {
    let f = fixture();
    let root = &f.root;
    let ann = f.data.join("annotations").join("00000.json");
    let layout_ck = f.layout.join("final.ckpt");

    // Every run directory is self-describing and its config reloads unchanged.
    for dir in [&f.data, &f.base, &f.layout] {
        let cfg: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
        assert!(cfg.get("model").is_some());
        assert!(dir.join("hashes.json").exists());
    }
    let hashes: Value = serde_json::from_str(&std::fs::read_to_string(f.layout.join("hashes.json")).unwrap()).unwrap();
    assert_eq!(hashes["final.ckpt"], hash(&layout_ck));
    assert_eq!(hashes["base_checkpoint"], hash(&f.base.join("final.ckpt")));

    // Re-running with the written config reproduces the checkpoint bit for bit.
    let rerun = root.join("rerun");
    ok(&["train", "--config", s(&f.layout.join("config.json")), "--out", s(&rerun)]);
    assert_eq!(hash(&rerun.join("final.ckpt")), hash(&layout_ck));

    // Seeded sampling is deterministic.
    let (s1, s2) = (root.join("s1"), root.join("s2"));
    for out in [&s1, &s2] {
        ok(&["sample", "--config", s(&f.config), "--checkpoint", s(&layout_ck), "--annotation", s(&ann), "--seed", "4", "--out", s(out)]);
    }
    assert_eq!(hash(&s1.join("sample.png")), hash(&s2.join("sample.png")));

    // Layout ratio 0 is the unconditioned sample.
    let s0 = root.join("s0");
    ok(&[
        "sample", "--config", s(&f.config), "--checkpoint", s(&layout_ck), "--annotation", s(&ann),
        "--seed", "4", "--layout-ratio", "0", "--out", s(&s0),
    ]);
    let model = model_from_checkpoint(&Checkpoint::load(&layout_ck).unwrap()).unwrap();
    let prompt = Vocab::encode_prompt(&read_annotation(&ann).unwrap().global_caption);
    let cfg = SampleConfig { steps: 3, layout_ratio: 0.3, seed: 4 };
    let uncond = sample(&model, &prompt, None, &cfg).unwrap();
    let cli = RgbImage::load_png(&s0.join("sample.png")).unwrap();
    let expected = RgbImage::from_rgb8(&uncond.to_rgb8());
    assert_eq!(cli, expected);

    // Eval writes a JSON report and prints a table.
    let ev = root.join("ev");
    let out = ok(&["eval", "--config", s(&f.config), "--checkpoint", s(&layout_ck), "--data", s(&f.data), "--steps", "2", "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 6);
}

#[test]
fn resumed_run_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let full = dir.path().join("full");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--steps", "4", "--checkpoint-every", "2", "--out", s(&full)]);
    let resumed = dir.path().join("resumed");
    ok(&[
        "train", "--data", s(&data), "--resume", s(&full.join("step_0000002.ckpt")), "--steps", "4", "--out", s(&resumed),
    ]);
    assert_eq!(hash(&resumed.join("final.ckpt")), hash(&full.join("final.ckpt")));
    let log = std::fs::read_to_string(resumed.join("loss.csv")).unwrap();
    let steps: Vec<&str> = log.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["3", "4"]);
}

#[test]
fn sample_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.json");
    std::fs::write(&ann, "{}").unwrap();
    let out = run(&["sample", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--annotation", s(&ann), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ground_truth_eval_is_near_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--count", "20", "--seed", "1", "--out", s(&data)]);
    let ev = dir.path().join("ev");
    ok(&["eval", "--ground-truth", "--data", s(&data), "--out", s(&ev)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["miou"].as_f64().unwrap() >= 0.95);
    assert!(report["color_acc"].as_f64().unwrap() >= 0.98);
    assert!(report["shape_acc"].as_f64().unwrap() >= 0.98);
}

#[test]
fn eval_on_empty_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("annotations")).unwrap();
    let out = run(&["eval", "--ground-truth", "--data", s(dir.path()), "--out", s(&dir.path().join("ev"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn ablate_writes_five_rows() {
    let f = fixture();
    let out_dir = f.root.join("ablate");
    let out = ok(&[
        "ablate", "--config", s(&f.config), "--data", s(&f.data), "--base-checkpoint", s(&f.base.join("final.ckpt")),
        "--steps", "1", "--out", s(&out_dir),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("densesample"));
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let flags: Vec<[bool; 4]> = rows
        .iter()
        .map(|r| ["assemble", "cascaded", "lora", "densesample"].map(|k| r[k].as_bool().unwrap()))
        .collect();
    assert_eq!(
        flags,
        [
            [false, false, false, false],
            [true, false, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, true, true]
        ]
    );

    // The all-off row is plain base sampling of the base checkpoint.
    let ev = f.root.join("base_eval");
    ok(&[
        "eval", "--config", s(&f.config), "--checkpoint", s(&f.base.join("final.ckpt")), "--data", s(&f.data),
        "--unconditioned", "--out", s(&ev),
    ]);
    let base: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["report"], base);
}
