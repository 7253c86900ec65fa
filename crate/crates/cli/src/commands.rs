use std::collections::BTreeMap;
use std::path::Path;

use instassemble::diffusion::{self, Trainer};
use instassemble::eval::{evaluate_ground_truth, evaluate_model, LgsReport};
use instassemble::params::{content_hash, Checkpoint};
use instassemble::synth_data::{self, load_dataset, read_annotation, DatasetItem, SceneConfig};
use instassemble::vocab::Vocab;
use instassemble::{Error, ModelConfig, Phase, Result, Toggles};
use serde::Serialize;

use crate::config::{require, RunConfig};

/// Artifact name to git-style content hash, written as `hashes.json`.
type Hashes = BTreeMap<String, String>;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&bytes))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Makes `out` self-describing: the effective config plus content hashes.
fn write_run_record(out: &Path, cfg: &RunConfig, hashes: &Hashes) -> Result<()> {
    cfg.save(&out.join("config.json"))?;
    write_json(&out.join("hashes.json"), hashes)
}

fn load_checkpoint(path: &Path, hashes: &mut Hashes, key: &str) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    hashes.insert(key.to_string(), content_hash(&bytes));
    Checkpoint::from_bytes(&bytes)
}

fn load_items(dir: &Path) -> Result<Vec<DatasetItem>> {
    let items = load_dataset(dir)?;
    if items.is_empty() {
        return Err(Error::Config(format!("dataset {} has no annotations", dir.display())));
    }
    Ok(items)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let scene = SceneConfig::preset(&cfg.data.preset, cfg.model.image_size)?;
    create_dir(out)?;
    synth_data::write_dataset(out, cfg.data.count, cfg.seed, &scene)?;
    log::info!("wrote {} {} scenes to {}", cfg.data.count, cfg.data.preset, out.display());
    write_run_record(out, cfg, &Hashes::new())
}

/// The layout model must share the base checkpoint's backbone shape.
fn check_backbone(cfg: &ModelConfig, base: &ModelConfig) -> Result<()> {
    let fields = [
        ("image_size", cfg.image_size, base.image_size),
        ("patch_size", cfg.patch_size, base.patch_size),
        ("width", cfg.width, base.width),
        ("blocks", cfg.blocks, base.blocks),
        ("heads", cfg.heads, base.heads),
        ("mlp_ratio", cfg.mlp_ratio, base.mlp_ratio),
    ];
    for (name, ours, theirs) in fields {
        if ours != theirs {
            return Err(Error::Config(format!(
                "model.{name} is {ours} but the base checkpoint was trained with {theirs}"
            )));
        }
    }
    Ok(())
}

fn examples(items: &[DatasetItem], size: usize) -> Result<Vec<diffusion::Example>> {
    items.iter().map(|i| i.to_example(size)).collect()
}

fn build_trainer(cfg: &mut RunConfig, hashes: &mut Hashes) -> Result<Trainer> {
    let data_dir = require(&cfg.paths.data, "training data (--data)")?.to_path_buf();
    if let Some(resume) = cfg.paths.resume.clone() {
        require(&cfg.paths.resume, "resume checkpoint (--resume)")?;
        let ck = load_checkpoint(&resume, hashes, "resume")?;
        let model = diffusion::checkpoint_model_config(&ck)?;
        let items = load_items(&data_dir)?;
        let mut trainer = Trainer::resume(&ck, examples(&items, model.image_size)?)?;
        trainer.config.steps = cfg.train.steps;
        // The checkpoint decides the architecture and optimizer settings.
        cfg.model = model;
        cfg.train.phase = trainer.phase;
        cfg.train.batch_size = trainer.config.batch_size;
        cfg.train.lr = trainer.config.lr;
        log::info!("resuming {} at step {}", resume.display(), trainer.step);
        return Ok(trainer);
    }
    let base = match cfg.train.phase {
        Phase::Base => None,
        Phase::Layout => {
            let path = require(&cfg.paths.base_checkpoint, "base checkpoint (--base-checkpoint)")?.to_path_buf();
            let ck = load_checkpoint(&path, hashes, "base_checkpoint")?;
            check_backbone(&cfg.model, &diffusion::checkpoint_model_config(&ck)?)?;
            Some(ck)
        }
    };
    let model = diffusion::prepare_model(cfg.model.clone(), cfg.train.phase, base.as_ref(), cfg.seed)?;
    let items = load_items(&data_dir)?;
    Trainer::new(model, cfg.train.phase, cfg.train_config(), examples(&items, cfg.model.image_size)?)
}

fn run_trainer(trainer: &mut Trainer, out: &Path) -> Result<()> {
    let total = trainer.config.steps;
    let every = (total / 20).max(1);
    trainer.run(Some(out), |step, loss| {
        if step % every == 0 || step == total {
            log::info!("step {step}/{total} loss {loss:.5}");
        }
    })?;
    Ok(())
}

pub fn train(cfg: &mut RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let mut hashes = Hashes::new();
    let mut trainer = build_trainer(cfg, &mut hashes)?;
    create_dir(out)?;
    run_trainer(&mut trainer, out)?;
    hashes.insert("final.ckpt".into(), hash_file(&out.join("final.ckpt"))?);
    write_run_record(out, cfg, &hashes)
}

/// Loads a trained model. The checkpoint fixes the architecture; a `--no-*`
/// flag is only accepted for `assemble`, which switches to joint attention
/// without changing the parameter set.
fn load_model(cfg: &mut RunConfig, hashes: &mut Hashes) -> Result<instassemble::Model<f32>> {
    let path = require(&cfg.paths.checkpoint, "checkpoint (--checkpoint)")?.to_path_buf();
    let ck = load_checkpoint(&path, hashes, "checkpoint")?;
    let mut model_cfg = diffusion::checkpoint_model_config(&ck)?;
    let (want, have) = (cfg.model.toggles, model_cfg.toggles);
    for (name, w, h) in [
        ("cascade", want.cascaded, have.cascaded),
        ("lora", want.lora, have.lora),
        ("densesample", want.densesample, have.densesample),
    ] {
        if h && !w {
            return Err(Error::Config(format!("--no-{name} does not match the checkpoint's architecture")));
        }
    }
    model_cfg.toggles.assemble &= want.assemble;
    cfg.model = model_cfg.clone();
    let mut model = instassemble::Model::new(model_cfg, 0)?;
    model.load_from(&ck, |_| true)?;
    Ok(model)
}

pub fn sample(cfg: &mut RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let ann_path = require(&cfg.paths.annotation, "annotation (--annotation)")?.to_path_buf();
    let mut hashes = Hashes::new();
    let model = load_model(cfg, &mut hashes)?;
    let ann = read_annotation(&ann_path)?;
    let layout = synth_data::annotation_to_layout(&ann)?;
    let prompt = Vocab::encode_prompt(&ann.global_caption);
    let img = diffusion::sample(&model, &prompt, Some(&layout), &cfg.sample_config())?;
    create_dir(out)?;
    let png = out.join("sample.png");
    img.save_png(&png)?;
    hashes.insert("sample.png".into(), hash_file(&png)?);
    log::info!("wrote {}", png.display());
    write_run_record(out, cfg, &hashes)
}

pub fn eval(cfg: &mut RunConfig, out: &Path, ground_truth: bool, unconditioned: bool) -> Result<()> {
    cfg.validate()?;
    let data = require(&cfg.paths.data, "evaluation data (--data)")?.to_path_buf();
    let items = load_items(&data)?;
    let mut hashes = Hashes::new();
    let report = if ground_truth {
        evaluate_ground_truth(&items)?
    } else {
        let model = load_model(cfg, &mut hashes)?;
        evaluate_model(&model, &items, &cfg.sample_config(), !unconditioned)?
    };
    print!("{}", report.table());
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_run_record(out, cfg, &hashes)
}

#[derive(Serialize)]
struct AblationRow {
    assemble: bool,
    cascaded: bool,
    lora: bool,
    densesample: bool,
    miou: f64,
    color_acc: f64,
    shape_acc: f64,
    report: LgsReport,
}

/// Cumulative rows: all off (base sampling without layout), then
/// assemble, cascaded, LoRA and DenseSample switched on one at a time.
pub fn ablation_rows() -> [Toggles; 5] {
    let off = Toggles { assemble: false, cascaded: false, lora: false, densesample: false };
    let a = Toggles { assemble: true, ..off };
    let ac = Toggles { cascaded: true, ..a };
    let acl = Toggles { lora: true, ..ac };
    [off, a, ac, acl, Toggles::default()]
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = require(&cfg.paths.data, "training data (--data)")?.to_path_buf();
    let eval_dir = match &cfg.paths.eval_data {
        Some(_) => require(&cfg.paths.eval_data, "evaluation data (--eval-data)")?.to_path_buf(),
        None => data.clone(),
    };
    let base_path = require(&cfg.paths.base_checkpoint, "base checkpoint (--base-checkpoint)")?.to_path_buf();
    let mut hashes = Hashes::new();
    let base_ck = load_checkpoint(&base_path, &mut hashes, "base_checkpoint")?;
    check_backbone(&cfg.model, &diffusion::checkpoint_model_config(&base_ck)?)?;
    let train_items = load_items(&data)?;
    let eval_items = load_items(&eval_dir)?;
    let train_examples = examples(&train_items, cfg.model.image_size)?;
    create_dir(out)?;

    let mut rows = Vec::new();
    for (i, toggles) in ablation_rows().into_iter().enumerate() {
        let report = if toggles == ablation_rows()[0] {
            let base = diffusion::model_from_checkpoint(&base_ck)?;
            evaluate_model(&base, &eval_items, &cfg.sample_config(), false)?
        } else {
            let model_cfg = ModelConfig { toggles, ..cfg.model.clone() };
            let model = diffusion::prepare_model(model_cfg, Phase::Layout, Some(&base_ck), cfg.seed)?;
            let train_cfg = diffusion::TrainConfig { checkpoint_every: 0, ..cfg.train_config() };
            let mut trainer = Trainer::new(model, Phase::Layout, train_cfg, train_examples.clone())?;
            let dir = out.join(format!("row{i}"));
            run_trainer(&mut trainer, &dir)?;
            hashes.insert(format!("row{i}/final.ckpt"), hash_file(&dir.join("final.ckpt"))?);
            evaluate_model(&trainer.model, &eval_items, &cfg.sample_config(), true)?
        };
        log::info!("row {i} {toggles:?}: mIoU {:.4}", report.miou);
        rows.push(AblationRow {
            assemble: toggles.assemble,
            cascaded: toggles.cascaded,
            lora: toggles.lora,
            densesample: toggles.densesample,
            miou: report.miou,
            color_acc: report.color_acc,
            shape_acc: report.shape_acc,
            report,
        });
    }
    println!("{}", ablation_table(&rows));
    write_json(&out.join("ablation.json"), &rows)?;
    write_run_record(out, cfg, &hashes)
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = String::from("assemble cascaded lora densesample     mIoU    color    shape\n");
    for r in rows {
        s += &format!(
            "{:>8} {:>8} {:>4} {:>11} {:>8.4} {:>8.4} {:>8.4}\n",
            mark(r.assemble),
            mark(r.cascaded),
            mark(r.lora),
            mark(r.densesample),
            r.miou,
            r.color_acc,
            r.shape_acc
        );
    }
    s
}
