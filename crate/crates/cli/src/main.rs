mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use instassemble::{Error, Phase, Result};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "instassemble", version, about = "Layout-conditioned diffusion on synthetic shape scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (PNG images plus JSON annotations).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Scene preset: sparse or dense.
        #[arg(long)]
        preset: Option<String>,
        /// Number of scenes.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the base model or the layout branch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training phase: base or layout.
        #[arg(long, value_parser = parse_phase)]
        phase: Option<Phase>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Sample one image for an annotation file.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        annotation: Option<PathBuf>,
    },
    /// Score a dataset with the layout grounding metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score the dataset's own images instead of model samples.
        #[arg(long)]
        ground_truth: bool,
        /// Sample without the layout.
        #[arg(long)]
        unconditioned: bool,
    },
    /// Train and score the cumulative component ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (training data, or the scored set for eval).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset for ablate (defaults to --data).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    layout_ratio: Option<f64>,
    /// Training steps for train and ablate, sampling steps for sample and eval.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    no_assemble: bool,
    #[arg(long)]
    no_cascade: bool,
    #[arg(long)]
    no_lora: bool,
    #[arg(long)]
    no_densesample: bool,
}

fn parse_phase(s: &str) -> std::result::Result<Phase, String> {
    match s {
        "base" => Ok(Phase::Base),
        "layout" => Ok(Phase::Layout),
        _ => Err(format!("unknown phase {s:?} (expected base or layout)")),
    }
}

impl Common {
    fn resolve(&self, training_steps: bool) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let paths = &mut cfg.paths;
        for (slot, flag) in [
            (&mut paths.data, &self.data),
            (&mut paths.eval_data, &self.eval_data),
            (&mut paths.base_checkpoint, &self.base_checkpoint),
            (&mut paths.checkpoint, &self.checkpoint),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(r) = self.layout_ratio {
            cfg.sample.layout_ratio = r;
        }
        if let Some(s) = self.steps {
            if training_steps {
                cfg.train.steps = s;
            } else {
                cfg.sample.steps = usize::try_from(s).map_err(|_| Error::Config(format!("--steps {s} is too large")))?;
            }
        }
        let t = &mut cfg.model.toggles;
        t.assemble &= !self.no_assemble;
        t.cascaded &= !self.no_cascade;
        t.lora &= !self.no_lora;
        t.densesample &= !self.no_densesample;
        Ok(cfg)
    }

    fn out(&self) -> Result<PathBuf> {
        self.out.clone().ok_or_else(|| Error::Config("missing --out".into()))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, preset, count } => {
            let mut cfg = common.resolve(true)?;
            if let Some(p) = preset {
                cfg.data.preset = p;
            }
            if let Some(c) = count {
                cfg.data.count = c;
            }
            commands::gen_data(&cfg, &common.out()?)
        }
        Command::Train { common, phase, resume, batch_size, lr, checkpoint_every } => {
            let mut cfg = common.resolve(true)?;
            if let Some(p) = phase {
                cfg.train.phase = p;
            }
            if resume.is_some() {
                cfg.paths.resume = resume;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if lr.is_some() {
                cfg.train.lr = lr;
            }
            if let Some(c) = checkpoint_every {
                cfg.train.checkpoint_every = c;
            }
            commands::train(&mut cfg, &common.out()?)
        }
        Command::Sample { common, annotation } => {
            let mut cfg = common.resolve(false)?;
            if annotation.is_some() {
                cfg.paths.annotation = annotation;
            }
            commands::sample(&mut cfg, &common.out()?)
        }
        Command::Eval { common, ground_truth, unconditioned } => {
            let mut cfg = common.resolve(false)?;
            commands::eval(&mut cfg, &common.out()?, ground_truth, unconditioned)
        }
        Command::Ablate { common } => {
            let cfg = common.resolve(true)?;
            commands::ablate(&cfg, &common.out()?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
