//! Flow-matching objective, Euler sampler with the early-step layout
//! schedule, Adam, and the two-phase training loop.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{pairwise_sum, Graph, Var};
use crate::error::{Error, Result};
use crate::layout_encoder::Layout;
use crate::mmdit::extract_patches;
use crate::model::{Model, ModelConfig, Phase};
use crate::params::{Checkpoint, NamedTensor, ParamId, BASE_PREFIX};
use crate::raster::RgbImage;
use crate::tensor::{lit, Matrix, Real};

/// `z_t = (1 − t)·x + t·ε`.
pub fn forward_noise<T: Real>(x: &[T], eps: &[T], t: f64) -> Vec<T> {
    assert_eq!(x.len(), eps.len(), "image and noise sizes differ");
    let (a, b) = (lit::<T>(1.0 - t), lit::<T>(t));
    x.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

/// Seeded standard-normal vector.
pub fn initial_noise(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    /// Fraction of the (highest-noise) steps that use the layout.
    pub layout_ratio: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 50, layout_ratio: 0.3, seed: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.layout_ratio) {
            return Err(Error::Config(format!("layout ratio {} outside [0, 1]", self.layout_ratio)));
        }
        Ok(())
    }

    /// Number of leading steps run with the layout: `ceil(ρ·S)`.
    pub fn layout_steps(&self) -> usize {
        let x = self.layout_ratio * self.steps as f64;
        ((x - 1e-9).ceil().max(0.0) as usize).min(self.steps)
    }
}

/// Velocity predictor driven by the sampler.
pub trait VelocityField {
    fn base(&mut self, z: &[f32], t: f64) -> Result<Vec<f32>>;
    fn cascaded(&mut self, z: &[f32], t: f64) -> Result<Vec<f32>>;
}

/// A model bound to one prompt and optional layout.
pub struct ModelField<'a> {
    pub model: &'a Model<f32>,
    pub prompt: &'a [usize],
    pub layout: Option<&'a Layout>,
}

impl VelocityField for ModelField<'_> {
    fn base(&mut self, z: &[f32], t: f64) -> Result<Vec<f32>> {
        self.model.velocity_pixels(z, t, self.prompt, None)
    }

    fn cascaded(&mut self, z: &[f32], t: f64) -> Result<Vec<f32>> {
        self.model.velocity_pixels(z, t, self.prompt, self.layout)
    }
}

/// Uniform Euler integration from `t = 1` to `t = 0` starting at `z`;
/// returns the unclamped endpoint.
pub fn integrate(field: &mut impl VelocityField, mut z: Vec<f32>, cfg: &SampleConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    let s = cfg.steps;
    let dt = 1.0 / s as f64;
    let conditioned = cfg.layout_steps();
    for i in 0..s {
        let t = 1.0 - i as f64 * dt;
        let v = if i < conditioned { field.cascaded(&z, t)? } else { field.base(&z, t)? };
        if v.len() != z.len() {
            return Err(Error::Internal(format!("velocity has {} values, state has {}", v.len(), z.len())));
        }
        let d = dt as f32;
        for (zi, vi) in z.iter_mut().zip(&v) {
            *zi -= d * vi;
        }
    }
    Ok(z)
}

/// Seeded sample from the model, mapped from model space back to pixels
/// and clamped to `[0, 1]`.
pub fn sample(model: &Model<f32>, prompt: &[usize], layout: Option<&Layout>, cfg: &SampleConfig) -> Result<RgbImage> {
    let size = model.config.image_size;
    let z = initial_noise(cfg.seed, size * size * 3);
    let mut field = ModelField { model, prompt, layout };
    let out = integrate(&mut field, z, cfg)?;
    let px = out.into_iter().map(|v| 0.5 * (v + 1.0)).collect();
    Ok(RgbImage::from_vec(size, size, px)?.clamped())
}

/// One training example at a fixed timestep and noise draw.
#[derive(Clone, Debug)]
pub struct TrainItem<T: Real> {
    /// Clean image, interleaved RGB.
    pub x: Vec<T>,
    pub eps: Vec<T>,
    pub t: f64,
    pub prompt: Vec<usize>,
    pub layout: Option<Layout>,
}

fn item_loss<T: Real>(model: &Model<T>, g: &mut Graph<T>, item: &TrainItem<T>) -> Result<Var> {
    let size = model.config.image_size;
    let p = model.config.patch_size;
    let z = forward_noise(&item.x, &item.eps, item.t);
    let target: Vec<T> = item.eps.iter().zip(&item.x).map(|(&e, &x)| e - x).collect();
    let zv = g.constant(extract_patches(&z, size, p)?);
    let v = model.forward(g, zv, item.t, &item.prompt, item.layout.as_ref())?;
    Ok(g.mse(v, extract_patches(&target, size, p)?))
}

/// Mean squared error of the velocity prediction against `ε − x`, plus
/// gradients of every gradient-tracking parameter averaged over the batch.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    batch: &[TrainItem<T>],
    all_params: bool,
) -> Result<(T, HashMap<ParamId, Matrix<T>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    let mut per_param: HashMap<ParamId, Vec<Matrix<T>>> = HashMap::new();
    for item in batch {
        let mut g = if all_params { Graph::new().with_all_param_grads() } else { Graph::new() };
        let loss = item_loss(model, &mut g, item)?;
        losses.push(g.value(loss).get(0, 0));
        let grads = g.backward(loss);
        for (id, grad) in grads.params() {
            per_param.entry(id).or_default().push(grad.clone());
        }
    }
    let inv = lit::<T>(1.0 / batch.len() as f64);
    let mut total = [T::zero()];
    let rows: Vec<&[T]> = losses.iter().map(std::slice::from_ref).collect();
    pairwise_sum(&rows, &mut total);
    let mut reduced = HashMap::with_capacity(per_param.len());
    for (id, gs) in per_param {
        let (r, c) = gs[0].shape();
        let mut out = Matrix::zeros(r, c);
        let parts: Vec<&[T]> = gs.iter().map(|m| m.data()).collect();
        pairwise_sum(&parts, out.data_mut());
        out.scale_assign(inv);
        reduced.insert(id, out);
    }
    Ok((total[0] * inv, reduced))
}

/// Batch-mean flow-matching loss.
pub fn training_loss<T: Real>(model: &Model<T>, batch: &[TrainItem<T>]) -> Result<T> {
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let mut g = Graph::new();
        let loss = item_loss(model, &mut g, item)?;
        losses.push(g.value(loss).get(0, 0));
    }
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut total = [T::zero()];
    let rows: Vec<&[T]> = losses.iter().map(std::slice::from_ref).collect();
    pairwise_sum(&rows, &mut total);
    Ok(total[0] / lit(losses.len() as f64))
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<String, (Matrix<f32>, Matrix<f32>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, model: &mut Model<f32>, grads: &HashMap<ParamId, Matrix<f32>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        let mut ids: Vec<&ParamId> = grads.keys().collect();
        ids.sort_by_key(|id| id.index());
        for &id in ids {
            if !model.params.is_trainable(id) {
                continue;
            }
            let g = &grads[&id];
            let name = model.params.name(id).to_string();
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let w = model.params.value_mut(id);
            for (((wi, &gi), mi), vi) in
                w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        let mut out = Vec::with_capacity(2 * names.len());
        for name in names {
            let (m, v) = &self.moments[name];
            for (kind, t) in [("m", m), ("v", v)] {
                out.push(NamedTensor {
                    name: format!("optim.{kind}.{name}"),
                    shape: [t.rows(), t.cols()],
                    trainable: false,
                    data: t.data().to_vec(),
                });
            }
        }
        out
    }

    fn load_tensors(&mut self, tensors: &[NamedTensor]) {
        for t in tensors {
            if let Some(name) = t.name.strip_prefix("optim.m.") {
                let mat = Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone());
                self.moments.entry(name.to_string()).or_insert_with(|| (Matrix::zeros(0, 0), Matrix::zeros(0, 0))).0 = mat;
            } else if let Some(name) = t.name.strip_prefix("optim.v.") {
                let mat = Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone());
                self.moments.entry(name.to_string()).or_insert_with(|| (Matrix::zeros(0, 0), Matrix::zeros(0, 0))).1 = mat;
            }
        }
    }
}

/// Training example before noise and timestep are drawn.
#[derive(Clone, Debug)]
pub struct Example {
    /// Clean image in model space, interleaved RGB in `[-1, 1]`.
    pub pixels: Vec<f32>,
    pub prompt: Vec<usize>,
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// `None` picks the phase default.
    pub lr: Option<f64>,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, lr: None, seed: 0, checkpoint_every: 0 }
    }
}

pub fn default_lr(phase: Phase) -> f64 {
    match phase {
        Phase::Base => 1e-3,
        Phase::Layout => 3e-4,
    }
}

/// Builds the model for a phase. The layout phase requires the base
/// checkpoint, whose `base.*` tensors become the frozen backbone.
pub fn prepare_model(config: ModelConfig, phase: Phase, base: Option<&Checkpoint>, seed: u64) -> Result<Model<f32>> {
    let mut model = Model::new(config, seed)?;
    match (phase, base) {
        (Phase::Base, _) => {}
        (Phase::Layout, None) => {
            return Err(Error::Config("layout-phase training requires a base checkpoint".into()));
        }
        (Phase::Layout, Some(ck)) => {
            let missing: Vec<String> = model
                .params
                .iter()
                .filter(|(_, p)| p.name.starts_with(BASE_PREFIX) && ck.tensor(&p.name).is_none())
                .map(|(_, p)| p.name.clone())
                .collect();
            if let Some(first) = missing.first() {
                return Err(Error::Config(format!(
                    "base checkpoint lacks {} backbone tensors (first: {first})",
                    missing.len()
                )));
            }
            model.load_from(ck, |n| n.starts_with(BASE_PREFIX))?;
            model.init_layout_from_base();
        }
    }
    model.set_phase(phase);
    Ok(model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    phase: Phase,
    model: ModelConfig,
    train: TrainConfig,
    adam_step: u64,
}

/// Reads the model configuration stored in a checkpoint.
pub fn checkpoint_model_config(ck: &Checkpoint) -> Result<ModelConfig> {
    let cfg = ck
        .metadata
        .get("model")
        .ok_or_else(|| Error::Checkpoint("checkpoint metadata has no model configuration".into()))?;
    serde_json::from_value(cfg.clone()).map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))
}

/// Restores a model (all tensors) from a checkpoint written by [`Trainer`].
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model<f32>> {
    let mut model = Model::new(checkpoint_model_config(ck)?, 0)?;
    model.load_from(ck, |_| true)?;
    Ok(model)
}

pub struct Trainer {
    pub model: Model<f32>,
    pub phase: Phase,
    pub config: TrainConfig,
    pub step: u64,
    adam: Adam,
    data: Vec<Example>,
}

impl Trainer {
    pub fn new(model: Model<f32>, phase: Phase, config: TrainConfig, data: Vec<Example>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let lr = config.lr.unwrap_or(default_lr(phase));
        Ok(Self { model, phase, config, step: 0, adam: Adam::new(lr), data })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, data: Vec<Example>) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint metadata: {e}")))?;
        let mut model = Model::new(meta.model.clone(), 0)?;
        model.load_from(ck, |_| true)?;
        model.set_phase(meta.phase);
        let mut t = Self::new(model, meta.phase, meta.train, data)?;
        t.step = meta.step;
        t.adam.step = meta.adam_step;
        t.adam.load_tensors(&ck.tensors);
        Ok(t)
    }

    /// Draws the batch, timesteps and noise for `step` from a step-keyed
    /// generator so runs are reproducible and resumable.
    fn batch(&self, step: u64) -> Vec<TrainItem<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..self.config.batch_size)
            .map(|_| {
                let ex = &self.data[rng.random_range(0..self.data.len())];
                let mut t: f64 = rng.random();
                while t <= 0.0 {
                    t = rng.random();
                }
                let eps = (0..ex.pixels.len()).map(|_| rng.sample(StandardNormal)).collect();
                TrainItem {
                    x: ex.pixels.clone(),
                    eps,
                    t,
                    prompt: ex.prompt.clone(),
                    layout: match self.phase {
                        Phase::Base => None,
                        Phase::Layout => Some(ex.layout.clone()),
                    },
                }
            })
            .collect()
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f32> {
        let batch = self.batch(self.step);
        let (loss, grads) = loss_and_grads(&self.model, &batch, false)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {}", self.step)));
        }
        self.adam.update(&mut self.model, &grads);
        self.step += 1;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            step: self.step,
            phase: self.phase,
            model: self.model.config.clone(),
            train: self.config.clone(),
            adam_step: self.adam.step,
        };
        let mut tensors = self.model.params.to_tensors();
        tensors.extend(self.adam.to_tensors());
        Checkpoint { metadata: serde_json::to_value(meta).expect("metadata serializes"), tensors }
    }

    /// Trains up to `config.steps`, appending `step,loss` lines to
    /// `out/loss.csv` and writing checkpoints into `out` when given.
    /// Returns the per-step losses of this call.
    pub fn run(&mut self, out: Option<&Path>, mut on_step: impl FnMut(u64, f32)) -> Result<Vec<f32>> {
        let mut loss_log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("loss.csv");
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(f), path))
            }
            None => None,
        };
        let mut losses = Vec::new();
        while self.step < self.config.steps {
            let loss = self.train_step()?;
            losses.push(loss);
            on_step(self.step, loss);
            if let Some((w, path)) = loss_log.as_mut() {
                writeln!(w, "{},{}", self.step, loss).map_err(|e| Error::io(path.as_path(), e))?;
            }
            let every = self.config.checkpoint_every;
            if let (Some(dir), true) = (out, every > 0 && self.step % every == 0) {
                let path = checkpoint_path(dir, self.step);
                self.save(&path)?;
                log::info!("step {} loss {loss:.5}, wrote {}", self.step, path.display());
            }
        }
        if let Some((mut w, path)) = loss_log {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(dir) = out {
            let path = dir.join("final.ckpt");
            self.save(&path)?;
            log::info!("finished at step {}, wrote {}", self.step, path.display());
        }
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}
