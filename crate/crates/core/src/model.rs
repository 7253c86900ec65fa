//! Model configuration, parameter layout and the top-level velocity network.
//!
//! The network is a stack of MMDiT blocks over (image, prompt) tokens. When a
//! layout is supplied, an Assemble-MMDiT block follows each base block (or a
//! single one follows the whole stack when cascading is disabled) and updates
//! image tokens together with the per-instance tokens from the layout encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assemble;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{bbox_to_crop, fourier_len, CropRegion};
use crate::layout_encoder::{self, Layout};
use crate::mmdit;
use crate::params::{normal_matrix, xavier, Checkpoint, ParamId, ParamStore, BASE_PREFIX, LAYOUT_PREFIX};
use crate::tensor::{lit, Matrix, Real};
use crate::vocab::Vocab;

/// Component switches mirroring the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Per-instance cropped attention; off = joint attention over image and all instance tokens.
    pub assemble: bool,
    /// One assemble block after every base block; off = a single trailing block.
    pub cascaded: bool,
    /// Low-rank adapters on frozen projection copies; off = projections trained directly.
    pub lora: bool,
    /// `K × K` box sampling; off = K = 1.
    pub densesample: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { assemble: true, cascaded: true, lora: true, densesample: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width `C`.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dense_k: usize,
    pub fourier_freqs: usize,
    /// Side of the resampled crop fed to the visual instance encoder.
    pub visual_patch: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_instances: usize,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            width: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            dense_k: 2,
            fourier_freqs: 4,
            visual_patch: 8,
            lora_rank: 8,
            lora_alpha: 16.0,
            max_instances: 24,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return err(format!("width {} must be a positive multiple of 4", self.width));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return err(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 {
            return err("blocks and mlp_ratio must be positive".into());
        }
        if self.dense_k == 0 || self.fourier_freqs == 0 || self.visual_patch == 0 {
            return err("dense_k, fourier_freqs and visual_patch must be positive".into());
        }
        if self.lora_rank == 0 {
            return err("LoRA rank must be at least 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Effective DenseSample grid side.
    pub fn k(&self) -> usize {
        if self.toggles.densesample {
            self.dense_k
        } else {
            1
        }
    }

    pub fn box_features(&self) -> usize {
        fourier_len(self.k(), self.fourier_freqs)
    }

    pub fn assemble_blocks(&self) -> usize {
        if self.toggles.cascaded {
            self.blocks
        } else {
            1
        }
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Layout,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A projection with an optional low-rank adapter `(A, B)`.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedIds {
    pub base: LinearIds,
    pub lora: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Copy, Debug)]
pub struct StreamIds {
    pub modulation: LinearIds,
    pub q: AdaptedIds,
    pub k: AdaptedIds,
    pub v: AdaptedIds,
    pub o: AdaptedIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    /// Image stream.
    pub img: StreamIds,
    /// Prompt stream (base blocks) or instance stream (assemble blocks).
    pub ctx: StreamIds,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderIds {
    pub embed: ParamId,
    pub text_fc1: LinearIds,
    pub text_fc2: LinearIds,
    pub visual_fc1: LinearIds,
    pub visual_fc2: LinearIds,
    pub box_proj: LinearIds,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub patch_embed: LinearIds,
    pub text_embed: ParamId,
    pub time_fc1: LinearIds,
    pub time_fc2: LinearIds,
    pub base_blocks: Vec<BlockIds>,
    pub final_mod: LinearIds,
    pub final_proj: LinearIds,
    pub encoder: EncoderIds,
    pub assemble_blocks: Vec<BlockIds>,
}

/// Stream parameter names that are copied from the base model into assemble blocks.
const COPIED: [&str; 6] = ["q", "k", "v", "o", "fc1", "fc2"];

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: ModelIds,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn linear(&mut self, name: &str, out_dim: usize, in_dim: usize, zero: bool) -> Result<LinearIds> {
        let w = if zero { Matrix::zeros(out_dim, in_dim) } else { xavier(out_dim, in_dim, &mut self.rng) };
        let weight = self.store.insert(format!("{name}.weight"), w, true)?;
        let bias = self.store.insert(format!("{name}.bias"), Matrix::zeros(1, out_dim), true)?;
        Ok(LinearIds { weight, bias })
    }

    fn adapted(&mut self, name: &str, c: usize, rank: Option<usize>, zero: bool) -> Result<AdaptedIds> {
        let base = self.linear(name, c, c, zero)?;
        let lora = match rank {
            Some(r) => {
                let bound = 1.0 / (c as f64).sqrt();
                let a = Matrix::from_fn(r, c, |_, _| {
                    lit::<T>(rand::Rng::random_range(&mut self.rng, -bound..bound))
                });
                let a = self.store.insert(format!("{name}.lora_a"), a, true)?;
                let b = self.store.insert(format!("{name}.lora_b"), Matrix::zeros(c, r), true)?;
                Some((a, b))
            }
            None => None,
        };
        Ok(AdaptedIds { base, lora })
    }

    fn stream(&mut self, name: &str, cfg: &ModelConfig, rank: Option<usize>) -> Result<StreamIds> {
        let c = cfg.width;
        Ok(StreamIds {
            modulation: self.linear(&format!("{name}.mod"), 6 * c, c, true)?,
            q: self.adapted(&format!("{name}.q"), c, rank, false)?,
            k: self.adapted(&format!("{name}.k"), c, rank, false)?,
            v: self.adapted(&format!("{name}.v"), c, rank, false)?,
            o: self.adapted(&format!("{name}.o"), c, rank, false)?,
            fc1: self.linear(&format!("{name}.fc1"), cfg.mlp_ratio * c, c, false)?,
            fc2: self.linear(&format!("{name}.fc2"), c, cfg.mlp_ratio * c, false)?,
        })
    }
}

impl<T: Real> Model<T> {
    /// Fresh model with seeded initialization. Assemble-block projections
    /// start as copies of the matching base-block projections.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config.width;
        let vocab = Vocab::size();
        let ids = {
            let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
            let patch_embed = init.linear("base.patch_embed", c, config.patch_dim(), false)?;
            let text_embed = {
                let m = normal_matrix(vocab, c, 0.02, &mut init.rng);
                init.store.insert("base.text_embed", m, true)?
            };
            let time_fc1 = init.linear("base.time.fc1", c, c, false)?;
            let time_fc2 = init.linear("base.time.fc2", c, c, false)?;
            let mut base_blocks = Vec::with_capacity(config.blocks);
            for i in 0..config.blocks {
                base_blocks.push(BlockIds {
                    img: init.stream(&format!("base.blocks.{i}.img"), &config, None)?,
                    ctx: init.stream(&format!("base.blocks.{i}.txt"), &config, None)?,
                });
            }
            let final_mod = init.linear("base.final.mod", 2 * c, c, true)?;
            let final_proj = init.linear("base.final.proj", config.patch_dim(), c, true)?;

            let box_feats = config.box_features();
            let vis_in = 3 * config.visual_patch * config.visual_patch;
            let encoder = EncoderIds {
                embed: {
                    let m = normal_matrix(vocab, c, 1.0, &mut init.rng);
                    init.store.insert("assemble.encoder.embed", m, true)?
                },
                text_fc1: init.linear("assemble.encoder.text.fc1", 2 * c, c + box_feats, false)?,
                text_fc2: init.linear("assemble.encoder.text.fc2", c, 2 * c, false)?,
                visual_fc1: init.linear("assemble.encoder.visual.fc1", 2 * c, vis_in, false)?,
                visual_fc2: init.linear("assemble.encoder.visual.fc2", c, 2 * c, false)?,
                box_proj: init.linear("assemble.encoder.box", c, box_feats, false)?,
            };
            let rank = config.toggles.lora.then_some(config.lora_rank);
            let mut assemble_blocks = Vec::with_capacity(config.assemble_blocks());
            for i in 0..config.assemble_blocks() {
                assemble_blocks.push(BlockIds {
                    img: init.stream(&format!("assemble.blocks.{i}.img"), &config, rank)?,
                    ctx: init.stream(&format!("assemble.blocks.{i}.inst"), &config, rank)?,
                });
            }
            ModelIds {
                patch_embed,
                text_embed,
                time_fc1,
                time_fc2,
                base_blocks,
                final_mod,
                final_proj,
                encoder,
                assemble_blocks,
            }
        };
        let mut model = Self { config, params: store, ids };
        model.init_layout_from_base();
        model.set_phase(Phase::Base);
        Ok(model)
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    pub fn grid(&self) -> usize {
        self.config.grid()
    }

    /// Base block feeding assemble block `i`.
    fn source_block(&self, i: usize) -> usize {
        if self.config.toggles.cascaded {
            i
        } else {
            self.config.blocks - 1
        }
    }

    /// Copies base projections and MLPs into the assemble blocks (image
    /// stream from the image stream, instance stream from the prompt stream).
    pub fn init_layout_from_base(&mut self) {
        for i in 0..self.config.assemble_blocks() {
            let src = self.source_block(i);
            for (dst_stream, src_stream) in [("img", "img"), ("inst", "txt")] {
                for p in COPIED {
                    for suffix in ["weight", "bias"] {
                        let from = format!("base.blocks.{src}.{src_stream}.{p}.{suffix}");
                        let to = format!("assemble.blocks.{i}.{dst_stream}.{p}.{suffix}");
                        let v = self.params.get(&from).expect("base tensor").clone();
                        let id = self.params.expect_id(&to);
                        *self.params.value_mut(id) = v;
                    }
                }
            }
        }
    }

    fn is_copied_base(&self, name: &str) -> bool {
        name.starts_with("assemble.blocks.")
            && COPIED.iter().any(|p| {
                name.ends_with(&format!(".{p}.weight")) || name.ends_with(&format!(".{p}.bias"))
            })
    }

    /// Sets trainable flags: base phase trains `base.*`; layout phase trains
    /// `assemble.*` (minus the frozen projection copies when LoRA is on).
    pub fn set_phase(&mut self, phase: Phase) {
        let lora = self.config.toggles.lora;
        let flags: Vec<(ParamId, bool)> = self
            .params
            .iter()
            .map(|(id, p)| {
                let trainable = match phase {
                    Phase::Base => p.name.starts_with(BASE_PREFIX),
                    Phase::Layout => {
                        p.name.starts_with(LAYOUT_PREFIX) && !(lora && self.is_copied_base(&p.name))
                    }
                };
                (id, trainable)
            })
            .collect();
        for (id, t) in flags {
            self.params.set_trainable(id, t);
        }
    }

    /// Loads matching tensors from a checkpoint. `filter` selects names.
    pub fn load_from(&mut self, ck: &Checkpoint, filter: impl Fn(&str) -> bool) -> Result<()> {
        for t in ck.tensors.iter().filter(|t| filter(&t.name)) {
            if !t.name.starts_with("optim.") && !self.params.contains(&t.name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint tensor {} does not exist in this model configuration",
                    t.name
                )));
            }
        }
        let keep_flags: Vec<(String, bool)> =
            self.params.iter().map(|(_, p)| (p.name.clone(), p.trainable)).collect();
        self.params.load_tensors(ck.tensors.as_slice(), |n| filter(n) && !n.starts_with("optim."))?;
        for (name, t) in keep_flags {
            let id = self.params.expect_id(&name);
            self.params.set_trainable(id, t);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    pub fn crops(&self, layout: &Layout) -> Vec<CropRegion> {
        let g = self.grid();
        layout.instances.iter().map(|inst| bbox_to_crop(&inst.bbox, g, g)).collect()
    }

    /// Velocity prediction. `z` is the patch matrix (`cells × 3p²`); `None`
    /// layout runs the base network only.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        z: Var,
        t: f64,
        prompt: &[usize],
        layout: Option<&Layout>,
    ) -> Result<Var> {
        if let Some(l) = layout {
            if l.instances.len() > self.config.max_instances {
                return Err(Error::InvalidArgument(format!(
                    "layout has {} instances, maximum is {}",
                    l.instances.len(),
                    self.config.max_instances
                )));
            }
        }
        let ids = &self.ids;
        let store = &self.params;
        let cond = mmdit::conditioning(g, store, ids, t, prompt)?;
        let cond_act = g.silu(cond);
        let img = mmdit::patchify(g, store, ids.patch_embed, z);
        let mut img = mmdit::add_positions(g, img, self.grid(), self.config.width);
        let mut txt = mmdit::prompt_tokens(g, store, ids.text_embed, prompt)?;

        let layout_state = match layout {
            Some(l) => {
                let tokens = layout_encoder::encode_layout(g, self, l)?;
                Some((tokens, self.crops(l)))
            }
            None => None,
        };
        let mut inst = layout_state.as_ref().map(|(tok, _)| *tok);
        let heads = self.config.heads;
        let grid = self.grid();
        for (i, block) in ids.base_blocks.iter().enumerate() {
            (img, txt) = mmdit::mmdit_block(g, store, block, img, txt, cond_act, heads);
            let run_assemble = self.config.toggles.cascaded || i + 1 == ids.base_blocks.len();
            if let (Some((_, crops)), Some(h_l), true) = (&layout_state, inst, run_assemble) {
                let ab = &ids.assemble_blocks[if self.config.toggles.cascaded { i } else { 0 }];
                let ctx = assemble::AssembleContext {
                    crops,
                    grid_width: grid,
                    heads,
                    lora_scale: self.config.lora_scale(),
                    per_instance: self.config.toggles.assemble,
                };
                let (z2, l2) = assemble::assemble_block_forward(g, store, ab, &ctx, img, h_l, cond_act);
                img = z2;
                inst = Some(l2);
            }
        }
        Ok(mmdit::final_layer(g, store, ids, img, cond_act))
    }

    pub fn base_forward(&self, g: &mut Graph<T>, z: Var, t: f64, prompt: &[usize]) -> Result<Var> {
        self.forward(g, z, t, prompt, None)
    }

    pub fn cascaded_forward(
        &self,
        g: &mut Graph<T>,
        z: Var,
        t: f64,
        prompt: &[usize],
        layout: &Layout,
    ) -> Result<Var> {
        self.forward(g, z, t, prompt, Some(layout))
    }

    /// Convenience wrapper: pixels in, pixel-space velocity out.
    pub fn velocity_pixels(&self, pixels: &[T], t: f64, prompt: &[usize], layout: Option<&Layout>) -> Result<Vec<T>> {
        let size = self.config.image_size;
        let p = self.config.patch_size;
        let patches = mmdit::extract_patches(pixels, size, p)?;
        let mut g = Graph::new();
        let z = g.constant(patches);
        let v = self.forward(&mut g, z, t, prompt, layout)?;
        Ok(mmdit::place_patches(g.value(v), size, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { image_size: 8, patch_size: 4, width: 8, blocks: 2, heads: 2, ..Default::default() }
    }

    #[test]
    fn theta_and_theta_prime_are_disjoint_and_unique() {
        let m = Model::<f32>::new(tiny(), 1).unwrap();
        for (_, p) in m.params.iter() {
            let base = p.name.starts_with(BASE_PREFIX);
            let layout = p.name.starts_with(LAYOUT_PREFIX);
            assert!(base ^ layout, "{} must belong to exactly one group", p.name);
        }
    }

    #[test]
    fn phase_flags() {
        let mut m = Model::<f32>::new(tiny(), 1).unwrap();
        m.set_phase(Phase::Layout);
        for (_, p) in m.params.iter() {
            if p.name.starts_with(BASE_PREFIX) {
                assert!(!p.trainable, "{}", p.name);
            }
        }
        let q = m.params.expect_id("assemble.blocks.0.img.q.weight");
        assert!(!m.params.is_trainable(q));
        let a = m.params.expect_id("assemble.blocks.0.img.q.lora_a");
        assert!(m.params.is_trainable(a));

        let mut full = Model::<f32>::new(ModelConfig { toggles: Toggles { lora: false, ..Toggles::default() }, ..tiny() }, 1).unwrap();
        full.set_phase(Phase::Layout);
        assert!(full.params.id("assemble.blocks.0.img.q.lora_a").is_none());
        assert!(full.params.is_trainable(full.params.expect_id("assemble.blocks.0.img.q.weight")));
    }

    #[test]
    fn copies_track_base_blocks() {
        let m = Model::<f32>::new(ModelConfig { toggles: Toggles { cascaded: false, ..Toggles::default() }, ..tiny() }, 3).unwrap();
        assert_eq!(m.ids().assemble_blocks.len(), 1);
        assert_eq!(
            m.params.get("assemble.blocks.0.inst.k.weight"),
            m.params.get("base.blocks.1.txt.k.weight")
        );
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(Model::<f32>::new(ModelConfig { image_size: 10, patch_size: 4, ..tiny() }, 0).is_err());
        assert!(Model::<f32>::new(ModelConfig { heads: 3, ..tiny() }, 0).is_err());
    }
}
