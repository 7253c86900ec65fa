//! Instance tokens: one `C`-vector per layout instance from its content
//! (class words or a reference crop) and its box.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{dense_sample, fourier_embed, BBox};
use crate::mmdit::linear;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::raster::RgbImage;
use crate::tensor::{lit, Matrix, Real};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub enum InstanceContent {
    /// Vocabulary ids, e.g. `[color, shape]`.
    Text(Vec<usize>),
    /// Reference appearance in `[0, 1]`.
    Image(RgbImage),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub content: InstanceContent,
    pub bbox: BBox,
}

impl Instance {
    pub fn text(ids: Vec<usize>, bbox: BBox) -> Self {
        Self { content: InstanceContent::Text(ids), bbox }
    }

    /// Text instance from a free-form description.
    pub fn described(description: &str, bbox: BBox) -> Self {
        Self::text(Vocab::tokenize(description), bbox)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub instances: Vec<Instance>,
}

impl Layout {
    pub fn new(instances: Vec<Instance>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }
}

/// Serializable text-only layout entry used by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub description: String,
    /// `[x1, y1, w, h]` in image fractions.
    pub bbox: [f64; 4],
}

impl LayoutEntry {
    pub fn to_instance(&self) -> Result<Instance> {
        let [x, y, w, h] = self.bbox;
        Ok(Instance::described(&self.description, BBox::new(x, y, w, h)?))
    }
}

/// Fourier features of the box's DenseSample grid.
pub fn box_features(cfg: &ModelConfig, bbox: &BBox) -> Result<Vec<f64>> {
    let grid = dense_sample(bbox, cfg.k())?;
    fourier_embed(&grid, cfg.fourier_freqs)
}

fn row<T: Real>(v: &[f64]) -> Matrix<T> {
    Matrix::row_vector(v.iter().map(|&x| lit(x)).collect())
}

/// `MLP([mean τ(ids), Fourier(DenseSample(bbox))])`.
pub fn encode_text_instance<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    ids: &[usize],
    bbox: &BBox,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("text instance has no words".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= Vocab::size()) {
        return Err(Error::InvalidArgument(format!("instance token id {bad} outside vocabulary")));
    }
    let enc = model.ids().encoder;
    let store: &ParamStore<T> = &model.params;
    let feats = box_features(&model.config, bbox)?;
    let table = g.param(store, enc.embed);
    let words = g.gather_rows(table, ids);
    let tau = g.mean_rows(words);
    let fourier = g.constant(row(&feats));
    let x = g.concat_cols(&[tau, fourier]);
    let h = linear(g, store, enc.text_fc1, x);
    let h = g.silu(h);
    Ok(linear(g, store, enc.text_fc2, h))
}

/// Resampled `P × P` crop through an MLP, plus a learned projection of the
/// box features.
pub fn encode_visual_instance<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    crop: &RgbImage,
    bbox: &BBox,
) -> Result<Var> {
    if crop.width() == 0 || crop.height() == 0 {
        return Err(Error::InvalidArgument("visual instance crop is empty".into()));
    }
    let p = model.config.visual_patch;
    let enc = model.ids().encoder;
    let store = &model.params;
    let resized = crop.resize_bilinear(p, p)?;
    let pix = g.constant(Matrix::row_vector(resized.data().iter().map(|&v| lit(v as f64)).collect()));
    let h = linear(g, store, enc.visual_fc1, pix);
    let h = g.silu(h);
    let content = linear(g, store, enc.visual_fc2, h);
    let feats = box_features(&model.config, bbox)?;
    let fourier = g.constant(row(&feats));
    let pos = linear(g, store, enc.box_proj, fourier);
    Ok(g.add(content, pos))
}

pub fn encode_instance<T: Real>(g: &mut Graph<T>, model: &Model<T>, inst: &Instance) -> Result<Var> {
    inst.bbox.validate()?;
    match &inst.content {
        InstanceContent::Text(ids) => encode_text_instance(g, model, ids, &inst.bbox),
        InstanceContent::Image(crop) => encode_visual_instance(g, model, crop, &inst.bbox),
    }
}

/// Row-stacked instance tokens (`N × C`), in layout order.
pub fn encode_layout<T: Real>(g: &mut Graph<T>, model: &Model<T>, layout: &Layout) -> Result<Var> {
    if layout.is_empty() {
        return Ok(g.constant(Matrix::zeros(0, model.config.width)));
    }
    let rows = layout
        .instances
        .iter()
        .map(|inst| encode_instance(g, model, inst))
        .collect::<Result<Vec<_>>>()?;
    Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
}

/// Graph-free evaluation of [`encode_layout`].
pub fn instance_tokens<T: Real>(model: &Model<T>, layout: &Layout) -> Result<Matrix<T>> {
    let mut g = Graph::new();
    let v = encode_layout(&mut g, model, layout)?;
    Ok(g.value(v).clone())
}
