//! Procedural colored-shape scenes, their annotations and the on-disk
//! dataset layout (`images/NNNNN.png`, `annotations/NNNNN.json`).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::diffusion::Example;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::layout_encoder::{Instance, Layout};
use crate::raster::RgbImage;
use crate::vocab::{Color, Shape, Vocab, UNK};

pub const BACKGROUND: [f32; 3] = [0.0, 0.0, 0.0];
const PLACEMENT_ATTEMPTS: usize = 100;
const SCENE_ATTEMPTS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Maximum pairwise IoU between boxes.
    pub overlap_cap: f64,
    /// Box side range as fractions of the image side.
    pub min_side: f64,
    pub max_side: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::sparse(64)
    }
}

impl SceneConfig {
    /// 1–4 instances, IoU cap 0.3.
    pub fn sparse(image_size: usize) -> Self {
        Self { image_size, min_instances: 1, max_instances: 4, overlap_cap: 0.3, min_side: 0.1875, max_side: 0.4375 }
    }

    /// Up to 16 smaller instances, IoU cap 0.5.
    pub fn dense(image_size: usize) -> Self {
        Self { image_size, min_instances: 1, max_instances: 16, overlap_cap: 0.5, min_side: 0.125, max_side: 0.3125 }
    }

    pub fn preset(name: &str, image_size: usize) -> Result<Self> {
        match name {
            "sparse" => Ok(Self::sparse(image_size)),
            "dense" => Ok(Self::dense(image_size)),
            other => Err(Error::Config(format!("unknown scene preset {other:?} (expected sparse or dense)"))),
        }
    }

    fn side_px(&self) -> (usize, usize) {
        let s = self.image_size as f64;
        let lo = ((self.min_side * s).round() as usize).max(2);
        let hi = ((self.max_side * s).round() as usize).clamp(lo, self.image_size);
        (lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} is too small for scenes", self.image_size)));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "instance range {}..={} is empty or starts at zero",
                self.min_instances, self.max_instances
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return Err(Error::Config(format!("overlap cap {} outside [0, 1]", self.overlap_cap)));
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side && self.max_side <= 1.0) {
            return Err(Error::Config(format!("box side range {}..{} is invalid", self.min_side, self.max_side)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneInstance {
    pub shape: Shape,
    pub color: Color,
    pub bbox: BBox,
}

impl SceneInstance {
    pub fn description(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Drawn in order, later instances on top.
    pub instances: Vec<SceneInstance>,
    pub background: [f32; 3],
    pub caption: String,
}

pub fn caption_for(instances: &[SceneInstance]) -> String {
    let parts: Vec<String> = instances.iter().map(|i| format!("a {}", i.description())).collect();
    format!("{} on a black background", parts.join(" and "))
}

/// Whether pixel `(x, y)` of a `width × height` raster belongs to the shape
/// drawn in `b`. Circles are inscribed discs sampled at pixel centers;
/// triangles point up with the base on the box's bottom edge and are
/// sampled at the middle of each pixel's lower edge, so the apex row is
/// never empty.
pub fn shape_pixel(shape: Shape, b: &BBox, x: usize, y: usize, width: usize, height: usize) -> bool {
    let (wf, hf) = (width as f64, height as f64);
    let px = (x as f64 + 0.5) / wf;
    let py = (y as f64 + 0.5) / hf;
    if px < b.x1 || px >= b.x2() || py < b.y1 || py >= b.y2() {
        return false;
    }
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let (cx, cy) = (b.x1 + b.w / 2.0, b.y1 + b.h / 2.0);
            let r = b.w.min(b.h) / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        Shape::Triangle => {
            let bottom = (y as f64 + 1.0) / hf;
            // Half-width grows linearly from 0 at the apex to w/2 at the base.
            let half = ((bottom - b.y1) / b.h).min(1.0) * b.w / 2.0;
            (px - (b.x1 + b.w / 2.0)).abs() <= half + 1e-12
        }
    }
}

/// Flat indices (`y * size + x`) of the shape's pixels at `size × size`.
pub fn shape_mask(shape: Shape, b: &BBox, size: usize) -> Vec<usize> {
    let s = size as f64;
    let x0 = (b.x1 * s).floor().max(0.0) as usize;
    let y0 = (b.y1 * s).floor().max(0.0) as usize;
    let x1 = ((b.x2() * s).ceil() as usize).min(size);
    let y1 = ((b.y2() * s).ceil() as usize).min(size);
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if shape_pixel(shape, b, x, y, size, size) {
                out.push(y * size + x);
            }
        }
    }
    out
}

/// Hard-edged rasterization at `size × size`.
pub fn render_scene(spec: &SceneSpec, size: usize) -> RgbImage {
    let mut img = RgbImage::new(size, size, spec.background);
    for inst in &spec.instances {
        let rgb = inst.color.rgb();
        for i in shape_mask(inst.shape, &inst.bbox, size) {
            img.set_pixel(i % size, i / size, rgb);
        }
    }
    img
}

/// Seeded scene: instance count uniform over the configured range, square
/// pixel-aligned boxes placed by rejection sampling. Besides the IoU cap,
/// drawn shapes may not share pixels, and shapes of the same color may not
/// touch, so every instance stays fully visible as its own component.
/// Instances are ordered largest first.
pub fn generate_spec(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    for _ in 0..SCENE_ATTEMPTS {
        if let Some(mut placed) = place_instances(&mut rng, n, cfg) {
            placed.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
            let caption = caption_for(&placed);
            return Ok(SceneSpec { instances: placed, background: BACKGROUND, caption });
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} instances in {SCENE_ATTEMPTS} scene attempts (seed {seed})"
    )))
}

fn place_instances(rng: &mut ChaCha8Rng, n: usize, cfg: &SceneConfig) -> Option<Vec<SceneInstance>> {
    let (lo, hi) = cfg.side_px();
    let size = cfg.image_size;
    let s = size as f64;
    let mut placed: Vec<SceneInstance> = Vec::with_capacity(n);
    // Color of the shape occupying each pixel.
    let mut owner: Vec<Option<Color>> = vec![None; size * size];
    for _ in 0..n {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.random_range(lo..=hi);
            let x = rng.random_range(0..=size - side);
            let y = rng.random_range(0..=size - side);
            let b = BBox { x1: x as f64 / s, y1: y as f64 / s, w: side as f64 / s, h: side as f64 / s };
            if placed.iter().any(|p| iou(&p.bbox, &b) > cfg.overlap_cap) {
                continue;
            }
            let mask = shape_mask(shape, &b, size);
            if mask.iter().all(|&i| owner[i].is_none() && !neighbours(i, size).any(|j| owner[j] == Some(color))) {
                found = Some((b, mask));
                break;
            }
        }
        let (bbox, mask) = found?;
        for i in mask {
            owner[i] = Some(color);
        }
        placed.push(SceneInstance { shape, color, bbox });
    }
    Some(placed)
}

fn neighbours(i: usize, size: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % size, i / size);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < size).then(|| i + 1),
        (y > 0).then(|| i - size),
        (y + 1 < size).then(|| i + size),
    ]
    .into_iter()
    .flatten()
}

pub fn spec_to_layout(spec: &SceneSpec) -> Layout {
    Layout::new(
        spec.instances
            .iter()
            .map(|i| Instance::text(vec![Vocab::color_id(i.color), Vocab::shape_id(i.shape)], i.bbox))
            .collect(),
    )
}

pub fn spec_to_annotation(spec: &SceneSpec, size: usize) -> Annotation {
    let s = size as f64;
    Annotation {
        global_caption: spec.caption.clone(),
        image_info: ImageInfo { height: size, width: size },
        instance_info: spec
            .instances
            .iter()
            .map(|i| AnnotatedInstance {
                bbox: [
                    (i.bbox.x1 * s).round(),
                    (i.bbox.y1 * s).round(),
                    (i.bbox.x2() * s).round(),
                    (i.bbox.y2() * s).round(),
                ],
                description: i.description(),
                detail_description: format!("a {} {} on a black background", i.color, i.shape),
            })
            .collect(),
    }
}

/// Render, annotation and layout of the scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<(RgbImage, Annotation, Layout)> {
    let spec = generate_spec(seed, cfg)?;
    Ok((render_scene(&spec, cfg.image_size), spec_to_annotation(&spec, cfg.image_size), spec_to_layout(&spec)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    /// `[x1, y1, x2, y2]` in pixels.
    #[serde(serialize_with = "serialize_coords")]
    pub bbox: [f64; 4],
    pub description: String,
    pub detail_description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub global_caption: String,
    pub image_info: ImageInfo,
    pub instance_info: Vec<AnnotatedInstance>,
}

/// Integral coordinates are written without a fractional part.
fn serialize_coords<S: Serializer>(v: &[f64; 4], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeTuple;
    let mut t = s.serialize_tuple(4)?;
    for &x in v {
        if x.fract() == 0.0 && x.abs() < 9.0e15 {
            t.serialize_element(&(x as i64))?;
        } else {
            t.serialize_element(&x)?;
        }
    }
    t.end()
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image_info.width as f64, self.image_info.height as f64);
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidArgument("annotation image size must be positive".into()));
        }
        for (i, inst) in self.instance_info.iter().enumerate() {
            let [x1, y1, x2, y2] = inst.bbox;
            let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite())
                && x1 >= 0.0
                && y1 >= 0.0
                && x2 > x1
                && y2 > y1
                && x2 <= w
                && y2 <= h;
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "instance {i}: bbox {:?} is not inside a {w}x{h} image",
                    inst.bbox
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ann: Annotation = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        ann.validate()?;
        Ok(ann)
    }
}

pub fn write_annotation(path: &Path, ann: &Annotation) -> Result<()> {
    std::fs::write(path, ann.to_json() + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_annotation(path: &Path) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Annotation::from_json(&text, path)
}

/// Pixel boxes normalized by the image size; descriptions tokenized, with
/// unknown words mapped to the reserved unknown id.
pub fn annotation_to_layout(ann: &Annotation) -> Result<Layout> {
    ann.validate()?;
    let (w, h) = (ann.image_info.width as f64, ann.image_info.height as f64);
    let instances = ann
        .instance_info
        .iter()
        .map(|inst| {
            let [x1, y1, x2, y2] = inst.bbox;
            let bbox = BBox::new(x1 / w, y1 / h, (x2 - x1) / w, (y2 - y1) / h)?;
            let mut ids = Vocab::tokenize(&inst.description);
            if ids.is_empty() {
                ids.push(UNK);
            }
            Ok(Instance::text(ids, bbox))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layout::new(instances))
}

/// Color and shape named in a `"<color> <shape>"` description.
pub fn parse_description(description: &str) -> (Option<Color>, Option<Shape>) {
    let ids = Vocab::tokenize(description);
    (ids.iter().find_map(|&i| Vocab::color_of(i)), ids.iter().find_map(|&i| Vocab::shape_of(i)))
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn stem(index: usize) -> String {
    format!("{index:05}")
}

/// Writes `count` scenes under `dir/images` and `dir/annotations`.
pub fn write_dataset(dir: &Path, count: usize, seed: u64, cfg: &SceneConfig) -> Result<()> {
    let images = dir.join("images");
    let anns = dir.join("annotations");
    for d in [&images, &anns] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..count {
        let (img, ann, _) = generate_scene(scene_seed(seed, i), cfg)?;
        img.save_png(&images.join(format!("{}.png", stem(i))))?;
        write_annotation(&anns.join(format!("{}.json", stem(i))), &ann)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub id: String,
    pub annotation: Annotation,
    /// Present when the matching PNG exists.
    pub image: Option<RgbImage>,
}

impl DatasetItem {
    pub fn layout(&self) -> Result<Layout> {
        annotation_to_layout(&self.annotation)
    }

    pub fn prompt(&self) -> Vec<usize> {
        Vocab::encode_prompt(&self.annotation.global_caption)
    }

    /// Training example in model space (`2p − 1`); the image must already
    /// be `size × size`.
    pub fn to_example(&self, size: usize) -> Result<Example> {
        let img = self
            .image
            .as_ref()
            .ok_or_else(|| Error::Config(format!("dataset item {} has no image", self.id)))?;
        if img.width() != size || img.height() != size {
            return Err(Error::Config(format!(
                "dataset image {} is {}x{}, model expects {size}x{size}",
                self.id,
                img.width(),
                img.height()
            )));
        }
        Ok(Example { pixels: img.data().iter().map(|&p| 2.0 * p - 1.0).collect(), prompt: self.prompt(), layout: self.layout()? })
    }
}

fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let anns = dir.join("annotations");
    let rd = std::fs::read_dir(&anns).map_err(|e| Error::io(&anns, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(&anns, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every annotation (sorted by file name) and its image if present.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetItem>> {
    let mut items = Vec::new();
    for path in annotation_files(dir)? {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let annotation = read_annotation(&path)?;
        let png = dir.join("images").join(format!("{id}.png"));
        let image = if png.exists() { Some(RgbImage::load_png(&png)?) } else { None };
        items.push(DatasetItem { id, annotation, image });
    }
    Ok(items)
}
