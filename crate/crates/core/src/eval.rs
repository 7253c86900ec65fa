//! Miniature layout grounding score: an oracle detector for the synthetic
//! palette, class-constrained greedy matching, and an IoU-gated color/shape
//! check.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, SampleConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::Model;
use crate::raster::RgbImage;
use crate::synth_data::{parse_description, shape_pixel, Annotation, DatasetItem, BACKGROUND};
use crate::vocab::{Color, Shape, Vocab};

pub const MIN_COMPONENT_AREA: usize = 4;
pub const GATE_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub color: Color,
    pub shape: Shape,
    /// Pixel count of the component.
    pub area: usize,
}

/// Nearest palette entry; `None` is the background.
pub fn quantize(rgb: [f32; 3]) -> Option<Color> {
    let d = |c: [f32; 3]| (0..3).map(|i| (rgb[i] - c[i]).powi(2)).sum::<f32>();
    let mut best = (d(BACKGROUND), None);
    for c in Color::ALL {
        let dc = d(c.rgb());
        if dc < best.0 {
            best = (dc, Some(c));
        }
    }
    best.1
}

struct Component {
    color: Color,
    pixels: Vec<(usize, usize)>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn components(labels: &[Option<Color>], w: usize, h: usize) -> Vec<Component> {
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let Some(color) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Component { color, pixels: Vec::new(), x0: w, y0: h, x1: 0, y1: 0 };
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            comp.pixels.push((x, y));
            comp.x0 = comp.x0.min(x);
            comp.y0 = comp.y0.min(y);
            comp.x1 = comp.x1.max(x + 1);
            comp.y1 = comp.y1.max(y + 1);
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == Some(color) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(comp);
    }
    out
}

/// Shape whose rasterized template best agrees with the component inside
/// its box. Box pixels of other foreground colors may be occluders and are
/// left out of the comparison. Ties prefer the earlier shape in
/// [`Shape::ALL`].
fn classify_component(c: &Component, labels: &[Option<Color>], w: usize, h: usize) -> Shape {
    let bbox = component_box(c, w, h);
    let mut best = (usize::MAX, Shape::Square);
    for shape in Shape::ALL {
        let mut mismatches = 0usize;
        for y in c.y0..c.y1 {
            for x in c.x0..c.x1 {
                let label = labels[y * w + x];
                let ours = label == Some(c.color);
                if !ours && label.is_some() {
                    continue;
                }
                let inside = shape_pixel(shape, &bbox, x, y, w, h);
                if inside != ours {
                    mismatches += 1;
                }
            }
        }
        if mismatches < best.0 {
            best = (mismatches, shape);
        }
    }
    best.1
}

fn component_box(c: &Component, w: usize, h: usize) -> BBox {
    BBox {
        x1: c.x0 as f64 / w as f64,
        y1: c.y0 as f64 / h as f64,
        w: (c.x1 - c.x0) as f64 / w as f64,
        h: (c.y1 - c.y0) as f64 / h as f64,
    }
}

/// Connected components (4-neighbour) of each palette color with at least
/// [`MIN_COMPONENT_AREA`] pixels, with tight boxes and template-matched
/// shapes.
pub fn oracle_detect(image: &RgbImage) -> Vec<Detection> {
    let (w, h) = (image.width(), image.height());
    let labels: Vec<Option<Color>> = (0..w * h).map(|i| quantize(image.pixel(i % w, i / w))).collect();
    components(&labels, w, h)
        .into_iter()
        .filter(|c| c.pixels.len() >= MIN_COMPONENT_AREA)
        .map(|c| Detection {
            bbox: component_box(&c, w, h),
            color: c.color,
            shape: classify_component(&c, &labels, w, h),
            area: c.pixels.len(),
        })
        .collect()
}

/// Layout condition as seen by the scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub bbox: BBox,
    pub color: Option<Color>,
    /// Matching class; `None` matches any detection.
    pub shape: Option<Shape>,
}

pub fn conditions_from_annotation(ann: &Annotation) -> Result<Vec<Condition>> {
    let layout = crate::synth_data::annotation_to_layout(ann)?;
    Ok(layout
        .instances
        .iter()
        .zip(&ann.instance_info)
        .map(|(inst, a)| {
            let (color, shape) = parse_description(&a.description);
            Condition { bbox: inst.bbox, color, shape }
        })
        .collect())
}

pub fn conditions_from_tokens(items: &[(Vec<usize>, BBox)]) -> Vec<Condition> {
    items
        .iter()
        .map(|(ids, bbox)| Condition {
            bbox: *bbox,
            color: ids.iter().find_map(|&i| Vocab::color_of(i)),
            shape: ids.iter().find_map(|&i| Vocab::shape_of(i)),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// IoU per condition (0 when unmatched).
    pub ious: Vec<f64>,
    /// Matched detection index per condition.
    pub assigned: Vec<Option<usize>>,
}

fn box_key(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.w, b.h]
}

/// Greedy one-to-one matching over same-class pairs in descending IoU.
/// Ties are broken by the boxes' coordinates, so the result does not depend
/// on input order.
pub fn match_and_score(detections: &[Detection], conditions: &[Condition]) -> Matching {
    let mut pairs = Vec::new();
    for (ci, c) in conditions.iter().enumerate() {
        for (di, d) in detections.iter().enumerate() {
            if c.shape.is_some_and(|s| s != d.shape) {
                continue;
            }
            let v = iou(&c.bbox, &d.bbox);
            if v > 0.0 {
                pairs.push((v, ci, di));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0).then_with(|| {
            let ka = (box_key(&conditions[a.1].bbox), box_key(&detections[a.2].bbox));
            let kb = (box_key(&conditions[b.1].bbox), box_key(&detections[b.2].bbox));
            ka.0.iter()
                .chain(&ka.1)
                .zip(kb.0.iter().chain(&kb.1))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut ious = vec![0.0; conditions.len()];
    let mut assigned = vec![None; conditions.len()];
    let mut used = vec![false; detections.len()];
    for (v, ci, di) in pairs {
        if assigned[ci].is_none() && !used[di] {
            assigned[ci] = Some(di);
            used[di] = true;
            ious[ci] = v;
        }
    }
    Matching { ious, assigned }
}

/// Color and shape of the largest palette component in `crop`.
pub fn classify_crop(crop: &RgbImage) -> Option<(Color, Shape)> {
    oracle_detect(crop).into_iter().max_by_key(|d| d.area).map(|d| (d.color, d.shape))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub iou: f64,
    pub gated: bool,
    pub color_correct: Option<bool>,
    pub shape_correct: Option<bool>,
}

/// For conditions with IoU above `threshold`, crops the matched detection
/// box and checks its oracle color and shape against the condition.
pub fn semantic_gate(
    image: &RgbImage,
    detections: &[Detection],
    conditions: &[Condition],
    matching: &Matching,
    threshold: f64,
) -> Vec<InstanceRecord> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    conditions
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let iou = matching.ious[ci];
            let det = matching.assigned[ci].filter(|_| iou > threshold).map(|d| &detections[d]);
            match det {
                Some(d) => {
                    let b = &d.bbox;
                    let crop = image.crop(
                        (b.x1 * w).round() as usize,
                        (b.y1 * h).round() as usize,
                        (b.x2() * w).round() as usize,
                        (b.y2() * h).round() as usize,
                    );
                    let got = classify_crop(&crop);
                    InstanceRecord {
                        iou,
                        gated: true,
                        color_correct: Some(got.is_some_and(|(col, _)| Some(col) == c.color)),
                        shape_correct: Some(got.is_some_and(|(_, s)| Some(s) == c.shape)),
                    }
                }
                None => InstanceRecord { iou, gated: false, color_correct: None, shape_correct: None },
            }
        })
        .collect()
}

/// Detection, matching and gating for one image.
pub fn score_image(image: &RgbImage, conditions: &[Condition]) -> Vec<InstanceRecord> {
    let dets = oracle_detect(image);
    let m = match_and_score(&dets, conditions);
    semantic_gate(image, &dets, conditions, &m, GATE_IOU)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgsReport {
    pub miou: f64,
    pub color_acc: f64,
    pub shape_acc: f64,
    pub n_instances: usize,
    pub gated_count: usize,
    /// No instance passed the IoU gate; accuracies are reported as 0.
    pub gated_empty: bool,
    pub images: Vec<ImageRecord>,
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

impl LgsReport {
    /// Global aggregation over all instances of all images.
    pub fn aggregate(images: Vec<ImageRecord>) -> Self {
        let all: Vec<&InstanceRecord> = images.iter().flat_map(|r| &r.instances).collect();
        let gated: Vec<&&InstanceRecord> = all.iter().filter(|r| r.gated).collect();
        let acc = |f: fn(&InstanceRecord) -> Option<bool>| {
            if gated.is_empty() {
                0.0
            } else {
                gated.iter().filter(|r| f(r) == Some(true)).count() as f64 / gated.len() as f64
            }
        };
        Self {
            miou: sorted_mean(all.iter().map(|r| r.iou).collect()),
            color_acc: acc(|r| r.color_correct),
            shape_acc: acc(|r| r.shape_correct),
            n_instances: all.len(),
            gated_count: gated.len(),
            gated_empty: gated.is_empty(),
            images,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("mIoU", format!("{:.4}", self.miou)),
            ("color accuracy", format!("{:.4}", self.color_acc)),
            ("shape accuracy", format!("{:.4}", self.shape_acc)),
            ("instances", self.n_instances.to_string()),
            ("gated", self.gated_count.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<16} {v:>10}");
        }
        if self.gated_empty {
            let _ = writeln!(s, "(no instance passed the IoU gate)");
        }
        s
    }
}

/// Scores the dataset's own renders (no model).
pub fn evaluate_ground_truth(items: &[DatasetItem]) -> Result<LgsReport> {
    if items.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let img = item
            .image
            .as_ref()
            .ok_or_else(|| Error::Config(format!("dataset item {} has no image", item.id)))?;
        let conds = conditions_from_annotation(&item.annotation)?;
        records.push(ImageRecord { id: item.id.clone(), instances: score_image(img, &conds) });
    }
    Ok(LgsReport::aggregate(records))
}

/// Samples one image per annotation (seed `cfg.seed + index`) and scores it.
/// `conditioned = false` ignores the layout entirely.
pub fn evaluate_model(
    model: &Model<f32>,
    items: &[DatasetItem],
    cfg: &SampleConfig,
    conditioned: bool,
) -> Result<LgsReport> {
    if items.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let mut records = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let layout = item.layout()?;
        let sc = SampleConfig { seed: cfg.seed.wrapping_add(i as u64), ..*cfg };
        let img = sample(model, &item.prompt(), conditioned.then_some(&layout), &sc)?;
        let conds = conditions_from_annotation(&item.annotation)?;
        records.push(ImageRecord { id: item.id.clone(), instances: score_image(&img, &conds) });
    }
    Ok(LgsReport::aggregate(records))
}
