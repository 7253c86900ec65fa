//! Normalized box arithmetic, DenseSample point grids, Fourier features,
//! latent crop windows, instance density maps and IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BOX_SLACK: f64 = 1e-9;
/// Absorbs representation error when a box edge lands exactly on a cell edge.
const GRID_SLACK: f64 = 1e-9;

/// Axis-aligned box in image-fraction coordinates: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x1, y1, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn full() -> Self {
        Self { x1: 0.0, y1: 0.0, w: 1.0, h: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x1 + self.w <= 1.0 + BOX_SLACK
            && self.y1 + self.h <= 1.0 + BOX_SLACK;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid box {self:?}")))
        }
    }

    pub fn x2(&self) -> f64 {
        self.x1 + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y1 + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x2().min(other.x2()) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0.0
    }
}

/// `K²` points laid out row-major (y outer, x inner).
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrid {
    pub k: usize,
    pub points: Vec<(f64, f64)>,
}

/// Uniform `K × K` sampling of a box, half-open on the far edges.
pub fn dense_sample(b: &BBox, k: usize) -> Result<PointGrid> {
    b.validate()?;
    if k == 0 {
        return Err(Error::InvalidArgument("DenseSample grid size K must be at least 1".into()));
    }
    let kf = k as f64;
    let mut points = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            points.push((b.x1 + kx as f64 * b.w / kf, b.y1 + ky as f64 * b.h / kf));
        }
    }
    Ok(PointGrid { k, points })
}

/// Length of [`fourier_embed`]'s output for a `K × K` grid and `F` frequencies.
pub fn fourier_len(k: usize, freqs: usize) -> usize {
    k * k * 2 * 2 * freqs
}

/// `[sin(2^j π c), cos(2^j π c)]` for `j = 0..F`, per coordinate `c`,
/// x before y, points in grid order.
pub fn fourier_embed(grid: &PointGrid, freqs: usize) -> Result<Vec<f64>> {
    if freqs == 0 {
        return Err(Error::InvalidArgument("Fourier frequency count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(grid.points.len() * 4 * freqs);
    for &(x, y) in &grid.points {
        for c in [x, y] {
            for j in 0..freqs {
                let arg = (1u64 << j) as f64 * std::f64::consts::PI * c;
                out.push(arg.sin());
                out.push(arg.cos());
            }
        }
    }
    Ok(out)
}

/// Window of latent cells `[col_start, col_end) × [row_start, row_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CropRegion {
    pub col_start: usize,
    pub col_end: usize,
    pub row_start: usize,
    pub row_end: usize,
}

impl CropRegion {
    pub fn width(&self) -> usize {
        self.col_end - self.col_start
    }

    pub fn height(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        (self.col_start..self.col_end).contains(&col) && (self.row_start..self.row_end).contains(&row)
    }

    /// Row-major flat cell indices (`row * grid_width + col`).
    pub fn cells(&self, grid_width: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.area());
        for r in self.row_start..self.row_end {
            for c in self.col_start..self.col_end {
                v.push(r * grid_width + c);
            }
        }
        v
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { col_start: 0, col_end: width, row_start: 0, row_end: height }
    }
}

fn crop_axis(start: f64, len: f64, cells: usize) -> (usize, usize) {
    let n = cells as f64;
    let s = ((start * n + GRID_SLACK).floor().max(0.0) as usize).min(cells - 1);
    let e = ((start + len) * n - GRID_SLACK).ceil().max(0.0) as usize;
    let e = e.max(s + 1).min(cells);
    (s, e)
}

/// Latent-grid window covered by a box: floor on the start edge, ceil on the
/// end edge, at least one cell.
pub fn bbox_to_crop(b: &BBox, width: usize, height: usize) -> CropRegion {
    assert!(width >= 1 && height >= 1, "latent grid must be non-empty");
    let (col_start, col_end) = crop_axis(b.x1, b.w, width);
    let (row_start, row_end) = crop_axis(b.y1, b.h, height);
    CropRegion { col_start, col_end, row_start, row_end }
}

/// Per-cell count of covering crops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    counts: Vec<u32>,
}

impl DensityMap {
    pub fn get(&self, col: usize, row: usize) -> u32 {
        self.counts[row * self.width + col]
    }

    /// Counts in row-major cell order.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn covered(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }
}

pub fn density_map(crops: &[CropRegion], width: usize, height: usize) -> DensityMap {
    let mut counts = vec![0u32; width * height];
    for c in crops {
        debug_assert!(c.col_end <= width && c.row_end <= height, "crop outside grid");
        for r in c.row_start..c.row_end {
            for col in c.col_start..c.col_end {
                counts[r * width + col] += 1;
            }
        }
    }
    DensityMap { width, height, counts }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    // Corner-based areas so that identical boxes give exactly 1.
    let span = |b: &BBox| (b.x2() - b.x1) * (b.y2() - b.y1);
    let union = span(a) + span(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}
