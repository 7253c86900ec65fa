//! Assemble-MMDiT block: per-instance cropped attention over
//! `[crop tokens, instance token]`, uniform averaging of the per-instance
//! updates over overlapping cells, and low-rank adapters on the attention
//! projections.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{density_map, CropRegion, DensityMap};
use crate::mmdit::{ada_layer_norm, adapted_linear, mlp, modulation, multi_head_attention};
use crate::model::BlockIds;
use crate::params::ParamStore;
use crate::tensor::{lit, Matrix, Real};

/// Low-rank update `(α/r)·B·A` on top of a base projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Real> {
    /// `r × D_in`.
    pub a: Matrix<T>,
    /// `D_out × r`.
    pub b: Matrix<T>,
    pub alpha: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

/// `(W + (α/r)·B·A)·x` for a column vector `x`.
pub fn lora_apply<T: Real>(x: &[T], w: &Matrix<T>, adapter: &LoraAdapter<T>) -> Result<Vec<T>> {
    let r = adapter.rank();
    if r == 0
        || w.cols() != x.len()
        || adapter.a.shape() != (r, w.cols())
        || adapter.b.shape() != (w.rows(), r)
    {
        return Err(Error::InvalidArgument(format!(
            "LoRA shapes disagree: W {:?}, A {:?}, B {:?}, x {}",
            w.shape(),
            adapter.a.shape(),
            adapter.b.shape(),
            x.len()
        )));
    }
    let xm = Matrix::from_vec(x.len(), 1, x.to_vec());
    let mut y = Matrix::matmul(w, false, &xm, false);
    let down = Matrix::matmul(&adapter.a, false, &xm, false);
    let up = Matrix::matmul(&adapter.b, false, &down, false);
    let s = lit::<T>(adapter.scale());
    for (yi, ui) in y.data_mut().iter_mut().zip(up.data()) {
        *yi += s * *ui;
    }
    Ok(y.into_vec())
}

/// Static inputs of one assemble block call.
pub struct AssembleContext<'a> {
    pub crops: &'a [CropRegion],
    pub grid_width: usize,
    pub heads: usize,
    pub lora_scale: f64,
    /// Per-instance cropped attention; `false` runs one joint attention over
    /// all image and instance tokens.
    pub per_instance: bool,
}

/// Per-instance attention results, already passed through the output
/// projections.
pub struct InstanceUpdates {
    /// `(update rows, flat cell indices)` per instance.
    pub image: Vec<(Var, Vec<usize>)>,
    /// `N × C` instance-token updates.
    pub instances: Var,
}

/// For each instance `i`: gather the image tokens inside `crops[i]`, append
/// instance token `i`, run one multi-head attention and project both parts
/// back. Instances never read each other's tokens.
pub fn assembling_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &BlockIds,
    ctx: &AssembleContext<'_>,
    img: Var,
    inst: Var,
) -> InstanceUpdates {
    let n = g.shape(inst).0;
    assert_eq!(n, ctx.crops.len(), "one crop per instance token");
    let s = ctx.lora_scale;
    let qi = adapted_linear(g, store, block.img.q, img, s);
    let ki = adapted_linear(g, store, block.img.k, img, s);
    let vi = adapted_linear(g, store, block.img.v, img, s);
    let ql = adapted_linear(g, store, block.ctx.q, inst, s);
    let kl = adapted_linear(g, store, block.ctx.k, inst, s);
    let vl = adapted_linear(g, store, block.ctx.v, inst, s);

    let mut image = Vec::with_capacity(n);
    let mut inst_rows = Vec::with_capacity(n);
    for (i, crop) in ctx.crops.iter().enumerate() {
        let cells = crop.cells(ctx.grid_width);
        let m = cells.len();
        let mut pick = |full: Var, own: Var| {
            let c = g.gather_rows(full, &cells);
            let t = g.slice_rows(own, i, 1);
            g.concat_rows(&[c, t])
        };
        let q = pick(qi, ql);
        let k = pick(ki, kl);
        let v = pick(vi, vl);
        let (a, _) = multi_head_attention(g, q, k, v, ctx.heads);
        let a_img = g.slice_rows(a, 0, m);
        let a_inst = g.slice_rows(a, m, 1);
        image.push((adapted_linear(g, store, block.img.o, a_img, s), cells));
        inst_rows.push(adapted_linear(g, store, block.ctx.o, a_inst, s));
    }
    let instances = if n == 1 { inst_rows[0] } else { g.concat_rows(&inst_rows) };
    InstanceUpdates { image, instances }
}

/// Uniform average of per-instance updates over each covered cell; cells no
/// crop covers keep `original`.
pub fn assemble<T: Real>(
    updates: &[Matrix<T>],
    crops: &[CropRegion],
    density: &DensityMap,
    original: &Matrix<T>,
) -> Result<Matrix<T>> {
    let w = density.width;
    let cells = w * density.height;
    if updates.len() != crops.len() || original.rows() != cells {
        return Err(Error::Internal(format!(
            "assemble got {} updates, {} crops and {} original cells for a {}-cell grid",
            updates.len(),
            crops.len(),
            original.rows(),
            cells
        )));
    }
    if density_map(crops, w, density.height) != *density {
        return Err(Error::Internal("density map does not match the crops".into()));
    }
    let mut g = Graph::new();
    let mut parts = Vec::with_capacity(updates.len());
    for (u, c) in updates.iter().zip(crops) {
        if u.shape() != (c.area(), original.cols()) {
            return Err(Error::Internal(format!("update shape {:?} does not match crop {c:?}", u.shape())));
        }
        parts.push((g.constant(u.clone()), c.cells(w)));
    }
    let mean = g.assemble_mean(cells, &parts);
    let mut out = g.value(mean).clone();
    for (cell, &count) in density.counts().iter().enumerate() {
        if count == 0 {
            out.row_mut(cell).copy_from_slice(original.row(cell));
        }
    }
    Ok(out)
}

fn gated<T: Real>(g: &mut Graph<T>, h: Var, update: Var, gate: Var) -> Var {
    let u = g.mul_row(update, gate);
    g.add(h, u)
}

/// AdaLayerNorm on both streams, assembling attention, assembly, then a
/// per-stream MLP, each step with a gated residual. The image MLP only
/// updates covered cells, so cells outside every crop and `N = 0` pass
/// through bit-identically.
pub fn assemble_block_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &BlockIds,
    ctx: &AssembleContext<'_>,
    img: Var,
    inst: Var,
    cond_act: Var,
) -> (Var, Var) {
    let n = g.shape(inst).0;
    if n == 0 {
        return (img, inst);
    }
    let cells = g.shape(img).0;
    let mi = modulation(g, store, block.img.modulation, cond_act, 6);
    let ml = modulation(g, store, block.ctx.modulation, cond_act, 6);
    let xi = ada_layer_norm(g, img, mi[0], mi[1]);
    let xl = ada_layer_norm(g, inst, ml[0], ml[1]);

    let (img_delta, inst_delta, covered) = if ctx.per_instance {
        let upd = assembling_attention(g, store, block, ctx, xi, xl);
        let delta = g.assemble_mean(cells, &upd.image);
        let covered = density_map(ctx.crops, ctx.grid_width, cells / ctx.grid_width).covered();
        (delta, upd.instances, Some(covered))
    } else {
        let s = ctx.lora_scale;
        let q = {
            let a = adapted_linear(g, store, block.img.q, xi, s);
            let b = adapted_linear(g, store, block.ctx.q, xl, s);
            g.concat_rows(&[a, b])
        };
        let k = {
            let a = adapted_linear(g, store, block.img.k, xi, s);
            let b = adapted_linear(g, store, block.ctx.k, xl, s);
            g.concat_rows(&[a, b])
        };
        let v = {
            let a = adapted_linear(g, store, block.img.v, xi, s);
            let b = adapted_linear(g, store, block.ctx.v, xl, s);
            g.concat_rows(&[a, b])
        };
        let (a, _) = multi_head_attention(g, q, k, v, ctx.heads);
        let a_img = g.slice_rows(a, 0, cells);
        let a_inst = g.slice_rows(a, cells, n);
        let di = adapted_linear(g, store, block.img.o, a_img, s);
        let dl = adapted_linear(g, store, block.ctx.o, a_inst, s);
        (di, dl, None)
    };
    let img = gated(g, img, img_delta, mi[2]);
    let inst = gated(g, inst, inst_delta, ml[2]);

    let xi = ada_layer_norm(g, img, mi[3], mi[4]);
    let ui = mlp(g, store, &block.img, xi);
    let ui = match &covered {
        Some(keep) => g.mask_rows(ui, keep),
        None => ui,
    };
    let img = gated(g, img, ui, mi[5]);
    let xl = ada_layer_norm(g, inst, ml[3], ml[4]);
    let ul = mlp(g, store, &block.ctx, xl);
    let inst = gated(g, inst, ul, ml[5]);
    (img, inst)
}
