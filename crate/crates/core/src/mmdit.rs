//! Base diffusion transformer: patch tokens, timestep embedding, adaptive
//! layer norm, joint image–prompt attention and the MMDiT block.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{AdaptedIds, BlockIds, LinearIds, ModelIds, StreamIds};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Matrix, Real};
use crate::vocab::Vocab;

pub const LN_EPS: f64 = 1e-6;

/// Splits interleaved RGB pixels (`size × size × 3`) into non-overlapping
/// `p × p` patches, one row per patch in row-major grid order. Within a row
/// values are ordered (py, px, channel).
pub fn extract_patches<T: Real>(pixels: &[T], size: usize, p: usize) -> Result<Matrix<T>> {
    if p == 0 || size % p != 0 {
        return Err(Error::InvalidArgument(format!("image side {size} is not divisible by patch size {p}")));
    }
    if pixels.len() != size * size * 3 {
        return Err(Error::InvalidArgument(format!(
            "expected {} pixel values for a {size}x{size} RGB image, got {}",
            size * size * 3,
            pixels.len()
        )));
    }
    let grid = size / p;
    let dim = 3 * p * p;
    let mut m = Matrix::zeros(grid * grid, dim);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = m.row_mut(gy * grid + gx);
            let mut j = 0;
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * size + gx * p) * 3;
                row[j..j + 3 * p].copy_from_slice(&pixels[start..start + 3 * p]);
                j += 3 * p;
            }
        }
    }
    Ok(m)
}

/// Inverse of [`extract_patches`].
pub fn place_patches<T: Real>(patches: &Matrix<T>, size: usize, p: usize) -> Vec<T> {
    let grid = size / p;
    assert_eq!(patches.shape(), (grid * grid, 3 * p * p), "patch matrix shape mismatch");
    let mut out = vec![T::zero(); size * size * 3];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row(gy * grid + gx);
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * size + gx * p) * 3;
                out[start..start + 3 * p].copy_from_slice(&row[py * 3 * p..(py + 1) * 3 * p]);
            }
        }
    }
    out
}

/// Patch tokens: linear projection of each patch to the token width.
pub fn patchify<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, proj: LinearIds, patches: Var) -> Var {
    linear(g, store, proj, patches)
}

/// Inverse arrangement of patch rows back into an interleaved RGB buffer.
pub fn unpatchify<T: Real>(tokens: &Matrix<T>, size: usize, p: usize) -> Vec<T> {
    place_patches(tokens, size, p)
}

/// Fixed 2-D sine/cosine position table, `grid² × width`. The first half of
/// the channels encodes the column, the second half the row.
pub fn position_table<T: Real>(grid: usize, width: usize) -> Matrix<T> {
    let half = width / 2;
    let quarter = half / 2;
    Matrix::from_fn(grid * grid, width, |cell, ch| {
        let (row, col) = (cell / grid, cell % grid);
        let (pos, ch) = if ch < half { (col, ch) } else { (row, ch - half) };
        let i = ch % quarter;
        let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        let arg = pos as f64 * freq;
        lit(if ch < quarter { arg.sin() } else { arg.cos() })
    })
}

pub fn add_positions<T: Real>(g: &mut Graph<T>, tokens: Var, grid: usize, width: usize) -> Var {
    let pos = g.constant(position_table(grid, width));
    g.add(tokens, pos)
}

/// Sinusoidal features of `t ∈ [0, 1]`: `[cos(1000 t ω_i)…, sin(1000 t ω_i)…]`.
pub fn timestep_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    Ok(out)
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
pub fn timestep_embed<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, ids: &ModelIds, t: f64) -> Result<Var> {
    let width = store.value(ids.time_fc1.weight).cols();
    let feats = timestep_features(t, width)?;
    let x = g.constant(Matrix::row_vector(feats.into_iter().map(lit).collect()));
    let h = linear(g, store, ids.time_fc1, x);
    let h = g.silu(h);
    Ok(linear(g, store, ids.time_fc2, h))
}

pub fn prompt_tokens<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, table: ParamId, prompt: &[usize]) -> Result<Var> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must contain at least the begin token".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&id| id >= Vocab::size()) {
        return Err(Error::InvalidArgument(format!("prompt token id {bad} outside vocabulary")));
    }
    let table = g.param(store, table);
    Ok(g.gather_rows(table, prompt))
}

/// Conditioning vector: timestep embedding plus mean-pooled prompt embedding.
pub fn conditioning<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ids: &ModelIds,
    t: f64,
    prompt: &[usize],
) -> Result<Var> {
    let temb = timestep_embed(g, store, ids, t)?;
    let toks = prompt_tokens(g, store, ids.text_embed, prompt)?;
    let pooled = g.mean_rows(toks);
    Ok(g.add(temb, pooled))
}

pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, ids: LinearIds, x: Var) -> Var {
    let w = g.param(store, ids.weight);
    let b = g.param(store, ids.bias);
    g.linear(x, w, Some(b))
}

/// `x · (W + s·B·A)ᵀ + bias`, evaluated as `x·Wᵀ + s·(x·Aᵀ)·Bᵀ + bias`.
pub fn adapted_linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, ids: AdaptedIds, x: Var, lora_scale: f64) -> Var {
    let y = linear(g, store, ids.base, x);
    match ids.lora {
        Some((a, b)) => {
            let a = g.param(store, a);
            let b = g.param(store, b);
            let down = g.matmul_bt(x, a);
            let up = g.matmul_bt(down, b);
            let up = g.scale(up, lit(lora_scale));
            g.add(y, up)
        }
        None => y,
    }
}

/// `γ ⊙ normalize(h) + β` with `γ = 1 + scale`; normalization is per token
/// over channels.
pub fn ada_layer_norm<T: Real>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(h, LN_EPS);
    let gamma = g.one_plus(scale);
    let m = g.mul_row(n, gamma);
    g.add_row(m, shift)
}

/// Projects the activated conditioning vector and splits it into `chunks`
/// equal rows.
pub fn modulation<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, ids: LinearIds, cond_act: Var, chunks: usize) -> Vec<Var> {
    let m = linear(g, store, ids, cond_act);
    let w = g.shape(m).1 / chunks;
    (0..chunks).map(|i| g.slice_cols(m, i * w, w)).collect()
}

/// Scaled dot-product attention with `heads` heads. Returns the merged output
/// and the per-head attention weight matrices.
pub fn multi_head_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> (Var, Vec<Var>) {
    let width = g.shape(q).1;
    let dh = width / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let s = g.matmul_bt(qh, kh);
        let s = g.scale(s, scale);
        let p = g.softmax(s);
        weights.push(p);
        outs.push(g.matmul(p, vh));
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, weights)
}

pub fn mlp<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, s: &StreamIds, x: Var) -> Var {
    let h = linear(g, store, s.fc1, x);
    let h = g.gelu(h);
    linear(g, store, s.fc2, h)
}

/// Output of [`joint_attention`] before residual gating.
pub struct JointAttention {
    pub img: Var,
    pub txt: Var,
    pub weights: Vec<Var>,
}

/// One softmax attention over the concatenation of image and prompt tokens;
/// each stream uses its own QKV and output projections.
pub fn joint_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &BlockIds,
    img: Var,
    txt: Var,
    heads: usize,
) -> JointAttention {
    joint_attention_scaled(g, store, block, img, txt, heads, 1.0)
}

/// [`joint_attention`] with a LoRA scale for adapted projections.
pub fn joint_attention_scaled<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &BlockIds,
    img: Var,
    txt: Var,
    heads: usize,
    lora_scale: f64,
) -> JointAttention {
    let n_img = g.shape(img).0;
    let n_txt = g.shape(txt).0;
    let qi = adapted_linear(g, store, block.img.q, img, lora_scale);
    let ki = adapted_linear(g, store, block.img.k, img, lora_scale);
    let vi = adapted_linear(g, store, block.img.v, img, lora_scale);
    let qt = adapted_linear(g, store, block.ctx.q, txt, lora_scale);
    let kt = adapted_linear(g, store, block.ctx.k, txt, lora_scale);
    let vt = adapted_linear(g, store, block.ctx.v, txt, lora_scale);
    let q = g.concat_rows(&[qi, qt]);
    let k = g.concat_rows(&[ki, kt]);
    let v = g.concat_rows(&[vi, vt]);
    let (a, weights) = multi_head_attention(g, q, k, v, heads);
    let a_img = g.slice_rows(a, 0, n_img);
    let img_out = adapted_linear(g, store, block.img.o, a_img, lora_scale);
    let txt_out = if n_txt > 0 {
        let a_txt = g.slice_rows(a, n_img, n_txt);
        adapted_linear(g, store, block.ctx.o, a_txt, lora_scale)
    } else {
        txt
    };
    JointAttention { img: img_out, txt: txt_out, weights }
}

fn gated_residual<T: Real>(g: &mut Graph<T>, h: Var, update: Var, gate: Var) -> Var {
    let u = g.mul_row(update, gate);
    g.add(h, u)
}

/// AdaLayerNorm → joint attention → MLP on both streams, each with gated
/// residual connections.
pub fn mmdit_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &BlockIds,
    img: Var,
    txt: Var,
    cond_act: Var,
    heads: usize,
) -> (Var, Var) {
    let mi = modulation(g, store, block.img.modulation, cond_act, 6);
    let mt = modulation(g, store, block.ctx.modulation, cond_act, 6);
    let xi = ada_layer_norm(g, img, mi[0], mi[1]);
    let xt = ada_layer_norm(g, txt, mt[0], mt[1]);
    let att = joint_attention(g, store, block, xi, xt, heads);
    let img = gated_residual(g, img, att.img, mi[2]);
    let txt = gated_residual(g, txt, att.txt, mt[2]);

    let xi = ada_layer_norm(g, img, mi[3], mi[4]);
    let ui = mlp(g, store, &block.img, xi);
    let img = gated_residual(g, img, ui, mi[5]);
    let xt = ada_layer_norm(g, txt, mt[3], mt[4]);
    let ut = mlp(g, store, &block.ctx, xt);
    let txt = gated_residual(g, txt, ut, mt[5]);
    (img, txt)
}

/// AdaLayerNorm followed by the projection back to patch space.
pub fn final_layer<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, ids: &ModelIds, img: Var, cond_act: Var) -> Var {
    let m = modulation(g, store, ids.final_mod, cond_act, 2);
    let x = ada_layer_norm(g, img, m[0], m[1]);
    linear(g, store, ids.final_proj, x)
}
