//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Criterion numbers given as arguments
//! select a subset: `cargo test --release --test acceptance -- 1 2 5`.
//!
//! The overfit experiment (criteria 8 and 9) trains three models and is only
//! run when requested by number or with `all`; otherwise it prints SKIP.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use instassemble::assemble::{assemble, assemble_block_forward, assembling_attention, AssembleContext};
use instassemble::autograd::Graph;
use instassemble::diffusion::{
    initial_noise, integrate, loss_and_grads, model_from_checkpoint, prepare_model, training_loss, Example,
    SampleConfig, TrainConfig, TrainItem, Trainer, VelocityField,
};
use instassemble::eval::{evaluate_ground_truth, evaluate_model, LgsReport};
use instassemble::geometry::{bbox_to_crop, dense_sample, density_map, iou, BBox, CropRegion};
use instassemble::layout_encoder::{encode_layout, Instance, InstanceContent, Layout};
use instassemble::model::BlockIds;
use instassemble::params::{Checkpoint, ParamId};
use instassemble::synth_data::{
    annotation_to_layout, generate_scene, load_dataset, write_dataset, Annotation, DatasetItem, SceneConfig,
};
use instassemble::tensor::{lit, Matrix, Real};
use instassemble::vocab::Vocab;
use instassemble::{Model, ModelConfig, Phase, RgbImage, Toggles};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Rng8 = ChaCha8Rng;

fn uniform<T: Real>(rng: &mut Rng8, lo: f64, hi: f64) -> T {
    lit(rng.random_range(lo..hi))
}

fn random_matrix<T: Real>(rows: usize, cols: usize, rng: &mut Rng8) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| uniform(rng, -1.0, 1.0))
}

/// Overwrites every parameter accepted by `pick` with uniform noise.
fn randomize<T: Real>(model: &mut Model<T>, rng: &mut Rng8, pick: impl Fn(&str) -> bool) {
    let ids: Vec<ParamId> = model.params.iter().filter(|(_, p)| pick(&p.name)).map(|(id, _)| id).collect();
    for id in ids {
        for x in model.params.value_mut(id).data_mut() {
            *x = uniform(rng, -0.5, 0.5);
        }
    }
}

fn random_box(rng: &mut Rng8) -> BBox {
    let w = rng.random_range(0.05..1.0);
    let h = rng.random_range(0.05..1.0);
    BBox::new(rng.random_range(0.0..=1.0 - w), rng.random_range(0.0..=1.0 - h), w, h).unwrap()
}

fn random_tokens(rng: &mut Rng8, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..Vocab::size())).collect()
}

fn random_layout(rng: &mut Rng8, n: usize) -> Layout {
    let instances = (0..n)
        .map(|_| {
            let bbox = random_box(rng);
            if rng.random_bool(0.25) {
                let (w, h) = (rng.random_range(1..6), rng.random_range(1..6));
                let img = RgbImage::from_vec(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
                Instance { content: InstanceContent::Image(img), bbox }
            } else {
                Instance::text(random_tokens(rng, 3), bbox)
            }
        })
        .collect();
    Layout::new(instances)
}

// ---------------------------------------------------------------------------
// 1. Identity
// ---------------------------------------------------------------------------

fn identity() -> Outcome {
    let mut rng = Rng8::seed_from_u64(1);
    let mut failures = Vec::new();
    for case in 0..100u64 {
        let grid = rng.random_range(1..=4usize);
        let toggles = Toggles {
            assemble: rng.random_bool(0.5),
            cascaded: rng.random_bool(0.5),
            lora: rng.random_bool(0.5),
            densesample: rng.random_bool(0.5),
        };
        let cfg = ModelConfig {
            image_size: grid * 2,
            patch_size: 2,
            width: 16,
            blocks: rng.random_range(1..=3),
            heads: 2,
            mlp_ratio: 2,
            max_instances: 8,
            toggles,
            ..Default::default()
        };
        let mut model = Model::<f32>::new(cfg, case).unwrap();
        randomize(&mut model, &mut rng, |n| n.starts_with("base."));
        model.init_layout_from_base();
        let empty = case % 2 == 0;
        if empty {
            // Nothing in the layout branch may matter for an empty layout.
            randomize(&mut model, &mut rng, |n| n.starts_with("assemble."));
        } else {
            // Everything except the zero-initialized gates and LoRA B.
            randomize(&mut model, &mut rng, |n| {
                n.starts_with("assemble.") && !n.contains(".mod.") && !n.ends_with(".lora_b")
            });
        }
        let layout = if empty { Layout::default() } else { {
            let n = rng.random_range(1..=4);
            random_layout(&mut rng, n)
        } };
        let z = random_matrix::<f32>(grid * grid, model.config.patch_dim(), &mut rng);
        let t = rng.random_range(0.0..=1.0);
        let prompt = random_tokens(&mut rng, 6);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let base = model.base_forward(&mut g, zv, t, &prompt).unwrap();
        let zv = g.constant(z);
        let casc = model.cascaded_forward(&mut g, zv, t, &prompt, &layout).unwrap();
        let (a, b) = (g.value(base), g.value(casc));
        if !(a.bit_eq(b) && a.data().iter().any(|x| *x != 0.0)) {
            failures.push(case);
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!("100 random inputs (50 empty layouts, 50 fresh layout branches), bit-identical; failures {failures:?}"),
    )
}

// ---------------------------------------------------------------------------
// 2. Brute-force equivalence
// ---------------------------------------------------------------------------

/// Dense masked reference in f64: every instance attends over all image
/// cells plus its own token with keys outside its crop set to -inf.
fn dense_masked_reference(
    model: &Model<f64>,
    block: &BlockIds,
    img: &Matrix<f64>,
    inst: &Matrix<f64>,
    crops: &[CropRegion],
    width: usize,
) -> (Matrix<f64>, Matrix<f64>) {
    let p = &model.params;
    let c = img.cols();
    let heads = model.config.heads;
    let dh = c / heads;
    let scale = model.config.lora_scale();
    let project = |ids: instassemble::model::AdaptedIds, x: &[f64]| -> Vec<f64> {
        let w = p.value(ids.base.weight);
        let bias = p.value(ids.base.bias);
        (0..c)
            .map(|o| {
                let mut acc = bias.get(0, o);
                for j in 0..c {
                    let mut wij = w.get(o, j);
                    if let Some((a, b)) = ids.lora {
                        let (a, b) = (p.value(a), p.value(b));
                        wij += scale * (0..a.rows()).map(|r| b.get(o, r) * a.get(r, j)).sum::<f64>();
                    }
                    acc += wij * x[j];
                }
                acc
            })
            .collect()
    };
    let cells = img.rows();
    let mut sums = vec![vec![0.0; c]; cells];
    let mut counts = vec![0usize; cells];
    let mut inst_out = Matrix::zeros(crops.len(), c);
    for (i, crop) in crops.iter().enumerate() {
        let token = |t: usize| if t < cells { img.row(t).to_vec() } else { inst.row(i).to_vec() };
        let stream = |t: usize| if t < cells { &block.img } else { &block.ctx };
        let visible = |t: usize| t == cells || crop.contains(t % width, t / width);
        let q: Vec<Vec<f64>> = (0..=cells).map(|t| project(stream(t).q, &token(t))).collect();
        let k: Vec<Vec<f64>> = (0..=cells).map(|t| project(stream(t).k, &token(t))).collect();
        let v: Vec<Vec<f64>> = (0..=cells).map(|t| project(stream(t).v, &token(t))).collect();
        for t in (0..=cells).filter(|&t| visible(t)) {
            let mut attended = vec![0.0; c];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = (0..=cells)
                    .map(|u| {
                        if !visible(u) {
                            return f64::NEG_INFINITY;
                        }
                        r.clone().map(|d| q[t][d] * k[u][d]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for u in 0..=cells {
                    for d in r.clone() {
                        attended[d] += e[u] / z * v[u][d];
                    }
                }
            }
            let out = project(stream(t).o, &attended);
            if t < cells {
                sums[t].iter_mut().zip(&out).for_each(|(s, o)| *s += o);
                counts[t] += 1;
            } else {
                inst_out.row_mut(i).copy_from_slice(&out);
            }
        }
    }
    let merged = Matrix::from_fn(cells, c, |cell, d| {
        if counts[cell] == 0 {
            img.get(cell, d)
        } else {
            sums[cell][d] / counts[cell] as f64
        }
    });
    (merged, inst_out)
}

fn random_crop(rng: &mut Rng8, w: usize, h: usize) -> CropRegion {
    let c0 = rng.random_range(0..w);
    let r0 = rng.random_range(0..h);
    CropRegion {
        col_start: c0,
        col_end: rng.random_range(c0 + 1..=w),
        row_start: r0,
        row_end: rng.random_range(r0 + 1..=h),
    }
}

fn brute_force() -> Outcome {
    let mut rng = Rng8::seed_from_u64(2);
    let cases = 250;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let (w, h) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
        let width = [4usize, 8][rng.random_range(0..2)];
        let heads = [1usize, 2][rng.random_range(0..2)];
        let n = rng.random_range(1..=3usize);
        let cfg = ModelConfig { image_size: 4, patch_size: 2, width, blocks: 1, heads, ..Default::default() };
        let mut m32 = Model::<f32>::new(cfg, case).unwrap();
        randomize(&mut m32, &mut rng, |n| n.starts_with("assemble.blocks."));
        let m64 = m32.cast::<f64>();
        let block = m32.ids().assemble_blocks[0];
        let crops: Vec<CropRegion> = (0..n).map(|_| random_crop(&mut rng, w, h)).collect();
        let img = random_matrix::<f32>(w * h, width, &mut rng);
        let inst = random_matrix::<f32>(n, width, &mut rng);

        let mut g = Graph::<f32>::new();
        let (vi, vl) = (g.constant(img.clone()), g.constant(inst.clone()));
        let ctx = AssembleContext { crops: &crops, grid_width: w, heads, lora_scale: m32.config.lora_scale(), per_instance: true };
        let upd = assembling_attention(&mut g, &m32.params, &block, &ctx, vi, vl);
        let parts: Vec<Matrix<f32>> = upd.image.iter().map(|(v, _)| g.value(*v).clone()).collect();
        let merged = assemble(&parts, &crops, &density_map(&crops, w, h), &img).unwrap();

        let (want, want_inst) = dense_masked_reference(&m64, &block, &img.cast(), &inst.cast(), &crops, w);
        let d = merged.cast::<f64>().max_abs_diff(&want).max(g.value(upd.instances).cast::<f64>().max_abs_diff(&want_inst));
        worst = worst.max(d);
    }
    Outcome::new(worst <= 1e-6, format!("{cases} cases (W,H ≤ 4, N ≤ 3, C ≤ 8), max abs diff {worst:.2e} ≤ 1e-6"))
}

// ---------------------------------------------------------------------------
// 3. Gradient oracle
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
/// Magnitude floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Central differences over every entry of `ids`; returns (worst relative error, entries checked).
fn check_params(
    model: &mut Model<f64>,
    ids: &[ParamId],
    analytic: &HashMap<ParamId, Matrix<f64>>,
    objective: impl Fn(&Model<f64>) -> f64,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &id in ids {
        let len = model.params.value(id).len();
        for k in 0..len {
            let orig = model.params.value(id).data()[k];
            model.params.value_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = objective(model);
            model.params.value_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = objective(model);
            model.params.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(rel_err(a, numeric));
            count += 1;
        }
    }
    (worst, count)
}

fn grad_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        width: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        dense_k: 2,
        fourier_freqs: 2,
        visual_patch: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        max_instances: 4,
        toggles: Toggles::default(),
    }
}

fn grad_layout() -> Layout {
    let crop = RgbImage::from_vec(3, 2, (0..18).map(|i| (i as f32 * 0.37).sin().abs()).collect()).unwrap();
    Layout::new(vec![
        Instance::described("red circle", BBox::new(0.0, 0.0, 0.6, 0.7).unwrap()),
        Instance { content: InstanceContent::Image(crop), bbox: BBox::new(0.4, 0.3, 0.6, 0.7).unwrap() },
    ])
}

fn weights(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.73 + phase).cos()).collect()
}

fn weighted_sum(g: &Graph<f64>, v: instassemble::autograd::Var, w: &[f64]) -> f64 {
    g.value(v).data().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn gradient_oracle() -> Outcome {
    let mut rng = Rng8::seed_from_u64(3);
    let mut model = Model::<f64>::new(grad_config(), 3).unwrap();
    randomize(&mut model, &mut rng, |_| true);
    let all_ids: Vec<ParamId> = model.params.ids().collect();
    let layout = grad_layout();
    let c = model.config.width;
    let mut parts = Vec::new();

    // Layout encoder: Σ w ⊙ tokens.
    {
        let w = weights(2 * c, 0.1);
        let mut g = Graph::new().with_all_param_grads();
        let tok = encode_layout(&mut g, &model, &layout).unwrap();
        let wv = g.constant(Matrix::from_vec(2, c, w.clone()));
        let prod = g.mul(tok, wv);
        let loss = g.mean_rows(prod);
        let ones = g.constant(Matrix::filled(c, 1, 2.0));
        let loss = g.matmul(loss, ones);
        let grads = g.backward(loss);
        let analytic: HashMap<ParamId, Matrix<f64>> = grads.params().map(|(id, m)| (id, m.clone())).collect();
        let enc: Vec<ParamId> =
            all_ids.iter().copied().filter(|&id| model.params.name(id).starts_with("assemble.encoder.")).collect();
        let (e, n) = check_params(&mut model, &enc, &analytic, |m| {
            let mut g = Graph::new();
            let tok = encode_layout(&mut g, m, &layout).unwrap();
            weighted_sum(&g, tok, &w)
        });
        parts.push(("layout_encoder", e, n));
    }

    // Assemble block: Σ w ⊙ (image', instance') w.r.t. parameters and both inputs.
    {
        let grid = 2;
        let crops = [bbox_to_crop(&layout.instances[0].bbox, grid, grid), bbox_to_crop(&layout.instances[1].bbox, grid, grid)];
        let img = random_matrix::<f64>(grid * grid, c, &mut rng);
        let inst = random_matrix::<f64>(2, c, &mut rng);
        let cond = random_matrix::<f64>(1, c, &mut rng);
        let (wi, wl) = (weights(grid * grid * c, 0.2), weights(2 * c, 0.9));
        let block = model.ids().assemble_blocks[0];
        let run = |m: &Model<f64>, img: &Matrix<f64>, inst: &Matrix<f64>, grads: bool| {
            let mut g = if grads { Graph::new().with_all_param_grads() } else { Graph::new() };
            let (vi, vl, vc) = (g.input(img.clone()), g.input(inst.clone()), g.constant(cond.clone()));
            let ctx = AssembleContext { crops: &crops, grid_width: grid, heads: m.config.heads, lora_scale: m.config.lora_scale(), per_instance: true };
            let (oi, ol) = assemble_block_forward(&mut g, &m.params, &block, &ctx, vi, vl, vc);
            let value = weighted_sum(&g, oi, &wi) + weighted_sum(&g, ol, &wl);
            (g, vi, vl, oi, ol, value)
        };
        let (mut g, vi, vl, oi, ol, _) = run(&model, &img, &inst, true);
        let a = g.constant(Matrix::from_vec(grid * grid * c, 1, wi.clone()));
        let b = g.constant(Matrix::from_vec(2 * c, 1, wl.clone()));
        let fi = flatten(&mut g, oi);
        let fl = flatten(&mut g, ol);
        let li = g.matmul(fi, a);
        let ll = g.matmul(fl, b);
        let loss = g.add(li, ll);
        let grads = g.backward(loss);
        let analytic: HashMap<ParamId, Matrix<f64>> = grads.params().map(|(id, m)| (id, m.clone())).collect();
        let blk: Vec<ParamId> =
            all_ids.iter().copied().filter(|&id| model.params.name(id).starts_with("assemble.blocks.0.")).collect();
        let (mut e, mut n) = check_params(&mut model, &blk, &analytic, |m| run(m, &img, &inst, false).5);
        for (which, grad) in [(0, grads.of(vi).unwrap().clone()), (1, grads.of(vl).unwrap().clone())] {
            let base = if which == 0 { img.clone() } else { inst.clone() };
            for k in 0..base.len() {
                let eval = |delta: f64| {
                    let mut x = base.clone();
                    x.data_mut()[k] += delta;
                    if which == 0 { run(&model, &x, &inst, false).5 } else { run(&model, &img, &x, false).5 }
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                e = e.max(rel_err(grad.data()[k], numeric));
                n += 1;
            }
        }
        parts.push(("assemble_block", e, n));
    }

    // Full training loss with a layout-conditioned batch.
    {
        let size = model.config.image_size;
        let batch: Vec<TrainItem<f64>> = (0..2)
            .map(|i| TrainItem {
                x: (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
                eps: (0..size * size * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                t: [0.3, 0.8][i],
                prompt: Vocab::encode_prompt("a red circle and a blue square"),
                layout: Some(layout.clone()),
            })
            .collect();
        let (_, analytic) = loss_and_grads(&model, &batch, true).unwrap();
        let (e, n) = check_params(&mut model, &all_ids, &analytic, |m| training_loss(m, &batch).unwrap());
        parts.push(("training_loss", e, n));
    }

    let worst = parts.iter().map(|p| p.1).fold(0.0, f64::max);
    let detail = parts.iter().map(|(name, e, n)| format!("{name} {e:.1e} over {n}")).collect::<Vec<_>>().join(", ");
    Outcome::new(worst <= 1e-4, format!("C=8, 2x2 grid, N=2, f64; max relative error ≤ 1e-4: {detail}"))
}

fn flatten(g: &mut Graph<f64>, v: instassemble::autograd::Var) -> instassemble::autograd::Var {
    let (rows, _) = g.shape(v);
    let parts: Vec<_> = (0..rows).map(|r| g.slice_rows(v, r, 1)).collect();
    g.concat_cols(&parts)
}

// ---------------------------------------------------------------------------
// 4 and 6. Sampler
// ---------------------------------------------------------------------------

/// `v = ε − x` with call counting.
struct LinearField {
    x: Vec<f32>,
    eps: Vec<f32>,
    calls: Vec<bool>,
}

impl VelocityField for LinearField {
    fn base(&mut self, _: &[f32], _: f64) -> instassemble::Result<Vec<f32>> {
        self.calls.push(false);
        Ok(self.eps.iter().zip(&self.x).map(|(e, x)| e - x).collect())
    }

    fn cascaded(&mut self, _: &[f32], _: f64) -> instassemble::Result<Vec<f32>> {
        self.calls.push(true);
        Ok(self.eps.iter().zip(&self.x).map(|(e, x)| e - x).collect())
    }
}

fn flow_exactness() -> Outcome {
    let mut rng = Rng8::seed_from_u64(4);
    let n = 3 * 32 * 32;
    let eps = initial_noise(4, n);
    let x: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut errs = Vec::new();
    for steps in [1usize, 4, 50] {
        let mut f = LinearField { x: x.clone(), eps: eps.clone(), calls: vec![] };
        let out = integrate(&mut f, eps.clone(), &SampleConfig { steps, layout_ratio: 0.3, seed: 4 }).unwrap();
        errs.push(out.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max));
    }
    let pass = errs.iter().all(|&e| e <= 1e-5);
    Outcome::new(pass, format!("S=1/4/50 max abs error {:.1e}/{:.1e}/{:.1e} ≤ 1e-5", errs[0], errs[1], errs[2]))
}

fn schedule() -> Outcome {
    let mut f = LinearField { x: vec![0.5; 12], eps: vec![1.0; 12], calls: vec![] };
    integrate(&mut f, vec![1.0; 12], &SampleConfig { steps: 10, layout_ratio: 0.3, seed: 0 }).unwrap();
    let expected = [vec![true; 3], vec![false; 7]].concat();
    let casc = f.calls.iter().filter(|c| **c).count();
    Outcome::new(
        f.calls == expected,
        format!("S=10, rho=0.3: {casc} cascaded then {} base calls (expected 3 then 7)", f.calls.len() - casc),
    )
}

// ---------------------------------------------------------------------------
// 5. Density and geometry
// ---------------------------------------------------------------------------

fn geometry() -> Outcome {
    let mut rng = Rng8::seed_from_u64(5);
    let mut density_ok = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..=16usize), rng.random_range(1..=16usize));
        let n = rng.random_range(0..=8usize);
        let crops: Vec<CropRegion> = (0..n).map(|_| random_crop(&mut rng, w, h)).collect();
        let m = density_map(&crops, w, h);
        let brute = (0..h).all(|row| {
            (0..w).all(|col| {
                let count = crops
                    .iter()
                    .filter(|c| c.col_start <= col && col < c.col_end && c.row_start <= row && row < c.row_end)
                    .count();
                m.get(col, row) as usize == count
            })
        });
        density_ok += usize::from(brute && m.max() as usize <= n);
    }
    let mut dense_ok = 0;
    for _ in 0..1000 {
        let b = random_box(&mut rng);
        let k = rng.random_range(1..=6usize);
        let grid = dense_sample(&b, k).unwrap();
        let inside = grid.points.iter().all(|&(x, y)| b.x1 <= x && x < b.x2() && b.y1 <= y && y < b.y2());
        dense_ok += usize::from(grid.points.len() == k * k && inside);
    }
    let a = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
    let b = BBox::new(0.25, 0.25, 0.5, 0.5).unwrap();
    let far = BBox::new(0.6, 0.6, 0.3, 0.3).unwrap();
    let iou_ok = iou(&a, &b) == 1.0 / 7.0 && iou(&b, &a) == 1.0 / 7.0 && iou(&a, &a) == 1.0 && iou(&a, &far) == 0.0;
    Outcome::new(
        density_ok == 1000 && dense_ok == 1000 && iou_ok,
        format!(
            "density map {density_ok}/1000, dense_sample {dense_ok}/1000, IoU cases (1/7, identical, disjoint) {}",
            if iou_ok { "exact" } else { "wrong" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Ground-truth evaluation
// ---------------------------------------------------------------------------

fn ground_truth_eval() -> Outcome {
    let mut items = Vec::new();
    for (preset, seeds) in [("sparse", 0..100u64), ("dense", 100..200u64)] {
        let cfg = SceneConfig::preset(preset, 64).unwrap();
        for seed in seeds {
            let (img, annotation, _) = generate_scene(seed, &cfg).unwrap();
            items.push(DatasetItem { id: format!("{preset}{seed}"), annotation, image: Some(img) });
        }
    }
    let r = evaluate_ground_truth(&items).unwrap();
    Outcome::new(
        r.miou >= 0.95 && r.color_acc >= 0.98 && r.shape_acc >= 0.98,
        format!(
            "200 renders ({} instances): mIoU {:.4} ≥ 0.95, color {:.4} / shape {:.4} ≥ 0.98",
            r.n_instances, r.miou, r.color_acc, r.shape_acc
        ),
    )
}

// ---------------------------------------------------------------------------
// 8 and 9. Overfit experiment and assemble ablation
// ---------------------------------------------------------------------------

const EXP_IMAGE: usize = 32;
const EXP_TRAIN_SCENES: usize = 256;
const EXP_HELD_OUT: usize = 32;
const EXP_BASE_STEPS: u64 = 40_000;
const EXP_LAYOUT_STEPS: u64 = 20_000;
const EXP_BATCH: usize = 8;
const EXP_LR: f64 = 3e-3;
const EXP_MIN_CONDITIONED: f64 = 0.5;
const EXP_MAX_UNCONDITIONED: f64 = 0.15;

fn experiment_config(assemble: bool) -> ModelConfig {
    ModelConfig {
        image_size: EXP_IMAGE,
        patch_size: 4,
        width: 64,
        blocks: 2,
        heads: 4,
        mlp_ratio: 2,
        dense_k: 2,
        fourier_freqs: 4,
        visual_patch: 4,
        lora_rank: 8,
        lora_alpha: 8.0,
        max_instances: 8,
        toggles: Toggles { assemble, ..Toggles::default() },
    }
}

fn experiment_sampling() -> SampleConfig {
    SampleConfig { seed: 1_000, ..SampleConfig::default() }
}

fn train_layout(base: &Checkpoint, assemble: bool, data: &[Example]) -> Model<f32> {
    let model = prepare_model(experiment_config(assemble), Phase::Layout, Some(base), 1).unwrap();
    let cfg = TrainConfig { steps: EXP_LAYOUT_STEPS, batch_size: EXP_BATCH, lr: Some(EXP_LR), seed: 2, checkpoint_every: 0 };
    let mut t = Trainer::new(model, Phase::Layout, cfg, data.to_vec()).unwrap();
    t.run(None, |_, _| {}).unwrap();
    t.model
}

fn overfit_experiment() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneConfig::sparse(EXP_IMAGE);
    write_dataset(&dir.path().join("train"), EXP_TRAIN_SCENES, 1, &scene).unwrap();
    write_dataset(&dir.path().join("held_out"), EXP_HELD_OUT, 2, &scene).unwrap();
    let train = load_dataset(&dir.path().join("train")).unwrap();
    let held_out = load_dataset(&dir.path().join("held_out")).unwrap();
    let data: Vec<Example> = train.iter().map(|i| i.to_example(EXP_IMAGE).unwrap()).collect();

    let model = prepare_model(experiment_config(true), Phase::Base, None, 0).unwrap();
    let cfg = TrainConfig { steps: EXP_BASE_STEPS, batch_size: EXP_BATCH, lr: Some(EXP_LR), seed: 0, checkpoint_every: 0 };
    let mut trainer = Trainer::new(model, Phase::Base, cfg, data.clone()).unwrap();
    trainer.run(None, |_, _| {}).unwrap();
    let base_ck = trainer.checkpoint();
    let sc = experiment_sampling();

    let base = model_from_checkpoint(&base_ck).unwrap();
    let uncond = evaluate_model(&base, &held_out, &sc, false).unwrap();
    let full = evaluate_model(&train_layout(&base_ck, true, &data), &held_out, &sc, true).unwrap();
    let joint = evaluate_model(&train_layout(&base_ck, false, &data), &held_out, &sc, true).unwrap();

    let summary = |r: &LgsReport| format!("mIoU {:.4} (color {:.3}, shape {:.3})", r.miou, r.color_acc, r.shape_acc);
    let eight = Outcome::new(
        full.miou >= EXP_MIN_CONDITIONED && uncond.miou <= EXP_MAX_UNCONDITIONED,
        format!(
            "{EXP_BASE_STEPS} base + {EXP_LAYOUT_STEPS} layout steps on {EXP_TRAIN_SCENES} scenes, {EXP_HELD_OUT} held-out layouts: \
             conditioned {} ≥ {EXP_MIN_CONDITIONED}, unconditioned {} ≤ {EXP_MAX_UNCONDITIONED}",
            summary(&full),
            summary(&uncond)
        ),
    );
    let nine = Outcome::new(
        joint.miou < full.miou,
        format!("no-assemble mIoU {:.4} < full model {:.4}", joint.miou, full.miou),
    );
    (eight, nine)
}

// ---------------------------------------------------------------------------
// 10. Persistence
// ---------------------------------------------------------------------------

const SAMPLE_FRAGMENT: &str = r#"{
  "global_caption": "a bedroom",
  "image_info": {"height": 1024, "width": 1024},
  "instance_info": [
{
    "bbox": [129,489,283,642],
    "description": "nightstand",
    "detail_description": "The nightstand is dark brown, compact, with a drawer."
}
]
}"#;

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { image_size: 8, patch_size: 4, width: 8, blocks: 1, heads: 2, ..Default::default() };
    let scene = SceneConfig::sparse(8);
    let data: Vec<Example> = (0..4)
        .map(|i| {
            let (img, ann, layout) = generate_scene(i, &scene).unwrap();
            Example { pixels: img.into_vec(), prompt: Vocab::encode_prompt(&ann.global_caption), layout }
        })
        .collect();
    let model = prepare_model(cfg, Phase::Base, None, 0).unwrap();
    let mut t = Trainer::new(model, Phase::Base, TrainConfig { steps: 3, batch_size: 2, ..Default::default() }, data).unwrap();
    t.run(None, |_, _| {}).unwrap();
    let ck = t.checkpoint();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let restored = model_from_checkpoint(&back).unwrap();
    let same_params = t.model.params.iter().all(|(id, p)| restored.params.value(id).bit_eq(&p.value));
    let pixels: Vec<f32> = (0..8 * 8 * 3).map(|i| (i as f32 * 0.1).sin()).collect();
    let prompt = Vocab::encode_prompt("a red circle");
    let v1 = t.model.velocity_pixels(&pixels, 0.5, &prompt, None).unwrap();
    let v2 = restored.velocity_pixels(&pixels, 0.5, &prompt, None).unwrap();
    let ckpt_ok = back == ck && back.to_bytes() == ck.to_bytes() && same_params && v1 == v2;

    let (_, generated, _) = generate_scene(11, &SceneConfig::dense(64)).unwrap();
    let fragment = Annotation::from_json(SAMPLE_FRAGMENT, std::path::Path::new("fragment.json")).unwrap();
    let mut ann_ok = fragment.instance_info[0].bbox == [129.0, 489.0, 283.0, 642.0]
        && fragment.instance_info[0].description == "nightstand"
        && annotation_to_layout(&fragment).is_ok();
    for ann in [&generated, &fragment] {
        let p = dir.path().join("ann.json");
        instassemble::synth_data::write_annotation(&p, ann).unwrap();
        ann_ok &= instassemble::synth_data::read_annotation(&p).unwrap() == *ann;
    }
    Outcome::new(
        ckpt_ok && ann_ok,
        format!(
            "checkpoint save/load bit-exact: {ckpt_ok}; annotation JSON round-trip incl. sample fragment: {ann_ok}"
        ),
    )
}

type Row = (u32, Outcome);

fn report(results: &mut Vec<Row>, n: u32, name: &str, o: Outcome, timing: String) {
    println!("{} {n:>2} {name}: {} [{timing}]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push((n, o));
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let all = args.iter().any(|a| a == "all");
    let wanted: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| all || wanted.is_empty() || wanted.contains(&n);
    let long = |n: u32| all || wanted.contains(&n);
    let mut results = Vec::new();
    let criteria: [(u32, &str, fn() -> Outcome); 7] = [
        (1, "identity", identity),
        (2, "brute-force equivalence", brute_force),
        (3, "gradient oracle", gradient_oracle),
        (4, "flow exactness", flow_exactness),
        (5, "density/geometry", geometry),
        (6, "schedule", schedule),
        (7, "ground-truth evaluation", ground_truth_eval),
    ];
    for (n, name, f) in criteria {
        if run(n) {
            let t = Instant::now();
            let o = f();
            report(&mut results, n, name, o, format!("{:.1}s", t.elapsed().as_secs_f64()));
        }
    }
    if wanted.is_empty() && !all {
        for (n, name) in [(8, "overfit experiment"), (9, "assemble ablation")] {
            println!("SKIP {n:>2} {name}: long-running, select with `-- 8 9` or `-- all`");
        }
    }
    if long(8) || long(9) {
        let t = Instant::now();
        let (eight, nine) = overfit_experiment();
        let timing = format!("{:.1}s shared", t.elapsed().as_secs_f64());
        for (n, name, o) in [(8, "overfit experiment", eight), (9, "assemble ablation", nine)] {
            if long(n) {
                report(&mut results, n, name, o, timing.clone());
            }
        }
    }
    if run(10) {
        let t = Instant::now();
        let o = persistence();
        report(&mut results, 10, "persistence", o, format!("{:.1}s", t.elapsed().as_secs_f64()));
    }
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
