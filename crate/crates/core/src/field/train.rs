use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_image, sigmoid, trace_ray, FieldError, Ray, VoxelField, PARAMS_PER_VOXEL};
use crate::dataset::{View, ViewDataset};
use crate::heuristics::{residual_map, ResidualMap};
use crate::raster::BinaryMask;

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Rays per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on how many threads ran them.
const CHUNK_RAYS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub samples_per_ray: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_rays: 1024,
            lr_initial: 20000.0,
            lr_final: 200.0,
            momentum: 0.9,
            samples_per_ray: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidConfig(m.to_string()));
        if self.iterations == 0 || self.batch_rays == 0 || self.samples_per_ray == 0 {
            return bad("iterations, batch_rays and samples_per_ray must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0 && self.lr_initial.is_finite() && self.lr_final.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    /// Exponentially interpolated from `lr_initial` at the first iteration
    /// to `lr_final` at the last.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr_initial;
        }
        let f = iteration as f64 / (self.iterations - 1) as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(f)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), FieldError> {
        crate::raster::write_file(path, self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Means of consecutive non-overlapping windows.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks_exact(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: VoxelField,
    pub trace: LossTrace,
}

/// Sparse gradient of one ray's loss: `(voxel, [d density, d r, d g, d b])`
/// per stencil entry, possibly with repeated voxels.
#[derive(Debug, Clone, Default)]
pub struct RayGradient {
    pub entries: Vec<(usize, [f64; 4])>,
}

impl RayGradient {
    pub fn to_dense(&self, param_count: usize) -> Vec<f64> {
        let mut g = vec![0.0; param_count];
        for (v, d) in &self.entries {
            for c in 0..PARAMS_PER_VOXEL {
                g[v * PARAMS_PER_VOXEL + c] += d[c];
            }
        }
        g
    }
}

fn charbonnier(color: &[f64; 3], target: &[f64; 3]) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    for c in 0..3 {
        let e = color[c] - target[c];
        let s = (e * e + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
        loss += s / 3.0;
        grad[c] = e / (3.0 * s);
    }
    (loss, grad)
}

/// Loss `weight · Charbonnier(Ĉ(ray), target)` and its gradient with
/// respect to the raw field parameters. `jitter`, when given, holds one
/// in-stratum offset in `[0, 1)` per sample.
pub fn ray_loss_and_grad(
    field: &VoxelField,
    ray: &Ray,
    target: [f64; 3],
    weight: f64,
    samples: usize,
    jitter: Option<&[f64]>,
) -> Result<(f64, RayGradient), FieldError> {
    ray.validate()?;
    if samples == 0 {
        return Err(FieldError::InvalidConfig("samples must be at least 1".into()));
    }
    let mut grad = RayGradient::default();
    let loss = accumulate_ray(field, ray, target, weight, samples, jitter, |v, d| grad.entries.push((v, d)));
    Ok((loss, grad))
}

fn accumulate_ray(
    field: &VoxelField,
    ray: &Ray,
    target: [f64; 3],
    weight: f64,
    samples: usize,
    jitter: Option<&[f64]>,
    mut sink: impl FnMut(usize, [f64; 4]),
) -> f64 {
    let tr = trace_ray(field, ray, samples, jitter);
    let (loss, dl_dc) = charbonnier(&tr.out.color, &target);
    let dl_dc = dl_dc.map(|g| g * weight);
    // Color still to be composited behind sample k.
    let mut behind = tr.out.color;
    for k in 0..tr.weights.len() {
        let c = tr.colors[k];
        let w = tr.weights[k];
        for ch in 0..3 {
            behind[ch] -= w * c[ch];
        }
        let mut d_sigma = 0.0;
        for ch in 0..3 {
            d_sigma += dl_dc[ch] * (tr.trans_after[k] * c[ch] - behind[ch]);
        }
        d_sigma *= tr.delta;
        let raw = tr.raw[k];
        let d_raw = [
            d_sigma * sigmoid(raw[0]),
            dl_dc[0] * w * c[0] * (1.0 - c[0]),
            dl_dc[1] * w * c[1] * (1.0 - c[1]),
            dl_dc[2] * w * c[2] * (1.0 - c[2]),
        ];
        if d_raw.iter().all(|d| *d == 0.0) {
            continue;
        }
        let st = &tr.stencils[k];
        for j in 0..8 {
            let s = st.weights[j];
            sink(st.voxels[j], [d_raw[0] * s, d_raw[1] * s, d_raw[2] * s, d_raw[3] * s]);
        }
    }
    weight * loss
}

/// Dense gradient buffer that remembers which voxels it touched so it can
/// be cleared and read sparsely.
struct ChunkGrad {
    grad: Vec<f64>,
    touched: Vec<bool>,
    list: Vec<usize>,
}

impl ChunkGrad {
    fn new(voxels: usize) -> Self {
        Self {
            grad: vec![0.0; voxels * PARAMS_PER_VOXEL],
            touched: vec![false; voxels],
            list: Vec::new(),
        }
    }

    fn add(&mut self, v: usize, d: [f64; 4]) {
        if !self.touched[v] {
            self.touched[v] = true;
            self.list.push(v);
        }
        let g = &mut self.grad[v * PARAMS_PER_VOXEL..(v + 1) * PARAMS_PER_VOXEL];
        for c in 0..PARAMS_PER_VOXEL {
            g[c] += d[c];
        }
    }

    fn drain_into(&mut self, total: &mut ChunkGrad) {
        for &v in &self.list {
            let base = v * PARAMS_PER_VOXEL;
            let mut d = [0.0; 4];
            d.copy_from_slice(&self.grad[base..base + PARAMS_PER_VOXEL]);
            total.add(v, d);
            self.grad[base..base + PARAMS_PER_VOXEL].fill(0.0);
            self.touched[v] = false;
        }
        self.list.clear();
    }
}

struct TrainPixel<'a> {
    view: &'a View,
    mask: Option<&'a BinaryMask>,
}

/// Random stream for one ray of one iteration; independent of scheduling.
fn ray_rng(seed: u64, iteration: usize, ray_index: usize, samples: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng.set_word_pos(ray_index as u128 * 2 * (samples as u128 + 2));
    rng
}

/// Fits `field` to the training views of `dataset`. `masks`, when given,
/// holds one static map per training view (1 = use the pixel); masked-out
/// pixels are still drawn but contribute nothing.
pub fn train(
    field: &VoxelField,
    dataset: &ViewDataset,
    masks: Option<&[BinaryMask]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, FieldError> {
    cfg.validate()?;
    let views = dataset.train_views();
    if views.is_empty() {
        return Err(FieldError::InvalidConfig("dataset has no training views".into()));
    }
    if let Some(ms) = masks {
        if ms.len() != views.len() {
            return Err(FieldError::DimensionMismatch(format!(
                "{} masks for {} training views",
                ms.len(),
                views.len()
            )));
        }
        for (m, v) in ms.iter().zip(&views) {
            if m.dims() != v.image.dims() {
                return Err(FieldError::DimensionMismatch(format!(
                    "mask {}x{} for view {} of {}x{}",
                    m.width(),
                    m.height(),
                    v.name,
                    v.image.width(),
                    v.image.height()
                )));
            }
        }
    }
    let sources: Vec<TrainPixel> = views
        .iter()
        .enumerate()
        .map(|(i, v)| TrainPixel {
            view: v,
            mask: masks.map(|m| &m[i]),
        })
        .collect();
    let mut offsets = Vec::with_capacity(sources.len() + 1);
    offsets.push(0usize);
    for s in &sources {
        offsets.push(offsets.last().unwrap() + s.view.image.len());
    }
    let total_pixels = *offsets.last().unwrap();

    let mut field = field.clone();
    let voxels = field.voxel_count();
    let mut velocity = vec![0.0; voxels * PARAMS_PER_VOXEL];
    let n_chunks = cfg.batch_rays.div_ceil(CHUNK_RAYS);
    let mut chunk_grads: Vec<ChunkGrad> = (0..n_chunks).map(|_| ChunkGrad::new(voxels)).collect();
    let mut total = ChunkGrad::new(voxels);
    let mut trace = LossTrace::default();
    let samples = cfg.samples_per_ray;

    for it in 0..cfg.iterations {
        let losses: Vec<f64> = chunk_grads
            .par_iter_mut()
            .enumerate()
            .map(|(ci, cg)| {
                let mut loss = 0.0;
                let mut jitter = vec![0.0; samples];
                for r in ci * CHUNK_RAYS..((ci + 1) * CHUNK_RAYS).min(cfg.batch_rays) {
                    let mut rng = ray_rng(cfg.seed, it, r, samples);
                    let pixel = rng.random_range(0..total_pixels);
                    for j in jitter.iter_mut() {
                        *j = rng.random::<f64>();
                    }
                    let src = offsets.partition_point(|&o| o <= pixel) - 1;
                    let local = (pixel - offsets[src]) as u32;
                    let view = sources[src].view;
                    let (x, y) = (local % view.image.width(), local / view.image.width());
                    let weight = match sources[src].mask {
                        Some(m) if !m.get(x, y) => continue,
                        _ => 1.0,
                    };
                    let Some(ray) = field.pixel_ray(&view.camera, &view.pose, x, y) else {
                        continue;
                    };
                    let target = view.image.get(x, y);
                    loss += accumulate_ray(&field, &ray, target, weight, samples, Some(&jitter), |v, d| cg.add(v, d));
                }
                loss
            })
            .collect();
        let loss = losses.iter().sum::<f64>() / cfg.batch_rays as f64;
        if !loss.is_finite() {
            return Err(FieldError::NonFiniteLoss(it));
        }
        trace.losses.push(loss);
        for cg in chunk_grads.iter_mut() {
            cg.drain_into(&mut total);
        }
        let scale = 1.0 / cfg.batch_rays as f64;
        for &v in &total.list {
            let base = v * PARAMS_PER_VOXEL;
            for c in 0..PARAMS_PER_VOXEL {
                total.grad[base + c] *= scale;
            }
        }
        let lr = cfg.learning_rate(it);
        let params = field.params_mut();
        for (i, (p, vel)) in params.iter_mut().zip(velocity.iter_mut()).enumerate() {
            let g = total.grad[i];
            *vel = cfg.momentum * *vel + g;
            *p -= lr * *vel;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FieldError::NonFiniteLoss(it));
        }
        for &v in &total.list {
            total.grad[v * PARAMS_PER_VOXEL..(v + 1) * PARAMS_PER_VOXEL].fill(0.0);
            total.touched[v] = false;
        }
        total.list.clear();
        if it % 100 == 0 {
            log::debug!("iteration {it}: loss {loss:.6}, lr {lr:.3}");
        }
    }
    Ok(TrainOutcome { field, trace })
}

/// Color residual maps of every training view against the field's render.
pub fn residuals_from_field(field: &VoxelField, dataset: &ViewDataset, samples: usize) -> Result<Vec<ResidualMap>, FieldError> {
    dataset
        .train()
        .map(|v| {
            let rendered = render_image(field, &v.camera, &v.pose, samples)?;
            Ok(residual_map(&rendered, &v.image)?)
        })
        .collect()
}
