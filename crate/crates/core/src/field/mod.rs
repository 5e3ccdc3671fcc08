//! Dense voxel radiance field with trilinear interpolation and
//! emission-absorption volume rendering.
//!
//! Each voxel stores four raw parameters `[density, r, g, b]`. Raw values
//! are interpolated first and then activated: density through softplus,
//! color through a sigmoid. Colors carry no view dependence and rays are
//! composited over black.

mod train;

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{pixel_ray, Aabb};
use crate::raster::{Image, RasterError};
use crate::sfm::{CameraModel, Pose};

pub use train::{
    ray_loss_and_grad, residuals_from_field, train, LossTrace, RayGradient, TrainConfig, TrainOutcome,
    CHARBONNIER_EPS,
};

pub const PARAMS_PER_VOXEL: usize = 4;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("degenerate ray: {0}")]
    DegenerateRay(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Heuristic(#[from] crate::heuristics::HeuristicError),
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Inverse of [`softplus`].
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().max(1e-300).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Result<Self, FieldError> {
        let ray = Self {
            origin,
            direction,
            near,
            far,
        };
        ray.validate()?;
        Ok(ray)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let norm = self.direction.norm();
        if !((norm - 1.0).abs() <= 1e-9) {
            return Err(FieldError::DegenerateRay(format!("direction norm {norm}")));
        }
        if !(self.near >= 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(FieldError::DegenerateRay(format!("interval [{}, {}]", self.near, self.far)));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayColor {
    pub color: [f64; 3],
    pub opacity: f64,
}

/// The eight voxels around a point and their interpolation weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub voxels: [usize; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    resolution: [usize; 3],
    bounds: Aabb,
    /// Interleaved `[density, r, g, b]` per voxel, x fastest.
    params: Vec<f64>,
}

impl VoxelField {
    pub fn new(resolution: [usize; 3], bounds: Aabb, raw_density: f64, raw_color: [f64; 3]) -> Result<Self, FieldError> {
        let n = resolution.iter().product::<usize>();
        let mut params = Vec::with_capacity(n * PARAMS_PER_VOXEL);
        for _ in 0..n {
            params.extend_from_slice(&[raw_density, raw_color[0], raw_color[1], raw_color[2]]);
        }
        Self::from_params(resolution, bounds, params)
    }

    pub fn from_params(resolution: [usize; 3], bounds: Aabb, params: Vec<f64>) -> Result<Self, FieldError> {
        if resolution.iter().any(|r| *r < 2) {
            return Err(FieldError::InvalidField(format!("resolution {resolution:?} below 2")));
        }
        if (0..3).any(|i| !(bounds.max[i] > bounds.min[i])) {
            return Err(FieldError::InvalidField("empty bounds".into()));
        }
        let n = resolution.iter().product::<usize>();
        if params.len() != n * PARAMS_PER_VOXEL {
            return Err(FieldError::InvalidField(format!(
                "{} params for {n} voxels",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FieldError::InvalidField("non-finite parameter".into()));
        }
        Ok(Self {
            resolution,
            bounds,
            params,
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        let size = self.bounds.size();
        let idx = [x, y, z];
        Vector3::from_fn(|i, _| self.bounds.min[i] + (idx[i] as f64 + 0.5) / self.resolution[i] as f64 * size[i])
    }

    pub fn set_voxel(&mut self, voxel: usize, raw: [f64; 4]) {
        self.params[voxel * PARAMS_PER_VOXEL..(voxel + 1) * PARAMS_PER_VOXEL].copy_from_slice(&raw);
    }

    /// Trilinear stencil over voxel centers, clamped at the border.
    pub(crate) fn stencil(&self, p: &Vector3<f64>) -> Stencil {
        let size = self.bounds.size();
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for i in 0..3 {
            let res = self.resolution[i];
            let g = ((p[i] - self.bounds.min[i]) / size[i] * res as f64 - 0.5).clamp(0.0, (res - 1) as f64);
            let b = (g.floor() as usize).min(res - 2);
            base[i] = b;
            frac[i] = g - b as f64;
        }
        let mut voxels = [0usize; 8];
        let mut weights = [0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            voxels[c] = self.voxel_index(base[0] + dx, base[1] + dy, base[2] + dz);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weights[c] = wx * wy * wz;
        }
        Stencil { voxels, weights }
    }

    /// Interpolated raw `[density, r, g, b]`.
    pub(crate) fn raw_at(&self, stencil: &Stencil) -> [f64; 4] {
        let mut out = [0.0; 4];
        for c in 0..8 {
            let w = stencil.weights[c];
            let base = stencil.voxels[c] * PARAMS_PER_VOXEL;
            let v = &self.params[base..base + PARAMS_PER_VOXEL];
            out[0] += w * v[0];
            out[1] += w * v[1];
            out[2] += w * v[2];
            out[3] += w * v[3];
        }
        out
    }

    /// Activated density and color at a world point.
    pub fn query(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let raw = self.raw_at(&self.stencil(p));
        (softplus(raw[0]), [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])])
    }

    /// Ray through a pixel center, clipped to the field bounds.
    pub fn pixel_ray(&self, camera: &CameraModel, pose: &Pose, x: u32, y: u32) -> Option<Ray> {
        let (origin, direction) = pixel_ray(camera, pose, x, y);
        let (t0, t1) = self.bounds.intersect(&origin, &direction)?;
        let near = t0.max(0.0);
        (near < t1).then_some(Ray {
            origin,
            direction,
            near,
            far: t1,
        })
    }

    /// The same field sampled onto a grid of another resolution by
    /// trilinear interpolation of the raw parameters.
    pub fn resampled(&self, resolution: [usize; 3]) -> Result<Self, FieldError> {
        let mut out = Self::new(resolution, self.bounds, 0.0, [0.0; 3])?;
        for z in 0..resolution[2] {
            for y in 0..resolution[1] {
                for x in 0..resolution[0] {
                    let raw = self.raw_at(&self.stencil(&out.voxel_center(x, y, z)));
                    let idx = out.voxel_index(x, y, z);
                    out.set_voxel(idx, raw);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        crate::raster::write_file(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        Self::from_bytes(&crate::raster::read_file(path)?)
    }

    /// Checkpoint layout: `HUGF`, three `u32` resolutions, six `f32` bounds,
    /// then all densities followed by all interleaved colors, as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.voxel_count();
        let mut out = Vec::with_capacity(4 + 12 + 24 + 16 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for r in self.resolution {
            out.write_u32::<LittleEndian>(r as u32).unwrap();
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            out.write_f32::<LittleEndian>(*v as f32).unwrap();
        }
        for v in 0..n {
            out.write_f32::<LittleEndian>(self.params[v * PARAMS_PER_VOXEL] as f32).unwrap();
        }
        for v in 0..n {
            for c in 1..PARAMS_PER_VOXEL {
                out.write_f32::<LittleEndian>(self.params[v * PARAMS_PER_VOXEL + c] as f32).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        let bad = |m: &str| FieldError::MalformedCheckpoint(m.to_string());
        if bytes.len() < 40 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing HUGF header"));
        }
        let mut cur = &bytes[4..];
        let mut resolution = [0usize; 3];
        for r in &mut resolution {
            *r = cur.read_u32::<LittleEndian>().map_err(|_| bad("short header"))? as usize;
        }
        let mut b = [0f64; 6];
        for v in &mut b {
            *v = f64::from(cur.read_f32::<LittleEndian>().map_err(|_| bad("short header"))?);
        }
        let n = resolution.iter().product::<usize>();
        if cur.len() != 16 * n {
            return Err(bad("payload size does not match resolution"));
        }
        let mut params = vec![0.0; n * PARAMS_PER_VOXEL];
        for v in 0..n {
            params[v * PARAMS_PER_VOXEL] = f64::from(cur.read_f32::<LittleEndian>().unwrap());
        }
        for v in 0..n {
            for c in 1..PARAMS_PER_VOXEL {
                params[v * PARAMS_PER_VOXEL + c] = f64::from(cur.read_f32::<LittleEndian>().unwrap());
            }
        }
        let bounds = Aabb::new(Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5]));
        Self::from_params(resolution, bounds, params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HUGF";

/// Sample distances along the ray: one per stratum of `[near, far]`, at
/// the stratum midpoint unless `jitter` supplies in-stratum offsets.
pub(crate) fn sample_positions(ray: &Ray, samples: usize, jitter: Option<&[f64]>) -> (Vec<f64>, f64) {
    let delta = (ray.far - ray.near) / samples as f64;
    let ts = (0..samples)
        .map(|k| {
            let u = jitter.map_or(0.5, |j| j[k]);
            ray.near + (k as f64 + u) * delta
        })
        .collect();
    (ts, delta)
}

/// Per-sample quantities of one forward pass, kept for the backward pass.
pub(crate) struct RayTrace {
    pub stencils: Vec<Stencil>,
    pub raw: Vec<[f64; 4]>,
    pub sigma: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    /// Transmittance after each sample.
    pub trans_after: Vec<f64>,
    pub delta: f64,
    pub out: RayColor,
}

pub(crate) fn trace_ray(field: &VoxelField, ray: &Ray, samples: usize, jitter: Option<&[f64]>) -> RayTrace {
    let (ts, delta) = sample_positions(ray, samples, jitter);
    let mut tr = RayTrace {
        stencils: Vec::with_capacity(samples),
        raw: Vec::with_capacity(samples),
        sigma: Vec::with_capacity(samples),
        colors: Vec::with_capacity(samples),
        weights: Vec::with_capacity(samples),
        trans_after: Vec::with_capacity(samples),
        delta,
        out: RayColor {
            color: [0.0; 3],
            opacity: 0.0,
        },
    };
    let mut trans = 1.0f64;
    for t in ts {
        let st = field.stencil(&ray.at(t));
        let raw = field.raw_at(&st);
        let sigma = softplus(raw[0]);
        let color = [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])];
        let w = trans * -(-sigma * delta).exp_m1();
        let trans_next = trans * (-sigma * delta).exp();
        for c in 0..3 {
            tr.out.color[c] += w * color[c];
        }
        tr.out.opacity += w;
        tr.stencils.push(st);
        tr.raw.push(raw);
        tr.sigma.push(sigma);
        tr.colors.push(color);
        tr.weights.push(w);
        tr.trans_after.push(trans_next);
        trans = trans_next;
    }
    tr
}

/// Composited color and opacity of `ray` with `samples` midpoint samples.
pub fn render_ray(field: &VoxelField, ray: &Ray, samples: usize) -> Result<RayColor, FieldError> {
    ray.validate()?;
    if samples == 0 {
        return Err(FieldError::InvalidConfig("samples must be at least 1".into()));
    }
    Ok(trace_ray(field, ray, samples, None).out)
}

/// Compositing weights of `ray`, exposed for transmittance checks.
pub fn ray_weights(field: &VoxelField, ray: &Ray, samples: usize) -> Result<Vec<f64>, FieldError> {
    ray.validate()?;
    Ok(trace_ray(field, ray, samples.max(1), None).weights)
}

/// One midpoint-sampled ray per pixel center; pixels whose ray misses the
/// field bounds stay black.
pub fn render_image(field: &VoxelField, camera: &CameraModel, pose: &Pose, samples: usize) -> Result<Image, FieldError> {
    if samples == 0 {
        return Err(FieldError::InvalidConfig("samples must be at least 1".into()));
    }
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<[f64; 3]> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            match field.pixel_ray(camera, pose, x, y) {
                Some(ray) => trace_ray(field, &ray, samples, None).out.color.map(|c| c.clamp(0.0, 1.0)),
                None => [0.0; 3],
            }
        })
        .collect();
    Ok(Image::new(w, h, pixels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_ray() -> Ray {
        Ray::new(Vector3::new(-1.0, 0.0, 0.0), Vector3::x(), 0.0, 2.0).unwrap()
    }

    #[test]
    fn empty_space_is_black() {
        let f = VoxelField::new([4, 4, 4], Aabb::cube(1.0), -200.0, [0.0; 3]).unwrap();
        let out = render_ray(&f, &unit_ray(), 16).unwrap();
        assert!(out.opacity < 1e-80, "{}", out.opacity);
        assert!(out.color.iter().all(|c| c.abs() < 1e-80));
    }

    #[test]
    fn single_sample_half_opacity() {
        // delta = 2, so sigma = ln(2) / 2 gives sigma * delta = ln 2.
        let sigma = std::f64::consts::LN_2 / 2.0;
        let f = VoxelField::new([2, 2, 2], Aabb::cube(1.0), softplus_inverse(sigma), [60.0, -60.0, -60.0]).unwrap();
        let out = render_ray(&f, &unit_ray(), 1).unwrap();
        assert!((out.opacity - 0.5).abs() < 1e-12);
        assert!((out.color[0] - 0.5).abs() < 1e-12);
        assert!(out.color[1].abs() < 1e-12 && out.color[2].abs() < 1e-12);
    }

    #[test]
    fn opaque_limit_returns_voxel_color() {
        let f = VoxelField::new([3, 3, 3], Aabb::cube(1.0), 500.0, [logit(0.2), logit(0.6), logit(0.9)]).unwrap();
        let out = render_ray(&f, &unit_ray(), 32).unwrap();
        assert!((out.opacity - 1.0).abs() < 1e-12);
        for (c, e) in out.color.iter().zip([0.2, 0.6, 0.9]) {
            assert!((c - e).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_rays_rejected() {
        assert!(Ray::new(Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0), 0.0, 1.0).is_err());
        assert!(Ray::new(Vector3::zeros(), Vector3::x(), 1.0, 1.0).is_err());
        assert!(Ray::new(Vector3::zeros(), Vector3::x(), -0.5, 1.0).is_err());
    }

    #[test]
    fn trilinear_reproduces_linear_functions() {
        let mut f = VoxelField::new([5, 4, 3], Aabb::cube(1.0), 0.0, [0.0; 3]).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let c = f.voxel_center(x, y, z);
                    let idx = f.voxel_index(x, y, z);
                    f.set_voxel(idx, [c.x + 2.0 * c.y - c.z, 0.0, 0.0, 0.0]);
                }
            }
        }
        let p = Vector3::new(0.1, -0.2, 0.15);
        let raw = f.raw_at(&f.stencil(&p));
        assert!((raw[0] - (p.x + 2.0 * p.y - p.z)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_at_f32() {
        let mut f = VoxelField::new([2, 3, 2], Aabb::cube(1.5), -1.0, [0.25, -0.5, 1.0]).unwrap();
        f.set_voxel(3, [2.0, 0.5, 0.75, -0.25]);
        let back = VoxelField::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
        assert!(VoxelField::from_bytes(b"HUGFshort").is_err());
    }
}
