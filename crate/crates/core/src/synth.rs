//! Deterministic multi-view scenes: a closed room with colored boxes on the
//! floor, an optional magenta sphere that moves between training views, and
//! a matching sparse reconstruction.
//!
//! World space is `y`-up. Box faces are flat-shaded by orientation; there is
//! no lighting model.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DatasetError, Split, View, ViewDataset};
use crate::field::{logit, VoxelField};
use crate::geometry::{in_image, pixel_ray, project, Aabb};
use crate::raster::{BinaryMask, Image};
use crate::sfm::{
    write_reconstruction, CameraModel, CameraModelKind, FeaturePoint, ImageRecord, ModelFormat, Point3D, Pose,
    SfmError, SparseReconstruction, TrackElement,
};

/// Field bounds that enclose every default scene.
pub const SCENE_HALF_EXTENT: f64 = 2.0;

/// Point density used for generated reconstructions unless overridden.
pub const DEFAULT_POINTS_PER_PRIMITIVE: usize = 800;

const DISTRACTOR_RADIUS: f64 = 0.15;

/// Shading factors for box faces in `[-x, +x, -y, +y, -z, +z]` order.
const FACE_SHADE: [f64; 6] = [0.85, 0.9, 0.7, 1.0, 0.8, 0.95];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sfm(#[from] SfmError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxPrimitive {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub color: [f64; 3],
}

impl BoxPrimitive {
    pub fn face_color(&self, face: usize) -> [f64; 3] {
        self.color.map(|c| c * FACE_SHADE[face])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpherePrimitive {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Box(BoxPrimitive),
    Sphere(SpherePrimitive),
}

/// Interior of the room; cameras sit inside and see its walls from within.
#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Wall colors in `[-x, +x, -y (floor), +y (ceiling), -z, +z]` order.
    pub face_colors: [[f64; 3]; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub radius: f64,
    pub color: [f64; 3],
    /// Sphere center for each training view.
    pub trajectory: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orbit {
    pub radius: f64,
    pub height: f64,
    pub target: Vector3<f64>,
    /// Amplitude of the seeded per-view height perturbation.
    pub height_jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub room: Room,
    pub primitives: Vec<Primitive>,
    pub distractor: Option<Distractor>,
    pub train_views: usize,
    pub test_views: usize,
    pub orbit: Orbit,
    pub resolution: u32,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Room with three boxes, 16 training and 4 test views at 64×64, and no
    /// distractor. Every face lies on a plane of voxel centers of a 64³ grid
    /// over the default field bounds.
    pub fn clean(seed: u64) -> Self {
        Self {
            room: Room {
                min: Vector3::new(-1.53125, -1.03125, -1.53125),
                max: Vector3::new(1.53125, 1.46875, 1.53125),
                face_colors: [
                    [0.7, 0.72, 0.78],
                    [0.78, 0.75, 0.68],
                    [0.6, 0.57, 0.52],
                    [0.85, 0.85, 0.82],
                    [0.68, 0.76, 0.7],
                    [0.76, 0.68, 0.7],
                ],
            },
            primitives: vec![
                Primitive::Box(BoxPrimitive {
                    min: Vector3::new(-0.78125, -1.03125, -0.53125),
                    max: Vector3::new(-0.28125, -0.53125, -0.03125),
                    color: [0.8, 0.4, 0.3],
                }),
                Primitive::Box(BoxPrimitive {
                    min: Vector3::new(0.21875, -1.03125, -0.28125),
                    max: Vector3::new(0.71875, -0.28125, 0.21875),
                    color: [0.35, 0.45, 0.75],
                }),
                Primitive::Box(BoxPrimitive {
                    min: Vector3::new(-0.28125, -1.03125, 0.34375),
                    max: Vector3::new(0.09375, -0.65625, 0.71875),
                    color: [0.4, 0.7, 0.4],
                }),
            ],
            distractor: None,
            train_views: 16,
            test_views: 4,
            orbit: Orbit {
                radius: 1.2,
                height: 0.1,
                target: Vector3::new(0.0, -0.6, 0.0),
                height_jitter: 0.15,
            },
            resolution: 64,
            focal_scale: 0.8,
            seed,
        }
    }

    /// [`SceneSpec::clean`] plus a magenta sphere that jumps to a seeded
    /// spot between each training camera and the scene center.
    pub fn with_distractor(seed: u64) -> Self {
        let mut spec = Self::clean(seed);
        spec.distractor = Some(spec.sample_trajectory(DISTRACTOR_RADIUS));
        spec
    }

    fn sample_trajectory(&self, radius: f64) -> Distractor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_d157);
        let trajectory = self
            .train_poses()
            .iter()
            .map(|pose| {
                let rot = pose.rotation().inverse();
                let right = rot * Vector3::x();
                let down = rot * Vector3::y();
                let forward = rot * Vector3::z();
                let d = rng.random_range(0.5..0.8);
                let a = rng.random_range(-0.3..0.3) * d;
                let b = rng.random_range(-0.2..0.2) * d;
                pose.camera_center() + d * forward + a * right + b * down
            })
            .collect();
        Distractor {
            radius,
            color: [1.0, 0.0, 1.0],
            trajectory,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.resolution < 16 {
            return bad(format!("resolution {} below 16", self.resolution));
        }
        if self.train_views == 0 {
            return bad("at least one training view is required".into());
        }
        if (0..3).any(|i| self.room.max[i] <= self.room.min[i]) {
            return bad("room is empty".into());
        }
        if !(self.orbit.radius > 0.0) || !(self.focal_scale > 0.0) {
            return bad("orbit radius and focal scale must be positive".into());
        }
        for (i, p) in self.primitives.iter().enumerate() {
            match p {
                Primitive::Box(b) if (0..3).any(|k| b.max[k] <= b.min[k]) => {
                    return bad(format!("primitive {i} is an empty box"))
                }
                Primitive::Sphere(s) if !(s.radius > 0.0) => return bad(format!("primitive {i} has no radius")),
                _ => {}
            }
        }
        if let Some(d) = &self.distractor {
            if d.trajectory.len() != self.train_views {
                return bad(format!(
                    "distractor trajectory has {} positions for {} training views",
                    d.trajectory.len(),
                    self.train_views
                ));
            }
            if !(d.radius > 0.0) {
                return bad("distractor radius must be positive".into());
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        let w = f64::from(self.resolution);
        let f = self.focal_scale * w;
        CameraModel::pinhole(1, self.resolution, self.resolution, f, f, w / 2.0, w / 2.0)
    }

    fn orbit_pose(&self, angle: f64, height: f64) -> Pose {
        let center = self.orbit.target.component_mul(&Vector3::new(1.0, 0.0, 1.0))
            + Vector3::new(self.orbit.radius * angle.cos(), height, self.orbit.radius * angle.sin());
        look_at(&center, &self.orbit.target)
    }

    pub fn train_poses(&self) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.train_views)
            .map(|i| {
                let angle = std::f64::consts::TAU * (i as f64 + rng.random_range(-0.2..0.2)) / self.train_views as f64;
                let h = self.orbit.height + self.orbit.height_jitter * rng.random_range(-1.0..1.0);
                self.orbit_pose(angle, h)
            })
            .collect()
    }

    /// Test cameras sit halfway between training angles.
    pub fn test_poses(&self) -> Vec<Pose> {
        (0..self.test_views)
            .map(|j| {
                let angle = std::f64::consts::TAU * (j as f64 + 0.5) / self.test_views.max(1) as f64 + 0.1;
                self.orbit_pose(angle, self.orbit.height)
            })
            .collect()
    }
}

/// Camera at `eye` looking at `target` with world `+y` up in the image.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let z = (target - eye).normalize();
    let x = z.cross(&Vector3::y()).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Pose::from_rotation(&rot, -(rot * eye))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub color: [f64; 3],
    pub transient: bool,
}

/// Entry and exit distances with the face index (`2 * axis + side`) of each.
fn slab(origin: &Vector3<f64>, dir: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<(f64, usize, f64, usize)> {
    let (mut t0, mut f0, mut t1, mut f1) = (f64::NEG_INFINITY, 0, f64::INFINITY, 0);
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let ta = (min[i] - origin[i]) / dir[i];
        let tb = (max[i] - origin[i]) / dir[i];
        let (near, near_face, far, far_face) = if ta <= tb {
            (ta, 2 * i, tb, 2 * i + 1)
        } else {
            (tb, 2 * i + 1, ta, 2 * i)
        };
        if near > t0 {
            t0 = near;
            f0 = near_face;
        }
        if far < t1 {
            t1 = far;
            f1 = far_face;
        }
    }
    (t0 <= t1).then_some((t0, f0, t1, f1))
}

fn sphere_hit(origin: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|t| *t > 1e-9)
}

/// First surface hit along a unit-direction ray. `distractor` is the sphere
/// center for the view being rendered, if any.
pub fn trace_scene(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, distractor: Option<&Vector3<f64>>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, color: [f64; 3], transient: bool| {
        if t > 1e-9 && best.is_none_or(|b| t < b.t) {
            best = Some(Hit { t, color, transient });
        }
    };
    if let Some((t0, _, t1, f1)) = slab(origin, dir, &spec.room.min, &spec.room.max) {
        if t0 <= 0.0 {
            consider(t1, spec.room.face_colors[f1], false);
        }
    }
    for p in &spec.primitives {
        match p {
            Primitive::Box(b) => {
                if let Some((t0, f0, _, _)) = slab(origin, dir, &b.min, &b.max) {
                    consider(t0, b.face_color(f0), false);
                }
            }
            Primitive::Sphere(s) => {
                if let Some(t) = sphere_hit(origin, dir, &s.center, s.radius) {
                    consider(t, s.color, false);
                }
            }
        }
    }
    if let (Some(d), Some(c)) = (&spec.distractor, distractor) {
        if let Some(t) = sphere_hit(origin, dir, c, d.radius) {
            consider(t, d.color, true);
        }
    }
    best
}

/// Analytic render and the mask of pixels where the distractor is the
/// first surface hit.
pub fn render_view(spec: &SceneSpec, pose: &Pose, distractor: Option<&Vector3<f64>>) -> (Image, BinaryMask) {
    let camera = spec.camera();
    let (w, h) = (camera.width, camera.height);
    let hits: Vec<Option<Hit>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (o, d) = pixel_ray(&camera, pose, i % w, i / w);
            trace_scene(spec, &o, &d, distractor)
        })
        .collect();
    let pixels = hits.iter().map(|h| h.map_or([0.0; 3], |h| h.color)).collect();
    let transient = hits.iter().map(|h| h.is_some_and(|h| h.transient)).collect();
    (
        Image::new(w, h, pixels).expect("analytic colors lie in [0, 1]"),
        BinaryMask::new(w, h, transient).expect("mask is image-shaped"),
    )
}

pub fn train_view_name(i: usize) -> String {
    format!("train_{i:03}.png")
}

pub fn test_view_name(i: usize) -> String {
    format!("test_{i:03}.png")
}

/// Training views carry ground-truth static maps (the complement of the
/// distractor's visible pixels); test views are rendered without the
/// distractor and carry none.
pub fn generate_scene(spec: &SceneSpec) -> Result<ViewDataset, SynthError> {
    spec.validate()?;
    let camera = spec.camera();
    let mut views = Vec::with_capacity(spec.train_views + spec.test_views);
    for (i, pose) in spec.train_poses().into_iter().enumerate() {
        let center = spec.distractor.as_ref().map(|d| d.trajectory[i]);
        let (image, transient) = render_view(spec, &pose, center.as_ref());
        views.push(View {
            name: train_view_name(i),
            image,
            camera: camera.clone(),
            pose,
            gt_static: Some(transient.complement()),
            split: Split::Train,
        });
    }
    for (j, pose) in spec.test_poses().into_iter().enumerate() {
        let (image, _) = render_view(spec, &pose, None);
        views.push(View {
            name: test_view_name(j),
            image,
            camera: camera.clone(),
            pose,
            gt_static: None,
            split: Split::Test,
        });
    }
    Ok(ViewDataset::new(views)?)
}

fn to_u8(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

struct Surface {
    xyz: Vector3<f64>,
    color: [f64; 3],
}

fn sample_box_surface(rng: &mut ChaCha8Rng, min: &Vector3<f64>, max: &Vector3<f64>, colors: impl Fn(usize) -> [f64; 3]) -> Surface {
    let size = max - min;
    let areas = [size.y * size.z, size.x * size.z, size.x * size.y];
    let total = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut u = rng.random_range(0.0..total);
    let mut face = 5;
    for f in 0..6 {
        if u < areas[f / 2] {
            face = f;
            break;
        }
        u -= areas[f / 2];
    }
    let axis = face / 2;
    let mut p = Vector3::from_fn(|i, _| min[i] + rng.random_range(0.0..1.0) * size[i]);
    p[axis] = if face % 2 == 0 { min[axis] } else { max[axis] };
    Surface { xyz: p, color: colors(face) }
}

fn sample_surface(rng: &mut ChaCha8Rng, spec: &SceneSpec, primitive: Option<&Primitive>) -> Surface {
    match primitive {
        None => sample_box_surface(rng, &spec.room.min, &spec.room.max, |f| spec.room.face_colors[f]),
        Some(Primitive::Box(b)) => sample_box_surface(rng, &b.min, &b.max, |f| b.face_color(f)),
        Some(Primitive::Sphere(s)) => Surface {
            xyz: s.center + s.radius * random_unit(rng),
            color: s.color,
        },
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Pixel coordinates of `p` in a view, if `p` is the first surface hit both
/// along the line of sight and at the center of the pixel it projects into,
/// and that hit is of the expected kind.
fn observe(
    spec: &SceneSpec,
    camera: &CameraModel,
    pose: &Pose,
    distractor: Option<&Vector3<f64>>,
    p: &Vector3<f64>,
    transient: bool,
) -> Option<Vector2<f64>> {
    let (xy, _) = project(camera, pose, p)?;
    if !in_image(camera, &xy) {
        return None;
    }
    let eye = pose.camera_center();
    let to = p - eye;
    let dist = to.norm();
    let hit = trace_scene(spec, &eye, &(to / dist), distractor)?;
    if (hit.t - dist).abs() > 1e-6 * (1.0 + dist) || hit.transient != transient {
        return None;
    }
    let (o, d) = pixel_ray(camera, pose, xy.x.floor() as u32, xy.y.floor() as u32);
    let center_hit = trace_scene(spec, &o, &d, distractor)?;
    (center_hit.transient == transient).then_some(xy)
}

/// Sparse model of the training views. Static surface points become tracks
/// over every training view that sees them; distractor points are matched
/// at most across one pair of consecutive views, otherwise left unmatched.
pub fn generate_reconstruction(
    dataset: &ViewDataset,
    spec: &SceneSpec,
    points_per_primitive: usize,
) -> Result<SparseReconstruction, SynthError> {
    spec.validate()?;
    let views = dataset.train_views();
    if views.len() != spec.train_views {
        return Err(SynthError::InvalidSpec(format!(
            "dataset has {} training views, spec expects {}",
            views.len(),
            spec.train_views
        )));
    }
    let camera = spec.camera();
    let centers: Vec<Option<Vector3<f64>>> = (0..views.len())
        .map(|i| spec.distractor.as_ref().map(|d| d.trajectory[i]))
        .collect();
    let mut features: Vec<Vec<FeaturePoint>> = vec![Vec::new(); views.len()];
    let mut points = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05f3_a11e);

    let add_track = |points: &mut Vec<Point3D>, features: &mut Vec<Vec<FeaturePoint>>, xyz, color, obs: Vec<(usize, Vector2<f64>)>| {
        let id = points.len() as u64 + 1;
        let track = obs
            .iter()
            .map(|(v, xy)| {
                features[*v].push(FeaturePoint {
                    xy: *xy,
                    point3d_id: Some(id),
                });
                TrackElement {
                    image_id: *v as u32 + 1,
                    feature_index: features[*v].len() as u32 - 1,
                }
            })
            .collect();
        points.push(Point3D {
            point3d_id: id,
            xyz,
            color: to_u8(color),
            error: 0.0,
            track,
        });
    };

    let sources: Vec<Option<&Primitive>> = std::iter::once(None).chain(spec.primitives.iter().map(Some)).collect();
    for src in sources {
        for _ in 0..points_per_primitive {
            let s = sample_surface(&mut rng, spec, src);
            let obs: Vec<(usize, Vector2<f64>)> = views
                .iter()
                .enumerate()
                .filter_map(|(v, view)| observe(spec, &camera, &view.pose, centers[v].as_ref(), &s.xyz, false).map(|xy| (v, xy)))
                .collect();
            if obs.len() >= 2 {
                add_track(&mut points, &mut features, s.xyz, s.color, obs);
            }
        }
    }

    if let Some(d) = &spec.distractor {
        for v in (0..views.len()).step_by(2) {
            for _ in 0..points_per_primitive / 4 {
                let u = random_unit(&mut rng);
                let mut obs = Vec::new();
                for w in v..(v + 2).min(views.len()) {
                    let p = d.trajectory[w] + d.radius * u;
                    if let Some(xy) = observe(spec, &camera, &views[w].pose, centers[w].as_ref(), &p, true) {
                        obs.push((w, xy));
                    }
                }
                match obs.len() {
                    2 => add_track(&mut points, &mut features, d.trajectory[v] + d.radius * u, d.color, obs),
                    1 => features[obs[0].0].push(FeaturePoint {
                        xy: obs[0].1,
                        point3d_id: None,
                    }),
                    _ => {}
                }
            }
        }
    }

    let images = views.iter().zip(features).enumerate().map(|(v, (view, features))| ImageRecord {
        image_id: v as u32 + 1,
        name: view.name.clone(),
        pose: view.pose,
        camera_id: camera.camera_id,
        features,
    });
    Ok(SparseReconstruction::new([camera.clone()], images, points)?)
}

/// Nearest face of a box surface to `p` and the distance to it.
fn nearest_box_face(p: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> (f64, usize) {
    let inside = (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]);
    if inside {
        let mut best = (f64::INFINITY, 0);
        for i in 0..3 {
            for (side, d) in [(0, p[i] - min[i]), (1, max[i] - p[i])] {
                if d < best.0 {
                    best = (d, 2 * i + side);
                }
            }
        }
        best
    } else {
        let mut excess = Vector3::zeros();
        let mut face = 0;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..3 {
            let (e, side) = if p[i] < min[i] {
                (min[i] - p[i], 0)
            } else if p[i] > max[i] {
                (p[i] - max[i], 1)
            } else {
                (0.0, 0)
            };
            excess[i] = e;
            if e > worst {
                worst = e;
                face = 2 * i + side;
            }
        }
        (excess.norm(), face)
    }
}

fn static_color_near(spec: &SceneSpec, p: &Vector3<f64>) -> [f64; 3] {
    let (mut dist, face) = nearest_box_face(p, &spec.room.min, &spec.room.max);
    let mut color = spec.room.face_colors[face];
    for prim in &spec.primitives {
        let (d, c) = match prim {
            Primitive::Box(b) => {
                let (d, f) = nearest_box_face(p, &b.min, &b.max);
                (d, b.face_color(f))
            }
            Primitive::Sphere(s) => (((p - s.center).norm() - s.radius).abs(), s.color),
        };
        if d < dist {
            dist = d;
            color = c;
        }
    }
    color
}

/// Signed distance to the static surface, positive inside solids. The
/// region outside the room counts as solid.
fn static_signed_distance(spec: &SceneSpec, p: &Vector3<f64>) -> f64 {
    let mut sd = -box_signed_distance(p, &spec.room.min, &spec.room.max);
    for prim in &spec.primitives {
        let d = match prim {
            Primitive::Box(b) => box_signed_distance(p, &b.min, &b.max),
            Primitive::Sphere(s) => s.radius - (p - s.center).norm(),
        };
        sd = sd.max(d);
    }
    sd
}

/// Positive inside the box.
fn box_signed_distance(p: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> f64 {
    let q = Vector3::from_fn(|i, _| (min[i] - p[i]).max(p[i] - max[i]));
    let outside = q.map(|v| v.max(0.0)).norm();
    let inside = q.max().min(0.0);
    -(outside + inside)
}

/// Voxel field reproducing the static scene. Raw density is the signed
/// distance to the nearest static surface in voxel units, scaled by
/// `raw_density` and clamped to `±raw_density`; every voxel is colored like
/// its nearest static surface.
pub fn ground_truth_field(spec: &SceneSpec, resolution: usize, raw_density: f64) -> Result<VoxelField, SynthError> {
    spec.validate()?;
    let bounds = Aabb::cube(SCENE_HALF_EXTENT);
    let voxel = 2.0 * SCENE_HALF_EXTENT / resolution as f64;
    let mut field = VoxelField::new([resolution; 3], bounds, -raw_density, [0.0; 3])
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let raws: Vec<[f64; 4]> = (0..field.voxel_count())
        .into_par_iter()
        .map(|v| {
            let (x, y, z) = (v % resolution, (v / resolution) % resolution, v / (resolution * resolution));
            let p = field.voxel_center(x, y, z);
            let d = (static_signed_distance(spec, &p) / voxel).clamp(-1.0, 1.0) * raw_density;
            let c = static_color_near(spec, &p).map(logit);
            [d, c[0], c[1], c[2]]
        })
        .collect();
    for (v, raw) in raws.into_iter().enumerate() {
        field.set_voxel(v, raw);
    }
    Ok(field)
}

/// Seeded random model with `num_points` points tracked across 2 to 6 of
/// `num_images` images, plus unmatched features. Geometry is not
/// consistent; this exercises readers, writers and track statistics.
pub fn random_reconstruction(num_points: usize, num_images: u32, seed: u64) -> Result<SparseReconstruction, SfmError> {
    if num_images < 2 {
        return Err(SfmError::InvalidReconstruction("at least two images are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = vec![
        CameraModel::pinhole(1, 640, 480, 500.25, 501.5, 320.0, 240.0),
        CameraModel {
            camera_id: 2,
            model: CameraModelKind::SimplePinhole,
            width: 800,
            height: 600,
            params: vec![610.125, 400.0, 300.0],
        },
    ];
    let mut images: Vec<ImageRecord> = (1..=num_images)
        .map(|id| {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let rotation = UnitQuaternion::from_scaled_axis(axis);
            let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            ImageRecord {
                image_id: id,
                name: format!("img_{id:05}.jpg"),
                pose: Pose::from_rotation(&rotation, t),
                camera_id: 1 + id % 2,
                features: Vec::new(),
            }
        })
        .collect();
    let feature = |rng: &mut ChaCha8Rng, image: &mut ImageRecord, point: Option<u64>| {
        let (w, h) = if image.camera_id == 1 { (640.0, 480.0) } else { (800.0, 600.0) };
        image.features.push(FeaturePoint {
            xy: Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h)),
            point3d_id: point,
        });
        (image.features.len() - 1) as u32
    };
    let mut points = Vec::with_capacity(num_points);
    for k in 0..num_points {
        let id = 1 + k as u64;
        let len = rng.random_range(2..=6usize).min(num_images as usize);
        let mut chosen: Vec<u32> = Vec::with_capacity(len);
        while chosen.len() < len {
            let c = rng.random_range(1..=num_images);
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }
        let track = chosen
            .into_iter()
            .map(|image_id| TrackElement {
                image_id,
                feature_index: feature(&mut rng, &mut images[image_id as usize - 1], Some(id)),
            })
            .collect();
        if rng.random_bool(0.25) {
            let i = rng.random_range(0..num_images as usize);
            feature(&mut rng, &mut images[i], None);
        }
        points.push(Point3D {
            point3d_id: id,
            xyz: Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)),
            color: [rng.random(), rng.random(), rng.random()],
            error: rng.random_range(0.0..2.0),
            track,
        });
    }
    SparseReconstruction::new(cameras, images, points)
}

/// Writes `images/`, `masks_gt/`, `poses.json` and a binary COLMAP model
/// under `sparse/`.
pub fn write_dataset(root: &Path, dataset: &ViewDataset, recon: &SparseReconstruction) -> Result<(), SynthError> {
    dataset.save(root)?;
    write_reconstruction(recon, &root.join("sparse"), ModelFormat::Binary)?;
    Ok(())
}
