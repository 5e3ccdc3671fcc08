//! Pinhole projection and ray construction shared by the renderers.
//!
//! Cameras look down `+z` with `y` pointing down the image; pixel `(u, v)`
//! covers `[u, u+1) × [v, v+1)` so its center sits at `(u + 0.5, v + 0.5)`.

use nalgebra::{Vector2, Vector3};

use crate::sfm::{CameraModel, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new(Vector3::repeat(-half), Vector3::repeat(half))
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Slab test; returns the parametric entry and exit distances.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// World-space origin and unit direction through the center of pixel `(x, y)`.
pub fn pixel_ray(camera: &CameraModel, pose: &Pose, x: u32, y: u32) -> (Vector3<f64>, Vector3<f64>) {
    let (fx, fy, cx, cy) = camera.intrinsics();
    let d_cam = Vector3::new(
        (f64::from(x) + 0.5 - cx) / fx,
        (f64::from(y) + 0.5 - cy) / fy,
        1.0,
    );
    let rot_inv = pose.rotation().inverse();
    ((pose.camera_center()), (rot_inv * d_cam).normalize())
}

/// Pixel coordinates and camera-space depth of a world point, if it is in
/// front of the camera.
pub fn project(camera: &CameraModel, pose: &Pose, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
    let pc = pose.world_to_camera(p);
    if pc.z <= 1e-9 {
        return None;
    }
    let (fx, fy, cx, cy) = camera.intrinsics();
    Some((Vector2::new(fx * pc.x / pc.z + cx, fy * pc.y / pc.z + cy), pc.z))
}

pub fn in_image(camera: &CameraModel, xy: &Vector2<f64>) -> bool {
    xy.x >= 0.0 && xy.y >= 0.0 && xy.x < f64::from(camera.width) && xy.y < f64::from(camera.height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn pixel_center_ray_reprojects_to_center() {
        let cam = CameraModel::pinhole(1, 64, 48, 50.0, 52.0, 32.0, 24.0);
        let rot = UnitQuaternion::from_euler_angles(0.1, -0.4, 0.2);
        let pose = Pose::from_rotation(&rot, Vector3::new(0.3, -0.2, 1.0));
        let (o, d) = pixel_ray(&cam, &pose, 10, 7);
        let (xy, depth) = project(&cam, &pose, &(o + 2.5 * d)).unwrap();
        assert!((xy.x - 10.5).abs() < 1e-9 && (xy.y - 7.5).abs() < 1e-9);
        assert!(depth > 0.0);
    }

    #[test]
    fn box_intersection() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.intersect(&Vector3::new(-3.0, 0.0, 0.0), &Vector3::x()).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12 && (t1 - 4.0).abs() < 1e-12);
        assert!(b.intersect(&Vector3::new(-3.0, 2.0, 0.0), &Vector3::x()).is_none());
        let (t0, _) = b.intersect(&Vector3::zeros(), &Vector3::y()).unwrap();
        assert!(t0 < 0.0);
    }
}
