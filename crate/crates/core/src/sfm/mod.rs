//! COLMAP sparse reconstructions: the in-memory model, text and binary
//! codecs, and per-feature match counts.
//!
//! Files follow the COLMAP layout (`cameras`, `images`, `points3D`, each
//! with a `.txt` or `.bin` extension). Only the pinhole camera models are
//! accepted. Feature descriptors are never part of a COLMAP sparse model
//! and are not represented here.

mod binary;
mod text;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

/// Sentinel used by the binary format for "no 3D point".
pub const INVALID_POINT3D_ID: u64 = u64::MAX;

const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte {b}"),
            Location::Line(l) => write!(f, "line {l}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: malformed record at {location}: {reason}", .file.display())]
    MalformedRecord {
        file: PathBuf,
        location: Location,
        reason: String,
    },
    #[error("camera {camera_id}: unsupported camera model {model}")]
    UnsupportedCameraModel { camera_id: u32, model: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("unknown image {0}")]
    UnknownImage(u32),
    #[error("invalid reconstruction: {0}")]
    InvalidReconstruction(String),
    #[error("no sparse model found in {}", .0.display())]
    FormatNotDetected(PathBuf),
    #[error("i/o failure on {}: {source}", .path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    Text,
    Binary,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CameraModelKind {
    SimplePinhole,
    Pinhole,
}

impl CameraModelKind {
    pub fn colmap_id(self) -> i32 {
        match self {
            CameraModelKind::SimplePinhole => 0,
            CameraModelKind::Pinhole => 1,
        }
    }

    pub fn from_colmap_id(id: i32) -> Option<Self> {
        match id {
            0 => Some(CameraModelKind::SimplePinhole),
            1 => Some(CameraModelKind::Pinhole),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModelKind::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModelKind::Pinhole => "PINHOLE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "SIMPLE_PINHOLE" => Some(CameraModelKind::SimplePinhole),
            "PINHOLE" => Some(CameraModelKind::Pinhole),
            _ => None,
        }
    }

    pub fn param_count(self) -> usize {
        match self {
            CameraModelKind::SimplePinhole => 3,
            CameraModelKind::Pinhole => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub camera_id: u32,
    pub model: CameraModelKind,
    pub width: u32,
    pub height: u32,
    pub params: Vec<f64>,
}

impl CameraModel {
    pub fn pinhole(camera_id: u32, width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            camera_id,
            model: CameraModelKind::Pinhole,
            width,
            height,
            params: vec![fx, fy, cx, cy],
        }
    }

    /// `(fx, fy, cx, cy)` regardless of model.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        match self.model {
            CameraModelKind::SimplePinhole => {
                (self.params[0], self.params[0], self.params[1], self.params[2])
            }
            CameraModelKind::Pinhole => {
                (self.params[0], self.params[1], self.params[2], self.params[3])
            }
        }
    }

    pub fn validate(&self) -> Result<(), SfmError> {
        let id = self.camera_id;
        if self.width == 0 || self.height == 0 {
            return Err(SfmError::InvalidReconstruction(format!(
                "camera {id} has zero size {}x{}",
                self.width, self.height
            )));
        }
        if self.params.len() != self.model.param_count() {
            return Err(SfmError::InvalidReconstruction(format!(
                "camera {id}: {} expects {} params, got {}",
                self.model.name(),
                self.model.param_count(),
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(SfmError::InvalidReconstruction(format!(
                "camera {id} has non-finite params"
            )));
        }
        let (fx, fy, _, _) = self.intrinsics();
        if fx <= 0.0 || fy <= 0.0 {
            return Err(SfmError::InvalidReconstruction(format!(
                "camera {id} has non-positive focal length"
            )));
        }
        Ok(())
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// `(w, x, y, z)`; kept raw so the codecs round-trip bit-exactly.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
}

impl Pose {
    pub fn from_rotation(rotation: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let q = rotation.quaternion();
        Self {
            qvec: [q.w, q.i, q.j, q.k],
            tvec: [translation.x, translation.y, translation.z],
        }
    }

    pub fn identity() -> Self {
        Self {
            qvec: [1.0, 0.0, 0.0, 0.0],
            tvec: [0.0; 3],
        }
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.qvec.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.qvec;
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.tvec)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation().inverse() * self.translation())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeaturePoint {
    pub xy: Vector2<f64>,
    pub point3d_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u32,
    pub name: String,
    pub pose: Pose,
    pub camera_id: u32,
    pub features: Vec<FeaturePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrackElement {
    pub image_id: u32,
    pub feature_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub point3d_id: u64,
    pub xyz: Vector3<f64>,
    pub color: [u8; 3],
    pub error: f64,
    pub track: Vec<TrackElement>,
}

/// An immutable, cross-checked sparse model. Collections are keyed and
/// iterated by id, which fixes the serialized record order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseReconstruction {
    cameras: BTreeMap<u32, CameraModel>,
    images: BTreeMap<u32, ImageRecord>,
    points3d: BTreeMap<u64, Point3D>,
}

impl SparseReconstruction {
    pub fn new(
        cameras: impl IntoIterator<Item = CameraModel>,
        images: impl IntoIterator<Item = ImageRecord>,
        points3d: impl IntoIterator<Item = Point3D>,
    ) -> Result<Self, SfmError> {
        let mut recon = Self::default();
        for c in cameras {
            let id = c.camera_id;
            if recon.cameras.insert(id, c).is_some() {
                return Err(SfmError::InvalidReconstruction(format!("duplicate camera {id}")));
            }
        }
        for i in images {
            let id = i.image_id;
            if recon.images.insert(id, i).is_some() {
                return Err(SfmError::InvalidReconstruction(format!("duplicate image {id}")));
            }
        }
        for p in points3d {
            let id = p.point3d_id;
            if recon.points3d.insert(id, p).is_some() {
                return Err(SfmError::InvalidReconstruction(format!("duplicate point {id}")));
            }
        }
        recon.validate()?;
        Ok(recon)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn cameras(&self) -> &BTreeMap<u32, CameraModel> {
        &self.cameras
    }

    pub fn images(&self) -> &BTreeMap<u32, ImageRecord> {
        &self.images
    }

    pub fn points3d(&self) -> &BTreeMap<u64, Point3D> {
        &self.points3d
    }

    /// `N_I`, the number of images in the model.
    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn image(&self, image_id: u32) -> Result<&ImageRecord, SfmError> {
        self.images.get(&image_id).ok_or(SfmError::UnknownImage(image_id))
    }

    pub fn image_by_name(&self, name: &str) -> Option<&ImageRecord> {
        self.images.values().find(|i| i.name == name)
    }

    pub fn camera_of(&self, image: &ImageRecord) -> &CameraModel {
        &self.cameras[&image.camera_id]
    }

    /// Number of other-image features matched to each feature of `image_id`,
    /// in feature order: the feature's track length minus one, or zero when
    /// the feature has no 3D point.
    pub fn match_counts(&self, image_id: u32) -> Result<Vec<(usize, u32)>, SfmError> {
        let image = self.image(image_id)?;
        Ok(image
            .features
            .iter()
            .enumerate()
            .map(|(idx, f)| {
                let n = f
                    .point3d_id
                    .and_then(|pid| self.points3d.get(&pid))
                    .map_or(0, |p| p.track.len().saturating_sub(1) as u32);
                (idx, n)
            })
            .collect())
    }

    /// Checks every structural invariant. Cross-reference failures are
    /// reported as [`SfmError::DanglingReference`].
    pub fn validate(&self) -> Result<(), SfmError> {
        for cam in self.cameras.values() {
            cam.validate()?;
        }
        let mut referencing_features = 0usize;
        for img in self.images.values() {
            let cam = self.cameras.get(&img.camera_id).ok_or_else(|| {
                SfmError::DanglingReference(format!(
                    "image {} references missing camera {}",
                    img.image_id, img.camera_id
                ))
            })?;
            let norm = img.pose.quaternion_norm();
            if (norm - 1.0).abs() > QUATERNION_TOLERANCE || img.pose.tvec.iter().any(|t| !t.is_finite()) {
                return Err(SfmError::InvalidReconstruction(format!(
                    "image {} has a non-unit quaternion (norm {norm})",
                    img.image_id
                )));
            }
            if img.name.is_empty() || img.name.contains(['\0', '\n']) {
                return Err(SfmError::InvalidReconstruction(format!(
                    "image {} has an unusable name {:?}",
                    img.image_id, img.name
                )));
            }
            for (idx, f) in img.features.iter().enumerate() {
                let (x, y) = (f.xy.x, f.xy.y);
                if !(0.0..f64::from(cam.width)).contains(&x) || !(0.0..f64::from(cam.height)).contains(&y) {
                    return Err(SfmError::InvalidReconstruction(format!(
                        "image {} feature {idx} at ({x}, {y}) lies outside {}x{}",
                        img.image_id, cam.width, cam.height
                    )));
                }
                if let Some(pid) = f.point3d_id {
                    if pid == INVALID_POINT3D_ID {
                        return Err(SfmError::InvalidReconstruction(format!(
                            "image {} feature {idx} uses the reserved point id",
                            img.image_id
                        )));
                    }
                    if !self.points3d.contains_key(&pid) {
                        return Err(SfmError::DanglingReference(format!(
                            "image {} feature {idx} references missing point {pid}",
                            img.image_id
                        )));
                    }
                    referencing_features += 1;
                }
            }
        }

        let mut seen = HashSet::new();
        let mut track_total = 0usize;
        for p in self.points3d.values() {
            if p.track.len() < 2 {
                return Err(SfmError::InvalidReconstruction(format!(
                    "point {} has track length {}",
                    p.point3d_id,
                    p.track.len()
                )));
            }
            if p.xyz.iter().any(|v| !v.is_finite()) || !p.error.is_finite() {
                return Err(SfmError::InvalidReconstruction(format!(
                    "point {} has non-finite values",
                    p.point3d_id
                )));
            }
            for el in &p.track {
                let img = self.images.get(&el.image_id).ok_or_else(|| {
                    SfmError::DanglingReference(format!(
                        "point {} track references missing image {}",
                        p.point3d_id, el.image_id
                    ))
                })?;
                let feature = img.features.get(el.feature_index as usize).ok_or_else(|| {
                    SfmError::DanglingReference(format!(
                        "point {} track references missing feature {} of image {}",
                        p.point3d_id, el.feature_index, el.image_id
                    ))
                })?;
                if feature.point3d_id != Some(p.point3d_id) {
                    return Err(SfmError::DanglingReference(format!(
                        "point {} track entry ({}, {}) does not point back",
                        p.point3d_id, el.image_id, el.feature_index
                    )));
                }
                if !seen.insert(*el) {
                    return Err(SfmError::DanglingReference(format!(
                        "observation ({}, {}) listed twice",
                        el.image_id, el.feature_index
                    )));
                }
            }
            track_total += p.track.len();
        }
        // Every track entry points back to a distinct feature, so equal totals
        // mean every referencing feature is listed in its point's track.
        if track_total != referencing_features {
            return Err(SfmError::DanglingReference(format!(
                "{referencing_features} features reference points but tracks list {track_total}"
            )));
        }
        Ok(())
    }
}

pub(crate) const CAMERAS: &str = "cameras";
pub(crate) const IMAGES: &str = "images";
pub(crate) const POINTS3D: &str = "points3D";

fn model_file(dir: &Path, stem: &str, format: ModelFormat) -> PathBuf {
    let ext = match format {
        ModelFormat::Binary => "bin",
        _ => "txt",
    };
    dir.join(format!("{stem}.{ext}"))
}

/// Picks binary when all three `.bin` files exist, otherwise text when all
/// three `.txt` files exist.
pub fn detect_format(dir: &Path) -> Result<ModelFormat, SfmError> {
    for format in [ModelFormat::Binary, ModelFormat::Text] {
        if [CAMERAS, IMAGES, POINTS3D]
            .iter()
            .all(|stem| model_file(dir, stem, format).is_file())
        {
            return Ok(format);
        }
    }
    if !dir.is_dir() {
        return Err(SfmError::MissingFile(dir.to_path_buf()));
    }
    Err(SfmError::FormatNotDetected(dir.to_path_buf()))
}

fn read_model_file(dir: &Path, stem: &str, format: ModelFormat) -> Result<(PathBuf, Vec<u8>), SfmError> {
    let path = model_file(dir, stem, format);
    match std::fs::read(&path) {
        Ok(bytes) => Ok((path, bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(SfmError::MissingFile(path)),
        Err(source) => Err(SfmError::IoFailure { path, source }),
    }
}

pub fn parse_reconstruction(dir: &Path, format: ModelFormat) -> Result<SparseReconstruction, SfmError> {
    let format = match format {
        ModelFormat::Auto => detect_format(dir)?,
        f => f,
    };
    let (cam_path, cam_bytes) = read_model_file(dir, CAMERAS, format)?;
    let (img_path, img_bytes) = read_model_file(dir, IMAGES, format)?;
    let (pts_path, pts_bytes) = read_model_file(dir, POINTS3D, format)?;
    let (cameras, images, points) = match format {
        ModelFormat::Binary => (
            binary::read_cameras(&cam_path, &cam_bytes)?,
            binary::read_images(&img_path, &img_bytes)?,
            binary::read_points3d(&pts_path, &pts_bytes)?,
        ),
        _ => (
            text::read_cameras(&cam_path, as_utf8(&cam_path, &cam_bytes)?)?,
            text::read_images(&img_path, as_utf8(&img_path, &img_bytes)?)?,
            text::read_points3d(&pts_path, as_utf8(&pts_path, &pts_bytes)?)?,
        ),
    };
    SparseReconstruction::new(cameras, images, points)
}

fn as_utf8<'a>(path: &Path, bytes: &'a [u8]) -> Result<&'a str, SfmError> {
    std::str::from_utf8(bytes).map_err(|e| SfmError::MalformedRecord {
        file: path.to_path_buf(),
        location: Location::Byte(e.valid_up_to() as u64),
        reason: "invalid UTF-8".into(),
    })
}

pub fn write_reconstruction(recon: &SparseReconstruction, dir: &Path, format: ModelFormat) -> Result<(), SfmError> {
    recon.validate()?;
    let format = match format {
        ModelFormat::Auto => ModelFormat::Binary,
        f => f,
    };
    std::fs::create_dir_all(dir).map_err(|source| SfmError::IoFailure {
        path: dir.to_path_buf(),
        source,
    })?;
    let files: [(&str, Vec<u8>); 3] = match format {
        ModelFormat::Binary => [
            (CAMERAS, binary::write_cameras(recon)),
            (IMAGES, binary::write_images(recon)),
            (POINTS3D, binary::write_points3d(recon)),
        ],
        _ => [
            (CAMERAS, text::write_cameras(recon).into_bytes()),
            (IMAGES, text::write_images(recon).into_bytes()),
            (POINTS3D, text::write_points3d(recon).into_bytes()),
        ],
    };
    for (stem, bytes) in files {
        let path = model_file(dir, stem, format);
        std::fs::write(&path, bytes).map_err(|source| SfmError::IoFailure { path, source })?;
    }
    Ok(())
}
