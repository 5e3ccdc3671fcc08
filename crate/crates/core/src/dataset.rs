//! Posed multi-view image sets and their on-disk layout:
//!
//! ```text
//! <root>/images/<name>.png      RGB views
//! <root>/masks_gt/<name>.png    optional ground-truth static maps (0 = transient)
//! <root>/poses.json             per-view split, pose and intrinsics
//! <root>/sparse/                COLMAP model of the training views
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Image, RasterError};
use crate::sfm::{CameraModel, CameraModelKind, Pose, SfmError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Sfm(#[from] SfmError),
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub image: Image,
    pub camera: CameraModel,
    pub pose: Pose,
    /// Ground-truth static map (1 = static, 0 = transient), when known.
    pub gt_static: Option<BinaryMask>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ViewDataset {
    pub views: Vec<View>,
}

impl ViewDataset {
    pub fn new(views: Vec<View>) -> Result<Self, DatasetError> {
        let ds = Self { views };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut names = std::collections::HashSet::new();
        for v in &self.views {
            if !names.insert(v.name.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate view name {}", v.name)));
            }
            v.camera.validate()?;
            if v.image.dims() != (v.camera.width, v.camera.height) {
                return Err(DatasetError::Invalid(format!(
                    "view {} image is {}x{} but its camera is {}x{}",
                    v.name,
                    v.image.width(),
                    v.image.height(),
                    v.camera.width,
                    v.camera.height
                )));
            }
            if let Some(m) = &v.gt_static {
                if m.dims() != v.image.dims() {
                    return Err(DatasetError::Invalid(format!("view {} mask size differs from image", v.name)));
                }
            }
            if (v.pose.quaternion_norm() - 1.0).abs() > 1e-6 {
                return Err(DatasetError::Invalid(format!("view {} has a non-unit rotation", v.name)));
            }
        }
        Ok(())
    }

    pub fn train(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Test)
    }

    pub fn train_views(&self) -> Vec<&View> {
        self.train().collect()
    }

    pub fn test_views(&self) -> Vec<&View> {
        self.test().collect()
    }

    pub fn save(&self, root: &Path) -> Result<(), DatasetError> {
        let mut manifest = Manifest { views: Vec::new() };
        for v in &self.views {
            v.image.save_png(&root.join("images").join(&v.name))?;
            let mask = match &v.gt_static {
                Some(m) => {
                    let rel = format!("masks_gt/{}", v.name);
                    m.save_png(&root.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            manifest.views.push(ManifestView {
                name: v.name.clone(),
                split: v.split,
                qvec: v.pose.qvec,
                tvec: v.pose.tvec,
                camera: ManifestCamera {
                    model: v.camera.model.name().to_string(),
                    width: v.camera.width,
                    height: v.camera.height,
                    params: v.camera.params.clone(),
                },
                gt_mask: mask,
            });
        }
        let path = root.join("poses.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        crate::raster::write_file(&path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join("poses.json");
        let manifest_err = |message: String| DatasetError::Manifest {
            path: path.clone(),
            message,
        };
        let text = std::fs::read_to_string(&path).map_err(|e| manifest_err(e.to_string()))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
        let mut views = Vec::with_capacity(manifest.views.len());
        for (i, mv) in manifest.views.into_iter().enumerate() {
            let model = CameraModelKind::from_name(&mv.camera.model).ok_or(SfmError::UnsupportedCameraModel {
                camera_id: i as u32,
                model: mv.camera.model.clone(),
            })?;
            let gt_static = match &mv.gt_mask {
                Some(rel) => Some(BinaryMask::load_png(&root.join(rel))?),
                None => None,
            };
            views.push(View {
                image: Image::load_png(&root.join("images").join(&mv.name))?,
                name: mv.name,
                camera: CameraModel {
                    camera_id: 1,
                    model,
                    width: mv.camera.width,
                    height: mv.camera.height,
                    params: mv.camera.params,
                },
                pose: Pose {
                    qvec: mv.qvec,
                    tvec: mv.tvec,
                },
                gt_static,
                split: mv.split,
            });
        }
        Self::new(views)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    views: Vec<ManifestView>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestView {
    name: String,
    split: Split,
    qvec: [f64; 4],
    tvec: [f64; 3],
    camera: ManifestCamera,
    gt_mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCamera {
    model: String,
    width: u32,
    height: u32,
    params: Vec<f64>,
}
