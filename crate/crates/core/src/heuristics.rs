//! Static-region heuristics: SfM feature-frequency prompts, color-residual
//! thresholds, and their bounded combination.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{check_dims, read_file, write_file, BinaryMask, Image, RasterError};
use crate::segmentation::{prompt_groups, PointPrompt, SegmentationError, SegmenterBackend};
use crate::sfm::{SfmError, SparseReconstruction};

#[derive(Debug, Error)]
pub enum HeuristicError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Sfm(#[from] SfmError),
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("malformed residual raster: {0}")]
    MalformedResidual(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    Sfm,
    Residual,
    ResidualBound,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeuristicMap {
    pub kind: HeuristicKind,
    pub mask: BinaryMask,
}

impl HeuristicMap {
    pub fn new(kind: HeuristicKind, mask: BinaryMask) -> Self {
        Self { kind, mask }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicThresholds {
    /// Minimum occurrence ratio `n / N_I` for a static feature.
    pub t_sfm: f64,
    /// Residual quantile used as the upper bound.
    pub t_cr: f64,
    /// Minimum instance overlap ratio with the combined heuristic.
    pub t_m: f64,
    pub group_size: usize,
}

impl Default for HeuristicThresholds {
    fn default() -> Self {
        Preset::Kubric.thresholds()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Kubric,
    Distractor,
    Phototourism,
}

impl Preset {
    pub fn thresholds(self) -> HeuristicThresholds {
        let (t_sfm, t_cr) = match self {
            Preset::Kubric => (0.2, 0.9),
            Preset::Distractor => (0.01, 0.95),
            Preset::Phototourism => (0.01, 0.97),
        };
        HeuristicThresholds {
            t_sfm,
            t_cr,
            t_m: 0.5,
            group_size: 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Kubric => "kubric",
            Preset::Distractor => "distractor",
            Preset::Phototourism => "phototourism",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kubric" => Ok(Preset::Kubric),
            "distractor" => Ok(Preset::Distractor),
            "phototourism" => Ok(Preset::Phototourism),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

impl HeuristicThresholds {
    pub fn validate(&self) -> Result<(), HeuristicError> {
        let bad = |m: String| Err(HeuristicError::InvalidThreshold(m));
        if !(0.0..=1.0).contains(&self.t_sfm) {
            return bad(format!("t_sfm = {} not in [0, 1]", self.t_sfm));
        }
        if !(self.t_cr > 0.0 && self.t_cr <= 1.0) {
            return bad(format!("t_cr = {} not in (0, 1]", self.t_cr));
        }
        if !(self.t_m > 0.0 && self.t_m <= 1.0) {
            return bad(format!("t_m = {} not in (0, 1]", self.t_m));
        }
        if self.group_size == 0 {
            return bad("group_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Coordinates of the features of `image_id` whose occurrence ratio
/// `n / N_I` reaches `t_sfm`, in feature order.
pub fn static_feature_points(
    recon: &SparseReconstruction,
    image_id: u32,
    t_sfm: f64,
) -> Result<Vec<[f64; 2]>, HeuristicError> {
    if !(0.0..=1.0).contains(&t_sfm) {
        return Err(HeuristicError::InvalidThreshold(format!("t_sfm = {t_sfm} not in [0, 1]")));
    }
    let image = recon.image(image_id)?;
    let total = recon.image_count() as f64;
    let counts = recon.match_counts(image_id)?;
    Ok(counts
        .into_iter()
        .filter(|(_, n)| f64::from(*n) / total >= t_sfm)
        .map(|(idx, _)| {
            let xy = image.features[idx].xy;
            [xy.x, xy.y]
        })
        .collect())
}

/// Union of the backend's masks for each prompt group; all-zero when there
/// are no static points.
pub fn sfm_heuristic<B: SegmenterBackend + ?Sized>(
    image: &Image,
    static_points: &[[f64; 2]],
    backend: &B,
    group_size: usize,
) -> Result<HeuristicMap, HeuristicError> {
    let mut mask = BinaryMask::zeros(image.width(), image.height());
    for group in prompt_groups(static_points, group_size) {
        let prompt = PointPrompt::new(group)?;
        let sub = backend.segment_with_points(image, &prompt)?;
        mask = mask.union(&sub)?;
    }
    Ok(HeuristicMap::new(HeuristicKind::Sfm, mask))
}

/// Per-pixel L2 color residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

const RESIDUAL_MAGIC: &[u8; 4] = b"HUGR";

impl ResidualMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self, HeuristicError> {
        if values.len() != width as usize * height as usize {
            return Err(HeuristicError::MalformedResidual(format!(
                "{} values for {width}x{height}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(HeuristicError::MalformedResidual(format!("value {v} is not a finite nonnegative")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean taken relative to the first value, so constant maps have a
    /// mean exactly equal to their value.
    pub fn mean(&self) -> f64 {
        let Some(&first) = self.values.first() else {
            return 0.0;
        };
        first + self.values.iter().map(|v| v - first).sum::<f64>() / self.values.len() as f64
    }

    fn threshold_mask(&self, threshold: f64) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.values.iter().map(|v| *v <= threshold).collect(),
        )
        .expect("residual map is image-shaped")
    }

    /// 16-byte header (`HUGR`, width, height, reserved) then row-major
    /// little-endian `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(RESIDUAL_MAGIC);
        out.write_u32::<LittleEndian>(self.width).unwrap();
        out.write_u32::<LittleEndian>(self.height).unwrap();
        out.write_u32::<LittleEndian>(0).unwrap();
        for v in &self.values {
            out.write_f32::<LittleEndian>(*v as f32).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeuristicError> {
        let bad = |m: &str| HeuristicError::MalformedResidual(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != RESIDUAL_MAGIC {
            return Err(bad("missing HUGR header"));
        }
        let mut cur = &bytes[4..];
        let width = cur.read_u32::<LittleEndian>().map_err(|_| bad("short header"))?;
        let height = cur.read_u32::<LittleEndian>().map_err(|_| bad("short header"))?;
        let _reserved = cur.read_u32::<LittleEndian>().map_err(|_| bad("short header"))?;
        let n = width as usize * height as usize;
        if cur.len() != 4 * n {
            return Err(bad("payload size does not match header"));
        }
        let values = (0..n)
            .map(|_| cur.read_f32::<LittleEndian>().map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|_| bad("short payload"))?;
        Self::new(width, height, values)
    }

    pub fn save(&self, path: &Path) -> Result<(), HeuristicError> {
        Ok(write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, HeuristicError> {
        Self::from_bytes(&read_file(path)?)
    }
}

pub fn residual_map(rendered: &Image, reference: &Image) -> Result<ResidualMap, HeuristicError> {
    check_dims(reference.dims(), rendered.dims())?;
    let values = rendered
        .pixels()
        .iter()
        .zip(reference.pixels())
        .map(|(a, b)| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .collect();
    ResidualMap::new(rendered.width(), rendered.height(), values)
}

/// Pixels whose residual does not exceed the map's mean.
pub fn residual_heuristic(r: &ResidualMap) -> HeuristicMap {
    HeuristicMap::new(HeuristicKind::Residual, r.threshold_mask(r.mean()))
}

/// `q`-quantile with linear interpolation between closest ranks, the
/// sorted position being `(N - 1) * q`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = sorted.len() - 1;
    if q >= 1.0 {
        return sorted[last];
    }
    if q <= 0.0 {
        return sorted[0];
    }
    let pos = last as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(last);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pixels whose residual does not exceed the `t_cr` quantile.
pub fn residual_bound(r: &ResidualMap, t_cr: f64) -> Result<HeuristicMap, HeuristicError> {
    if !(t_cr > 0.0 && t_cr <= 1.0) {
        return Err(HeuristicError::InvalidThreshold(format!("t_cr = {t_cr} not in (0, 1]")));
    }
    if r.values.is_empty() {
        return Ok(HeuristicMap::new(HeuristicKind::ResidualBound, r.threshold_mask(0.0)));
    }
    let threshold = quantile(&r.values, t_cr);
    Ok(HeuristicMap::new(HeuristicKind::ResidualBound, r.threshold_mask(threshold)))
}

/// `(H_sfm ∪ H_cr) ∩ H_bound`.
pub fn combine(h_sfm: &HeuristicMap, h_cr: &HeuristicMap, h_bound: &HeuristicMap) -> Result<HeuristicMap, HeuristicError> {
    let mask = h_sfm.mask.union(&h_cr.mask)?.intersection(&h_bound.mask)?;
    Ok(HeuristicMap::new(HeuristicKind::Combined, mask))
}
