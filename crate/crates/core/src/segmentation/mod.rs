//! Promptable segmentation: the backend abstraction, the builtin graph
//! segmenter, and the HTTP client/stub pair for the remote protocol.

mod graph;
pub mod protocol;
mod remote;
pub mod stub;

use thiserror::Error;

use crate::raster::{BinaryMask, Image, RasterError};

pub use graph::{builtin_segments, grid_points, BuiltinSegmenter, LabelMap, DEFAULT_K, DEFAULT_MIN_SIZE};
pub use remote::{RemoteBackend, DEFAULT_MAX_IN_FLIGHT};

/// Default prompt grid for whole-image instance masks (64×64 points).
pub const DEFAULT_GRID_RESOLUTION: u32 = 64;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("segmentation backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("segmentation protocol error: {0}")]
    ProtocolError(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub point_prompts: bool,
    pub grid_mode: bool,
}

/// Foreground point prompt in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrompt {
    points: Vec<[f64; 2]>,
}

impl PointPrompt {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, SegmentationError> {
        if points.is_empty() {
            return Err(SegmentationError::InvalidPrompt("prompt has no points".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn validate_for(&self, image: &Image) -> Result<(), SegmentationError> {
        let (w, h) = (f64::from(image.width()), f64::from(image.height()));
        match self
            .points
            .iter()
            .find(|p| !(0.0..w).contains(&p[0]) || !(0.0..h).contains(&p[1]))
        {
            Some(p) => Err(SegmentationError::InvalidPrompt(format!(
                "point ({}, {}) outside {w}x{h} image",
                p[0], p[1]
            ))),
            None => Ok(()),
        }
    }
}

pub trait SegmenterBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Mask of the object(s) indicated by the prompt.
    fn segment_with_points(&self, image: &Image, prompt: &PointPrompt) -> Result<BinaryMask, SegmentationError>;

    /// Nonempty instance masks discovered from a regular prompt grid.
    fn segment_instances(&self, image: &Image, grid_resolution: u32) -> Result<Vec<BinaryMask>, SegmentationError>;
}

impl<T: SegmenterBackend + ?Sized> SegmenterBackend for Box<T> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn segment_with_points(&self, image: &Image, prompt: &PointPrompt) -> Result<BinaryMask, SegmentationError> {
        (**self).segment_with_points(image, prompt)
    }

    fn segment_instances(&self, image: &Image, grid_resolution: u32) -> Result<Vec<BinaryMask>, SegmentationError> {
        (**self).segment_instances(image, grid_resolution)
    }
}

/// One prompt per point: the point followed by its `group_size - 1`
/// Euclidean nearest neighbors among `points` (ties broken by index).
pub fn prompt_groups(points: &[[f64; 2]], group_size: usize) -> Vec<Vec<[f64; 2]>> {
    let group_size = group_size.max(1);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut others: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(*p)
                .chain(others.iter().take(group_size - 1).map(|(_, j)| points[*j]))
                .collect()
        })
        .collect()
}
