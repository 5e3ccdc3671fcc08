//! JSON bodies for the remote segmentation protocol.
//!
//! Images travel as base64 RGB PNG; masks as base64 8-bit grayscale PNG
//! with values 0/255.
//!
//! | method | path              | request                         | response              |
//! |--------|-------------------|---------------------------------|-----------------------|
//! | POST   | `/v1/point_masks` | `{image, points: [[x, y], ..]}` | `{masks, scores}`     |
//! | POST   | `/v1/grid_masks`  | `{image, grid?}`                | `{masks, scores?}`    |
//! | GET    | `/v1/health`      |                                 | `{status, model_id}`  |

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::raster::{check_dims, BinaryMask, Image};

use super::SegmentationError;

pub const POINT_MASKS_PATH: &str = "/v1/point_masks";
pub const GRID_MASKS_PATH: &str = "/v1/grid_masks";
pub const HEALTH_PATH: &str = "/v1/health";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMaskRequest {
    pub image: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMaskRequest {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub masks: Vec<String>,
    #[serde(default)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

pub fn encode_image(image: &Image) -> Result<String, SegmentationError> {
    Ok(STANDARD.encode(image.encode_png()?))
}

pub fn decode_image(b64: &str) -> Result<Image, SegmentationError> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| SegmentationError::ProtocolError(format!("bad base64 image: {e}")))?;
    Image::decode_png(&bytes).map_err(|e| SegmentationError::ProtocolError(format!("bad image png: {e}")))
}

pub fn encode_mask(mask: &BinaryMask) -> Result<String, SegmentationError> {
    Ok(STANDARD.encode(mask.encode_png()?))
}

/// Decodes a mask and checks it matches the requesting image's size.
pub fn decode_mask(b64: &str, dims: (u32, u32)) -> Result<BinaryMask, SegmentationError> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| SegmentationError::ProtocolError(format!("bad base64 mask: {e}")))?;
    let mask = BinaryMask::decode_png(&bytes)
        .map_err(|e| SegmentationError::ProtocolError(format!("bad mask png: {e}")))?;
    check_dims(dims, mask.dims())
        .map_err(|e| SegmentationError::ProtocolError(format!("mask size: {e}")))?;
    Ok(mask)
}

impl MaskResponse {
    /// The highest-scoring mask; the first one wins ties and missing scores.
    pub fn best(&self, dims: (u32, u32)) -> Result<BinaryMask, SegmentationError> {
        if self.masks.is_empty() {
            return Err(SegmentationError::ProtocolError("response has no masks".into()));
        }
        if !self.scores.is_empty() && self.scores.len() != self.masks.len() {
            return Err(SegmentationError::ProtocolError(format!(
                "{} masks but {} scores",
                self.masks.len(),
                self.scores.len()
            )));
        }
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        decode_mask(&self.masks[best], dims)
    }

    pub fn all(&self, dims: (u32, u32)) -> Result<Vec<BinaryMask>, SegmentationError> {
        self.masks.iter().map(|m| decode_mask(m, dims)).collect()
    }
}
