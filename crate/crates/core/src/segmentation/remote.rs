use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::raster::{BinaryMask, Image};

use super::protocol::{
    self, GridMaskRequest, HealthResponse, MaskResponse, PointMaskRequest, GRID_MASKS_PATH,
    HEALTH_PATH, POINT_MASKS_PATH,
};
use super::{Capabilities, PointPrompt, SegmentationError, SegmenterBackend};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("permit lock poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("permit lock poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// Client for an HTTP segmentation service. Safe to share between threads;
/// at most `max_in_flight` requests are outstanding at once.
pub struct RemoteBackend {
    endpoint: String,
    agent: ureq::Agent,
    permits: Permits,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("endpoint", &self.endpoint).finish()
    }
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_limit(endpoint, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_limit(endpoint: impl Into<String>, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            permits: Permits {
                available: Mutex::new(max_in_flight.max(1)),
                freed: Condvar::new(),
            },
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn health(&self) -> Result<HealthResponse, SegmentationError> {
        let _permit = self.permits.acquire();
        let resp = self
            .agent
            .get(format!("{}{HEALTH_PATH}", self.endpoint))
            .call()
            .map_err(unavailable)?;
        read_response(resp)
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, SegmentationError> {
        let _permit = self.permits.acquire();
        let resp = self
            .agent
            .post(format!("{}{path}", self.endpoint))
            .send_json(body)
            .map_err(unavailable)?;
        read_response(resp)
    }
}

fn unavailable(e: ureq::Error) -> SegmentationError {
    SegmentationError::BackendUnavailable(e.to_string())
}

fn read_response<T: DeserializeOwned>(mut resp: ureq::http::Response<ureq::Body>) -> Result<T, SegmentationError> {
    let status = resp.status().as_u16();
    if status == 503 {
        return Err(SegmentationError::BackendUnavailable("service returned 503".into()));
    }
    if !(200..300).contains(&status) {
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(SegmentationError::ProtocolError(format!("HTTP {status}: {text}")));
    }
    resp.body_mut()
        .read_json()
        .map_err(|e| SegmentationError::ProtocolError(format!("bad response body: {e}")))
}

impl SegmenterBackend for RemoteBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            point_prompts: true,
            grid_mode: true,
        }
    }

    fn segment_with_points(&self, image: &Image, prompt: &PointPrompt) -> Result<BinaryMask, SegmentationError> {
        prompt.validate_for(image)?;
        let req = PointMaskRequest {
            image: protocol::encode_image(image)?,
            points: prompt.points().to_vec(),
        };
        let resp: MaskResponse = self.post(POINT_MASKS_PATH, &req)?;
        resp.best(image.dims())
    }

    fn segment_instances(&self, image: &Image, grid_resolution: u32) -> Result<Vec<BinaryMask>, SegmentationError> {
        if grid_resolution == 0 {
            return Err(SegmentationError::InvalidPrompt("grid resolution must be at least 1".into()));
        }
        let req = GridMaskRequest {
            image: protocol::encode_image(image)?,
            grid: Some(grid_resolution),
        };
        let resp: MaskResponse = self.post(GRID_MASKS_PATH, &req)?;
        let masks = resp.all(image.dims())?;
        Ok(masks.into_iter().filter(|m| !m.is_all_zero()).collect())
    }
}
