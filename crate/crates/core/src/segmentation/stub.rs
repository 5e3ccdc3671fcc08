//! In-process HTTP server speaking the remote segmentation protocol,
//! backed by the builtin segmenter. Used to exercise [`RemoteBackend`]
//! hermetically.
//!
//! Point prompts answer with two candidates: the builtin mask (score 0.9)
//! and its complement (score 0.1), so clients must select by score.
//!
//! [`RemoteBackend`]: super::RemoteBackend

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::protocol::{
    self, ErrorResponse, GridMaskRequest, HealthResponse, MaskResponse, PointMaskRequest,
    GRID_MASKS_PATH, HEALTH_PATH, POINT_MASKS_PATH,
};
use super::{BuiltinSegmenter, PointPrompt, SegmentationError, SegmenterBackend, DEFAULT_GRID_RESOLUTION};

pub const STUB_MODEL_ID: &str = "builtin-graph-segmenter";

#[derive(Default)]
struct Stats {
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    served: AtomicUsize,
}

pub struct StubServer {
    server: Arc<Server>,
    port: u16,
    stats: Arc<Stats>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(segmenter: BuiltinSegmenter) -> std::io::Result<Self> {
        Self::start_with_delay(segmenter, Duration::ZERO)
    }

    /// Each request sleeps for `delay` before answering, which makes
    /// concurrency limits observable.
    pub fn start_with_delay(segmenter: BuiltinSegmenter, delay: Duration) -> std::io::Result<Self> {
        let server = Arc::new(Server::http("127.0.0.1:0").map_err(std::io::Error::other)?);
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub server has no ip address"))?;
        let stats = Arc::new(Stats::default());
        let segmenter = Arc::new(segmenter);
        let accept = {
            let server = Arc::clone(&server);
            let stats = Arc::clone(&stats);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let stats = Arc::clone(&stats);
                    let segmenter = Arc::clone(&segmenter);
                    std::thread::spawn(move || {
                        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        stats.peak.fetch_max(now, Ordering::SeqCst);
                        if !delay.is_zero() {
                            std::thread::sleep(delay);
                        }
                        handle(&segmenter, request);
                        stats.in_flight.fetch_sub(1, Ordering::SeqCst);
                        stats.served.fetch_add(1, Ordering::SeqCst);
                    });
                }
            })
        };
        Ok(Self {
            server,
            port,
            stats,
            accept: Some(accept),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.stats.peak.load(Ordering::SeqCst)
    }

    pub fn requests_served(&self) -> usize {
        self.stats.served.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

struct Reply {
    status: u16,
    body: Vec<u8>,
}

fn json<T: Serialize>(status: u16, value: &T) -> Reply {
    Reply {
        status,
        body: serde_json::to_vec(value).expect("protocol types serialize"),
    }
}

fn error(status: u16, msg: impl Into<String>) -> Reply {
    json(status, &ErrorResponse { error: msg.into() })
}

fn handle(segmenter: &BuiltinSegmenter, mut request: Request) {
    let mut body = Vec::new();
    let reply = match request.as_reader().read_to_end(&mut body) {
        Err(e) => error(400, format!("unreadable body: {e}")),
        Ok(_) => route(segmenter, request.method(), request.url(), &body),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = Response::from_data(reply.body)
        .with_status_code(reply.status)
        .with_header(header);
    let _ = request.respond(response);
}

fn route(segmenter: &BuiltinSegmenter, method: &Method, url: &str, body: &[u8]) -> Reply {
    match (method, url) {
        (Method::Get, HEALTH_PATH) => json(
            200,
            &HealthResponse {
                status: "ok".into(),
                model_id: STUB_MODEL_ID.into(),
            },
        ),
        (Method::Post, POINT_MASKS_PATH) => point_masks(segmenter, body),
        (Method::Post, GRID_MASKS_PATH) => grid_masks(segmenter, body),
        _ => error(404, format!("no route for {method} {url}")),
    }
}

fn point_masks(segmenter: &BuiltinSegmenter, body: &[u8]) -> Reply {
    let req: PointMaskRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error(400, format!("malformed request: {e}")),
    };
    let image = match protocol::decode_image(&req.image) {
        Ok(i) => i,
        Err(e) => return error(400, e.to_string()),
    };
    let prompt = match PointPrompt::new(req.points) {
        Ok(p) => p,
        Err(e) => return error(400, e.to_string()),
    };
    let mask = match segmenter.segment_with_points(&image, &prompt) {
        Ok(m) => m,
        Err(SegmentationError::InvalidPrompt(m)) => return error(422, m),
        Err(e) => return error(500, e.to_string()),
    };
    let encoded = [&mask, &mask.complement()]
        .iter()
        .map(|m| protocol::encode_mask(m))
        .collect::<Result<Vec<_>, _>>();
    match encoded {
        Ok(masks) => json(
            200,
            &MaskResponse {
                masks,
                scores: vec![0.9, 0.1],
            },
        ),
        Err(e) => error(500, e.to_string()),
    }
}

fn grid_masks(segmenter: &BuiltinSegmenter, body: &[u8]) -> Reply {
    let req: GridMaskRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error(400, format!("malformed request: {e}")),
    };
    let grid = req.grid.unwrap_or(DEFAULT_GRID_RESOLUTION);
    if grid == 0 {
        return error(400, "grid must be at least 1");
    }
    let image = match protocol::decode_image(&req.image) {
        Ok(i) => i,
        Err(e) => return error(400, e.to_string()),
    };
    let result = segmenter
        .segment_instances(&image, grid)
        .and_then(|ms| ms.iter().map(protocol::encode_mask).collect::<Result<Vec<_>, _>>());
    match result {
        Ok(masks) => {
            let scores = vec![1.0; masks.len()];
            json(200, &MaskResponse { masks, scores })
        }
        Err(e) => error(500, e.to_string()),
    }
}
