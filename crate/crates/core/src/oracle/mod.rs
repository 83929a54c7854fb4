//! Uniform interface to external generative models.
//!
//! Inpainting, refinement and both depth estimators are reached through
//! [`Oracle::call`]. Backends are interchangeable: the built-in
//! [`mock::MockOracle`], the job-folder exchange in [`directory`], and the
//! multipart endpoint in [`http`]. [`OracleClient`] wraps any backend with
//! an in-flight limit and response validation.

pub mod directory;
pub mod http;
pub mod mock;
pub mod wire;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraView;
use crate::lift::DepthMap;

/// Refinement strength matching a denoise over the last 30% of the schedule.
pub const DEFAULT_REFINE_STRENGTH: f32 = 0.3;

/// Mask values at or above this count as "to be generated".
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed oracle message: {0}")]
    Malformed(String),
    #[error("oracle returned {got:?}, expected {expected:?}")]
    SizeMismatch {
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("oracle reported an error: {0}")]
    Remote(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Inpaint,
    Refine,
    DepthRel,
    DepthMetric,
}

impl OracleKind {
    pub fn is_depth(self) -> bool {
        matches!(self, OracleKind::DepthRel | OracleKind::DepthMetric)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRequest {
    pub kind: OracleKind,
    pub rgb: RgbImage,
    /// 0 keeps a pixel, 255 asks for new content; values in between are feathering.
    pub mask: Option<GrayImage>,
    pub prompt: Option<String>,
    /// Refinement strength in `(0, 1]`.
    pub strength: Option<f32>,
    pub seed: u64,
    /// Camera metadata, used by synthetic depth backends.
    pub camera: Option<CameraView>,
}

impl OracleRequest {
    pub fn inpaint(rgb: RgbImage, mask: GrayImage, prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            kind: OracleKind::Inpaint,
            rgb,
            mask: Some(mask),
            prompt: Some(prompt.into()),
            strength: None,
            seed,
            camera: None,
        }
    }

    pub fn refine(rgb: RgbImage, mask: GrayImage, strength: f32, seed: u64) -> Self {
        Self {
            kind: OracleKind::Refine,
            rgb,
            mask: Some(mask),
            prompt: None,
            strength: Some(strength),
            seed,
            camera: None,
        }
    }

    pub fn depth(kind: OracleKind, rgb: RgbImage, seed: u64) -> Self {
        debug_assert!(kind.is_depth());
        Self {
            kind,
            rgb,
            mask: None,
            prompt: None,
            strength: None,
            seed,
            camera: None,
        }
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt = Some(prompt.into());
        self
    }

    pub fn with_camera(mut self, camera: CameraView) -> Self {
        self.camera = Some(camera);
        self
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let invalid = |m: &str| Err(OracleError::InvalidRequest(m.to_string()));
        match self.kind {
            OracleKind::Inpaint => {
                if self.mask.is_none() || self.prompt.is_none() {
                    return invalid("inpaint requests need a mask and a prompt");
                }
            }
            OracleKind::Refine => {
                if self.mask.is_none() {
                    return invalid("refine requests need a mask");
                }
                match self.strength {
                    Some(s) if s > 0.0 && s <= 1.0 => {}
                    _ => return invalid("refine strength must lie in (0, 1]"),
                }
            }
            OracleKind::DepthRel | OracleKind::DepthMetric => {
                if self.mask.is_some() || self.prompt.is_some() {
                    return invalid("depth requests carry neither mask nor prompt");
                }
            }
        }
        if let Some(mask) = &self.mask {
            if mask.dimensions() != self.rgb.dimensions() {
                return invalid("mask and image sizes differ");
            }
        }
        if self.rgb.width() == 0 || self.rgb.height() == 0 {
            return invalid("empty image");
        }
        Ok(())
    }
}

/// Successful oracle output: an image for inpaint/refine, depth otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResponse {
    pub rgb: Option<RgbImage>,
    pub depth: Option<DepthMap>,
}

impl OracleResponse {
    pub fn image(rgb: RgbImage) -> Self {
        Self {
            rgb: Some(rgb),
            depth: None,
        }
    }

    pub fn depth(depth: DepthMap) -> Self {
        Self {
            rgb: None,
            depth: Some(depth),
        }
    }

    /// Checks payload kind and size against the request.
    pub fn check_against(&self, req: &OracleRequest) -> Result<(), OracleError> {
        let expected = req.rgb.dimensions();
        let got = match (req.kind.is_depth(), &self.rgb, &self.depth) {
            (false, Some(rgb), None) => rgb.dimensions(),
            (true, None, Some(d)) => {
                let (w, h) = d.dims();
                (w as u32, h as u32)
            }
            _ => {
                return Err(OracleError::Malformed(format!(
                    "{:?} response must carry exactly one {} payload",
                    req.kind,
                    if req.kind.is_depth() { "depth" } else { "image" }
                )))
            }
        };
        if got != expected {
            return Err(OracleError::SizeMismatch { expected, got });
        }
        Ok(())
    }
}

pub trait Oracle: Send + Sync {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError>;
}

impl<T: Oracle + ?Sized> Oracle for Arc<T> {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        (**self).call(req)
    }
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        (**self).call(req)
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Thread-safe front end over any backend.
///
/// Requests are validated before dispatch, at most `max_in_flight` calls run
/// at once, and every response is checked against its request and brought
/// to wire precision so all transports yield identical results.
pub struct OracleClient {
    backend: Arc<dyn Oracle>,
    limiter: Limiter,
}

impl OracleClient {
    pub const DEFAULT_MAX_IN_FLIGHT: usize = 2;

    pub fn new(backend: Arc<dyn Oracle>) -> Self {
        Self::with_limit(backend, Self::DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_limit(backend: Arc<dyn Oracle>, max_in_flight: usize) -> Self {
        Self {
            backend,
            limiter: Limiter {
                max: max_in_flight.max(1),
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }
}

impl Oracle for OracleClient {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        req.validate()?;
        let resp = {
            let _slot = self.limiter.acquire();
            self.backend.call(req)?
        };
        resp.check_against(req)?;
        Ok(wire::canonicalize(resp))
    }
}

/// Composites an oracle image so pixels outside `mask` keep their input values.
pub fn enforce_preservation(input: &RgbImage, output: &RgbImage, mask: &GrayImage) -> RgbImage {
    RgbImage::from_fn(input.width(), input.height(), |x, y| {
        if mask.get_pixel(x, y)[0] >= MASK_THRESHOLD {
            *output.get_pixel(x, y)
        } else {
            *input.get_pixel(x, y)
        }
    })
}
