//! Deterministic stand-ins for the generative models.
//!
//! Every mock is a pure function of the request (seed included), so runs are
//! reproducible and transports can be compared byte for byte.

use std::sync::atomic::{AtomicUsize, Ordering};

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Oracle, OracleError, OracleKind, OracleRequest, OracleResponse, MASK_THRESHOLD};
use crate::lift::{DepthMap, ScaleClass};
use crate::raster::Grid;
use crate::scene::SyntheticScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InpaintMode {
    ConstantFill { color: [u8; 3] },
    MirrorFill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Identity,
    /// Pulls masked pixels toward their 3x3 mean by `strength`.
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockOracle {
    pub inpaint: InpaintMode,
    pub refine: RefineMode,
    /// Scene ray-cast by the depth mocks; requests must carry a camera.
    pub scene: Option<SyntheticScene>,
    /// Standard deviation of multiplicative depth noise.
    pub depth_noise: f64,
}

impl Default for MockOracle {
    fn default() -> Self {
        Self {
            inpaint: InpaintMode::MirrorFill,
            refine: RefineMode::Smooth,
            scene: Some(SyntheticScene::default_room()),
            depth_noise: 0.0,
        }
    }
}

impl Oracle for MockOracle {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        req.validate()?;
        match req.kind {
            OracleKind::Inpaint => {
                let mask = req.mask.as_ref().expect("validated");
                let out = match &self.inpaint {
                    InpaintMode::ConstantFill { color } => constant_fill(&req.rgb, mask, *color),
                    InpaintMode::MirrorFill => mirror_fill(&req.rgb, mask, req.seed),
                };
                Ok(OracleResponse::image(out))
            }
            OracleKind::Refine => {
                let mask = req.mask.as_ref().expect("validated");
                let strength = req.strength.expect("validated");
                let out = match self.refine {
                    RefineMode::Identity => req.rgb.clone(),
                    RefineMode::Smooth => mock_refine(&req.rgb, mask, strength),
                };
                Ok(OracleResponse::image(out))
            }
            OracleKind::DepthRel | OracleKind::DepthMetric => self.depth(req).map(OracleResponse::depth),
        }
    }
}

impl MockOracle {
    fn depth(&self, req: &OracleRequest) -> Result<DepthMap, OracleError> {
        let scene = self
            .scene
            .as_ref()
            .ok_or_else(|| OracleError::Remote("no scene registered for synthetic depth".into()))?;
        let cam = req.camera.ok_or_else(|| {
            OracleError::InvalidRequest("synthetic depth needs camera metadata".into())
        })?;
        let intr = cam.intrinsics;
        if (intr.width as u32, intr.height as u32) != req.rgb.dimensions() {
            return Err(OracleError::InvalidRequest(
                "camera intrinsics do not match the image size".into(),
            ));
        }
        let (_, mut z) = scene.render(&cam.pose, &intr);
        if self.depth_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed ^ 0x5eed_d3e7);
            let normal = Normal::new(0.0, self.depth_noise).expect("finite noise");
            for v in z.data_mut() {
                *v *= 1.0 + normal.sample(&mut rng);
            }
        }
        let (values, scale_class) = match req.kind {
            OracleKind::DepthRel => {
                let a = hidden_relative_scale(req.seed);
                (z.map(|v| v * a), ScaleClass::Relative)
            }
            _ => (z, ScaleClass::Metric),
        };
        let mut depth = DepthMap::from_values(values, scale_class);
        // misses carry zero confidence and a zero value
        for (v, c) in depth.values.data_mut().iter_mut().zip(depth.confidence.data()) {
            if *c == 0.0 {
                *v = 0.0;
            }
        }
        Ok(depth)
    }
}

/// Per-call factor applied by the relative depth mock, in `[0.5, 2]`.
pub fn hidden_relative_scale(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e1a_71fe);
    let u: f64 = rng.random();
    0.5 * 4f64.powf(u)
}

fn masked(mask: &GrayImage, x: u32, y: u32) -> bool {
    mask.get_pixel(x, y)[0] >= MASK_THRESHOLD
}

pub fn constant_fill(rgb: &RgbImage, mask: &GrayImage, color: [u8; 3]) -> RgbImage {
    RgbImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        if masked(mask, x, y) {
            Rgb(color)
        } else {
            *rgb.get_pixel(x, y)
        }
    })
}

/// Source index for a masked position along one line of pixels.
///
/// The nearer valid neighbour (left/up on ties) defines a mirror axis; the
/// pixel reflected across it is used when valid, otherwise the neighbour.
fn reflect_source(valid: &[bool], i: usize) -> Option<usize> {
    let left = (0..i).rev().find(|&j| valid[j]);
    let right = (i + 1..valid.len()).find(|&j| valid[j]);
    let pick_left = match (left, right) {
        (None, None) => return None,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (Some(l), Some(r)) => i - l <= r - i,
    };
    if pick_left {
        let l = left.unwrap();
        let d = i - l;
        let src = l.checked_sub(d - 1).filter(|&s| valid[s]);
        Some(src.unwrap_or(l))
    } else {
        let r = right.unwrap();
        let d = r - i;
        let src = Some(r + d - 1).filter(|&s| s < valid.len() && valid[s]);
        Some(src.unwrap_or(r))
    }
}

/// Fills masked pixels by reflecting valid content across the nearest mask
/// border: rows first, then columns for rows without valid pixels, then a
/// seed-derived constant for anything left.
pub fn mirror_fill(rgb: &RgbImage, mask: &GrayImage, seed: u64) -> RgbImage {
    let (w, h) = rgb.dimensions();
    let mut out = rgb.clone();
    let mut done = Grid::from_fn(w as usize, h as usize, |x, y| !masked(mask, x as u32, y as u32));
    for y in 0..h {
        let valid: Vec<bool> = (0..w).map(|x| !masked(mask, x, y)).collect();
        for x in 0..w {
            if valid[x as usize] {
                continue;
            }
            if let Some(s) = reflect_source(&valid, x as usize) {
                out.put_pixel(x, y, *rgb.get_pixel(s as u32, y));
                done.set(x as usize, y as usize, true);
            }
        }
    }
    for x in 0..w {
        let valid: Vec<bool> = (0..h).map(|y| !masked(mask, x, y)).collect();
        for y in 0..h {
            if *done.get(x as usize, y as usize) {
                continue;
            }
            if let Some(s) = reflect_source(&valid, y as usize) {
                out.put_pixel(x, y, *rgb.get_pixel(x, s as u32));
                done.set(x as usize, y as usize, true);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fallback = Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]);
    for y in 0..h {
        for x in 0..w {
            if !*done.get(x as usize, y as usize) {
                out.put_pixel(x, y, fallback);
            }
        }
    }
    out
}

/// Moves masked pixels toward their clamped 3x3 box mean by `strength`.
pub fn mock_refine(rgb: &RgbImage, mask: &GrayImage, strength: f32) -> RgbImage {
    let (w, h) = rgb.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let p = *rgb.get_pixel(x, y);
        if !masked(mask, x, y) {
            return p;
        }
        let mut sum = [0.0f32; 3];
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as u32;
                let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as u32;
                let q = rgb.get_pixel(sx, sy);
                for c in 0..3 {
                    sum[c] += q[c] as f32;
                }
            }
        }
        let mut o = [0u8; 3];
        for c in 0..3 {
            let v = p[c] as f32 + strength * (sum[c] / 9.0 - p[c] as f32);
            o[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(o)
    })
}

/// Wraps an oracle and fails the calls whose 0-based index is listed.
pub struct FailingOracle<O> {
    pub inner: O,
    pub fail_on: Vec<usize>,
    calls: AtomicUsize,
}

impl<O> FailingOracle<O> {
    pub fn new(inner: O, fail_on: Vec<usize>) -> Self {
        Self {
            inner,
            fail_on,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<O: Oracle> Oracle for FailingOracle<O> {
    fn call(&self, req: &OracleRequest) -> Result<OracleResponse, OracleError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on.contains(&i) {
            return Err(OracleError::Transport(format!("injected failure on call {i}")));
        }
        self.inner.call(req)
    }
}
