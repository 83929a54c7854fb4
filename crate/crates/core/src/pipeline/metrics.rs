//! Desk-scale evaluation metrics.

use thiserror::Error;

use crate::geometry::EquirectPanorama;
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("images differ in size: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("metric undefined on an empty mask")]
    EmptyMask,
}

/// PSNR in dB over the pixels selected by `mask` (all pixels if `None`),
/// peak 255. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<f64, MetricError> {
    if !a.same_dims(b) {
        return Err(MetricError::SizeMismatch(a.dims(), b.dims()));
    }
    if let Some(m) = mask {
        if !m.same_dims(a) {
            return Err(MetricError::SizeMismatch(a.dims(), m.dims()));
        }
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        for c in 0..3 {
            let d = p[c] as f64 - q[c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Text form of a PSNR value; infinite values print as `inf`.
pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_string()
    } else {
        format!("{db:.3}")
    }
}

/// Fraction of filled panorama pixels.
pub fn coverage(pano: &EquirectPanorama) -> f64 {
    pano.coverage()
}
