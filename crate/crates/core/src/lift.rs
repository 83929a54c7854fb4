//! Lifting rendered panorama views to an approximately metric point cloud.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraPose, EquirectPanorama, Intrinsics};
use crate::raster::{Grid, RgbImage, ScalarMap};

/// Confidence below which depth predictions are discarded.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f32 = 0.3;

/// Fewest jointly valid pixels accepted by [`align_scale_quantile`].
pub const MIN_ALIGNMENT_PIXELS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftError {
    #[error("depth maps differ in size: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("only {found} confidence-valid pixels, need at least {needed}")]
    InsufficientData { found: usize, needed: usize },
    #[error("degenerate depth: zero inter-quantile range")]
    DegenerateDepth,
    #[error("view {view}: only {fraction:.3} of pixels overlap earlier views (need {required:.3})")]
    InsufficientOverlap {
        view: usize,
        fraction: f64,
        required: f64,
    },
    #[error("view {0} has a translated pose; stitching needs rotation-only views")]
    NotRotationOnly(usize),
    #[error("no views to stitch")]
    NoViews,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleClass {
    /// Defined up to an unknown scale factor.
    Relative,
    /// Meters.
    Metric,
}

/// Per-pixel z-depth with confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Grid<f64>,
    /// In `[0, 1]`; zero marks pixels without a prediction.
    pub confidence: ScalarMap,
    pub scale_class: ScaleClass,
}

impl DepthMap {
    /// Full-confidence map; non-finite or non-positive values get zero confidence.
    pub fn from_values(values: Grid<f64>, scale_class: ScaleClass) -> Self {
        let confidence = values.map(|&v| if v.is_finite() && v > 0.0 { 1.0 } else { 0.0 });
        Self {
            values,
            confidence,
            scale_class,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    #[inline]
    pub fn is_valid(&self, i: usize, threshold: f32) -> bool {
        let v = self.values.data()[i];
        self.confidence.data()[i] >= threshold && self.confidence.data()[i] > 0.0 && v.is_finite() && v > 0.0
    }

    pub fn scaled(&self, s: f64, scale_class: ScaleClass) -> DepthMap {
        DepthMap {
            values: self.values.map(|v| v * s),
            confidence: self.confidence.clone(),
            scale_class,
        }
    }
}

/// Colored points in world coordinates (meters, z-up).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// 0..=255 scale.
    pub colors: Vec<[f32; 3]>,
    pub source_view: Vec<u16>,
    pub confidence: Vec<f32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Vector3<f64>, color: [f32; 3], view: u16, conf: f32) {
        self.positions.push(p);
        self.colors.push(color);
        self.source_view.push(view);
        self.confidence.push(conf);
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.colors.extend_from_slice(&other.colors);
        self.source_view.extend_from_slice(&other.source_view);
        self.confidence.extend_from_slice(&other.confidence);
    }

    pub fn scale(&mut self, s: f64) {
        for p in &mut self.positions {
            *p *= s;
        }
    }
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sort_finite(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite depth"));
    v
}

/// Scale mapping relative depth onto metric depth by matching the spread
/// between two quantiles of each map.
///
/// Only pixels valid (confidence at or above `conf_threshold`, finite,
/// positive) in both maps participate.
pub fn align_scale_quantile(
    d_rel: &DepthMap,
    d_metric: &DepthMap,
    q_low: f64,
    q_high: f64,
    conf_threshold: f32,
) -> Result<f64, LiftError> {
    if d_rel.dims() != d_metric.dims() {
        return Err(LiftError::SizeMismatch(d_rel.dims(), d_metric.dims()));
    }
    let mut rel = Vec::new();
    let mut met = Vec::new();
    for i in 0..d_rel.values.len() {
        if d_rel.is_valid(i, conf_threshold) && d_metric.is_valid(i, conf_threshold) {
            rel.push(d_rel.values.data()[i]);
            met.push(d_metric.values.data()[i]);
        }
    }
    if rel.len() < MIN_ALIGNMENT_PIXELS {
        return Err(LiftError::InsufficientData {
            found: rel.len(),
            needed: MIN_ALIGNMENT_PIXELS,
        });
    }
    let rel = sort_finite(rel);
    let met = sort_finite(met);
    let rel_spread = quantile_sorted(&rel, q_high) - quantile_sorted(&rel, q_low);
    if !(rel_spread > 0.0) {
        return Err(LiftError::DegenerateDepth);
    }
    let met_spread = quantile_sorted(&met, q_high) - quantile_sorted(&met, q_low);
    Ok(met_spread / rel_spread)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClearanceReport {
    pub applied_scale: f64,
    /// Mean `-z` over ground points before scaling; `None` without ground points.
    pub ground_height: Option<f64>,
    pub ground_points: usize,
}

/// Scales the cloud about the origin so the mean height of the camera over
/// the ground points (`z < 0`) is at least `min_height`.
pub fn enforce_ground_clearance(pc: &mut PointCloud, min_height: f64) -> ClearanceReport {
    let ground: Vec<f64> = pc
        .positions
        .iter()
        .filter(|p| p.z < 0.0)
        .map(|p| -p.z)
        .collect();
    if ground.is_empty() {
        log::warn!("no ground points (z < 0); skipping ground clearance");
        return ClearanceReport {
            applied_scale: 1.0,
            ground_height: None,
            ground_points: 0,
        };
    }
    let h = ground.iter().sum::<f64>() / ground.len() as f64;
    let applied_scale = if h < min_height { min_height / h } else { 1.0 };
    if applied_scale != 1.0 {
        pc.scale(applied_scale);
    }
    ClearanceReport {
        applied_scale,
        ground_height: Some(h),
        ground_points: ground.len(),
    }
}

/// Back-projects every valid pixel of a metric depth map into world space.
pub fn unproject_view(
    rgb: &RgbImage,
    depth: &DepthMap,
    pose: &CameraPose,
    intr: &Intrinsics,
    conf_threshold: f32,
    view_id: u16,
) -> PointCloud {
    let mut pc = PointCloud::default();
    let (w, h) = depth.dims();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.is_valid(i, conf_threshold) {
                continue;
            }
            let z = depth.values.data()[i];
            let p = pose.camera_to_world(&(intr.pixel_ray(x, y) * z));
            pc.push(p, rgb.data()[i], view_id, depth.confidence.data()[i]);
        }
    }
    pc
}

/// One rotation-only view taking part in stitching.
#[derive(Clone, Debug)]
pub struct StitchView {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchOptions {
    /// Width of the equirectangular grid used to match rays across views.
    pub pano_width: usize,
    pub conf_threshold: f32,
    /// Minimum fraction of a view's valid pixels that must land on rays
    /// already covered by earlier views.
    pub min_overlap: f64,
    /// Fit `s * d + b` per view instead of `s * d`.
    pub fit_shift: bool,
}

impl Default for StitchOptions {
    fn default() -> Self {
        Self {
            pano_width: 2048,
            conf_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            min_overlap: 0.2,
            fit_shift: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StitchResult {
    pub cloud: PointCloud,
    /// Per-view `(scale, shift)` applied to the input depth.
    pub alignment: Vec<(f64, f64)>,
    /// Aligned metric depth per view.
    pub depths: Vec<DepthMap>,
}

/// Aligns each view's depth to the views before it by least squares over
/// pixels sharing a panorama ray bin, then merges the views, keeping the
/// highest-confidence view per bin.
///
/// The first view is scaled by `anchor_scale` and defines the metric frame.
pub fn stitch_depth_views(
    views: &[StitchView],
    anchor_scale: f64,
    opts: &StitchOptions,
) -> Result<StitchResult, LiftError> {
    if views.is_empty() {
        return Err(LiftError::NoViews);
    }
    for (k, v) in views.iter().enumerate() {
        if !v.pose.is_rotation_only() {
            return Err(LiftError::NotRotationOnly(k));
        }
    }
    let bins = EquirectPanorama::new(opts.pano_width, opts.pano_width / 2)
        .map_err(|_| LiftError::NoViews)?;
    let nbins = bins.width() * bins.height();
    // accumulated aligned range per bin
    let mut range_sum = vec![0.0f64; nbins];
    let mut range_cnt = vec![0u32; nbins];
    let mut alignment = Vec::with_capacity(views.len());
    let mut depths = Vec::with_capacity(views.len());
    // per view: (pixel index, bin, ray norm)
    let mut samples: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(views.len());

    for (k, view) in views.iter().enumerate() {
        let (w, h) = view.depth.dims();
        let mut vs = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !view.depth.is_valid(i, opts.conf_threshold) {
                    continue;
                }
                let ray = view.intrinsics.pixel_ray(x, y);
                let dir = view.pose.rotation * ray;
                vs.push((i, bins.direction_to_index(&dir), ray.norm()));
            }
        }

        let (s, b) = if k == 0 {
            (anchor_scale, 0.0)
        } else {
            // targets expressed as z-depth in this view's frame
            let pairs: Vec<(f64, f64)> = vs
                .iter()
                .filter(|(_, bin, _)| range_cnt[*bin] > 0)
                .map(|&(i, bin, n)| {
                    let target = range_sum[bin] / range_cnt[bin] as f64 / n;
                    (view.depth.values.data()[i], target)
                })
                .collect();
            let fraction = if vs.is_empty() {
                0.0
            } else {
                pairs.len() as f64 / vs.len() as f64
            };
            if fraction < opts.min_overlap || pairs.is_empty() {
                return Err(LiftError::InsufficientOverlap {
                    view: k,
                    fraction,
                    required: opts.min_overlap,
                });
            }
            solve_alignment(&pairs, opts.fit_shift)
        };
        alignment.push((s, b));
        let aligned = DepthMap {
            values: view.depth.values.map(|&d| s * d + b),
            confidence: view.depth.confidence.clone(),
            scale_class: ScaleClass::Metric,
        };
        for &(i, bin, n) in &vs {
            range_sum[bin] += aligned.values.data()[i] * n;
            range_cnt[bin] += 1;
        }
        depths.push(aligned);
        samples.push(vs);
    }

    // best (confidence, view) per bin; earlier views win ties
    let mut owner: Vec<Option<(f32, usize)>> = vec![None; nbins];
    for (k, vs) in samples.iter().enumerate() {
        for &(i, bin, _) in vs {
            let c = depths[k].confidence.data()[i];
            match owner[bin] {
                Some((bc, _)) if bc >= c => {}
                _ => owner[bin] = Some((c, k)),
            }
        }
    }
    let mut cloud = PointCloud::default();
    for (k, vs) in samples.iter().enumerate() {
        let view = &views[k];
        let w = view.depth.dims().0;
        for &(i, bin, _) in vs {
            if owner[bin].map(|(_, o)| o) != Some(k) {
                continue;
            }
            let z = depths[k].values.data()[i];
            if !(z.is_finite() && z > 0.0) {
                continue;
            }
            let p = view
                .pose
                .camera_to_world(&(view.intrinsics.pixel_ray(i % w, i / w) * z));
            cloud.push(p, view.rgb.data()[i], k as u16, depths[k].confidence.data()[i]);
        }
    }
    Ok(StitchResult {
        cloud,
        alignment,
        depths,
    })
}

/// Least squares for `target ≈ s * d (+ b)`.
fn solve_alignment(pairs: &[(f64, f64)], fit_shift: bool) -> (f64, f64) {
    if !fit_shift {
        let num: f64 = pairs.iter().map(|(d, t)| d * t).sum();
        let den: f64 = pairs.iter().map(|(d, _)| d * d).sum();
        return (num / den, 0.0);
    }
    let n = pairs.len() as f64;
    let (sd, st) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), (d, t)| (a + d, b + t));
    let (md, mt) = (sd / n, st / n);
    let (mut cov, mut var) = (0.0, 0.0);
    for (d, t) in pairs {
        cov += (d - md) * (t - mt);
        var += (d - md) * (d - md);
    }
    if var <= 0.0 {
        return (mt / md, 0.0);
    }
    let s = cov / var;
    (s, mt - s * md)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, w: usize) -> DepthMap {
        let h = values.len() / w;
        DepthMap::from_values(Grid::from_vec(w, h, values), ScaleClass::Relative)
    }

    #[test]
    fn quantile_matches_numpy_linear() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        // numpy.quantile(arange(1, 101), 0.2) == 20.8
        assert!((quantile_sorted(&v, 0.2) - 20.8).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.8) - 80.2).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[3.0], 0.5), 3.0);
    }

    #[test]
    fn identical_maps_align_to_one() {
        let d = map((0..400).map(|i| 1.0 + (i as f64 * 0.37).sin().abs() * 5.0).collect(), 20);
        assert_eq!(align_scale_quantile(&d, &d, 0.2, 0.8, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn doubled_metric_aligns_to_two() {
        let vals: Vec<f64> = (0..400).map(|i| 0.5 + ((i * 7919) % 113) as f64 * 0.1).collect();
        let d = map(vals.clone(), 20);
        let m = map(vals.iter().map(|v| 2.0 * v).collect(), 20);
        assert_eq!(align_scale_quantile(&d, &m, 0.2, 0.8, 0.3).unwrap(), 2.0);
    }

    #[test]
    fn uniform_ramps_align_to_three() {
        let d = map((1..=100).map(|i| i as f64).collect(), 10);
        let m = map((1..=100).map(|i| 3.0 * i as f64).collect(), 10);
        let s = align_scale_quantile(&d, &m, 0.2, 0.8, 0.3).unwrap();
        assert!((s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn constant_relative_depth_is_degenerate() {
        let d = map(vec![2.0; 200], 20);
        let m = map((0..200).map(|i| 1.0 + i as f64).collect(), 20);
        assert_eq!(
            align_scale_quantile(&d, &m, 0.2, 0.8, 0.3),
            Err(LiftError::DegenerateDepth)
        );
    }

    #[test]
    fn too_few_confident_pixels() {
        let mut d = map((0..200).map(|i| 1.0 + i as f64).collect(), 20);
        for c in d.confidence.data_mut().iter_mut().skip(50) {
            *c = 0.1;
        }
        let err = align_scale_quantile(&d, &d.clone(), 0.2, 0.8, 0.3).unwrap_err();
        assert_eq!(err, LiftError::InsufficientData { found: 50, needed: 100 });
    }

    #[test]
    fn size_mismatch() {
        let a = map(vec![1.0; 200], 20);
        let b = map(vec![1.0; 200], 10);
        assert!(matches!(
            align_scale_quantile(&a, &b, 0.2, 0.8, 0.3),
            Err(LiftError::SizeMismatch(..))
        ));
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        let mut pc = PointCloud::default();
        for p in points {
            pc.push(Vector3::from(*p), [0.0; 3], 0, 1.0);
        }
        pc
    }

    #[test]
    fn ground_at_one_meter_is_raised() {
        let mut pc = cloud(&[[1.0, 0.0, -1.0], [0.0, 2.0, -1.0], [3.0, 1.0, -1.0]]);
        let r = enforce_ground_clearance(&mut pc, 1.5);
        assert_eq!(r.applied_scale, 1.5);
        assert!(pc.positions.iter().all(|p| (p.z + 1.5).abs() < 1e-12));
    }

    #[test]
    fn ground_already_low_enough() {
        let mut pc = cloud(&[[1.0, 0.0, -2.0], [0.0, 1.0, -2.0]]);
        let before = pc.clone();
        let r = enforce_ground_clearance(&mut pc, 1.5);
        assert_eq!(r.applied_scale, 1.0);
        assert_eq!(pc, before);
    }

    #[test]
    fn mixed_cloud_scales_ceiling_too() {
        let mut pc = cloud(&[[0.0, 0.0, -0.5], [0.0, 0.0, -1.0], [0.0, 0.0, 1.2]]);
        let r = enforce_ground_clearance(&mut pc, 1.5);
        assert!((r.applied_scale - 2.0).abs() < 1e-12);
        assert!((pc.positions[2].z - 2.4).abs() < 1e-12);
        let ground: Vec<f64> = pc.positions.iter().filter(|p| p.z < 0.0).map(|p| -p.z).collect();
        assert!((ground.iter().sum::<f64>() / ground.len() as f64 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn no_ground_is_a_no_op() {
        let mut pc = cloud(&[[0.0, 0.0, 1.0]]);
        let r = enforce_ground_clearance(&mut pc, 1.5);
        assert_eq!(r.ground_height, None);
        assert_eq!(r.applied_scale, 1.0);
    }

    #[test]
    fn center_pixel_lands_on_axis() {
        let intr = Intrinsics::square(1.0, 5).unwrap();
        let rgb = RgbImage::new(5, 5, [1.0, 2.0, 3.0]);
        let d = DepthMap::from_values(Grid::new(5, 5, 2.0), ScaleClass::Metric);
        let pc = unproject_view(&rgb, &d, &CameraPose::identity(), &intr, 0.3, 4);
        assert_eq!(pc.len(), 25);
        let center = pc.positions[12];
        assert!((center - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(pc.source_view[12], 4);
    }

    #[test]
    fn shift_fit_recovers_affine() {
        let pairs: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, 2.5 * i as f64 + 0.7)).collect();
        let (s, b) = solve_alignment(&pairs, true);
        assert!((s - 2.5).abs() < 1e-12 && (b - 0.7).abs() < 1e-12);
    }

    #[test]
    fn stitch_rejects_translated_views() {
        let intr = Intrinsics::square(1.0, 4).unwrap();
        let v = StitchView {
            rgb: RgbImage::new(4, 4, [0.0; 3]),
            depth: DepthMap::from_values(Grid::new(4, 4, 1.0), ScaleClass::Relative),
            pose: CameraPose::identity().with_translation(Vector3::new(0.1, 0.0, 0.0)),
            intrinsics: intr,
        };
        assert_eq!(
            stitch_depth_views(&[v], 1.0, &StitchOptions::default()).unwrap_err(),
            LiftError::NotRotationOnly(0)
        );
    }
}
