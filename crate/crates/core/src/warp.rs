//! Point-cloud rendering, forward-backward warp pairs and camera generators.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use image::ImageFormat;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraPose, CameraView, Intrinsics};
use crate::lift::{DepthMap, PointCloud};
use crate::raster::{Grid, Mask, RgbImage};

/// Relative depth slack under which a point still counts as visible after
/// the forward render. Absorbs z-buffer competition between samples of the
/// same surface that land on one pixel.
pub const SURVIVOR_DEPTH_TOLERANCE: f64 = 1e-2;

const EMPTY: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub rgb: RgbImage,
    /// Camera z-depth in meters; `NaN` where invalid.
    pub depth: Grid<f64>,
    pub valid: Mask,
    /// Index of the winning point per pixel.
    pub owner: Grid<Option<u32>>,
}

/// Z-buffer key: depth (as `f32` bits, order-preserving for positive values)
/// in the high word, point index in the low word, so `min` picks the
/// nearest point and the lowest index on ties.
#[inline]
fn zkey(z: f64, index: usize) -> u64 {
    ((z as f32).to_bits() as u64) << 32 | index as u64
}

/// Pixel footprint of each point: projected pixel +- (splat_px - 1).
fn footprint(
    p_cam: &Vector3<f64>,
    intr: &Intrinsics,
    splat_px: usize,
) -> Option<(i64, i64, i64)> {
    let (px, py) = intr.project(p_cam)?;
    if !(px.is_finite() && py.is_finite()) {
        return None;
    }
    let r = splat_px.max(1) as i64 - 1;
    Some((px.floor() as i64, py.floor() as i64, r))
}

/// Renders points with a square splat of side `2 * splat_px - 1` and a
/// z-buffer resolved to the nearest point, lowest index on ties.
pub fn render_pointcloud(
    pc: &PointCloud,
    pose: &CameraPose,
    intr: &Intrinsics,
    splat_px: usize,
) -> RenderedView {
    let (w, h) = (intr.width, intr.height);
    assert!(pc.len() < u32::MAX as usize, "point cloud too large");
    let zbuf: Vec<AtomicU64> = (0..w * h).map(|_| AtomicU64::new(EMPTY)).collect();
    let cam: Vec<Vector3<f64>> = pc.positions.par_iter().map(|p| pose.world_to_camera(p)).collect();

    cam.par_iter().enumerate().for_each(|(i, p)| {
        let Some((cx, cy, r)) = footprint(p, intr, splat_px) else {
            return;
        };
        let key = zkey(p.z, i);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                zbuf[y as usize * w + x as usize].fetch_min(key, Ordering::Relaxed);
            }
        }
    });

    let mut rgb = RgbImage::new(w, h, [0.0; 3]);
    let mut depth = Grid::new(w, h, f64::NAN);
    let mut valid = Mask::new(w, h, false);
    let mut owner = Grid::new(w, h, None);
    for (k, slot) in zbuf.iter().enumerate() {
        let key = slot.load(Ordering::Relaxed);
        if key == EMPTY {
            continue;
        }
        let i = (key & 0xFFFF_FFFF) as usize;
        rgb.data_mut()[k] = pc.colors[i];
        depth.data_mut()[k] = cam[i].z;
        valid.data_mut()[k] = true;
        owner.data_mut()[k] = Some(i as u32);
    }
    RenderedView {
        rgb,
        depth,
        valid,
        owner,
    }
}

/// Straightforward sequential z-buffer, the reference for [`render_pointcloud`].
pub fn render_pointcloud_reference(
    pc: &PointCloud,
    pose: &CameraPose,
    intr: &Intrinsics,
    splat_px: usize,
) -> RenderedView {
    let (w, h) = (intr.width, intr.height);
    let mut best = vec![EMPTY; w * h];
    for (i, p) in pc.positions.iter().enumerate() {
        let p = pose.world_to_camera(p);
        let Some((cx, cy, r)) = footprint(&p, intr, splat_px) else {
            continue;
        };
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                let k = y as usize * w + x as usize;
                let key = zkey(p.z, i);
                if key < best[k] {
                    best[k] = key;
                }
            }
        }
    }
    let mut out = RenderedView {
        rgb: RgbImage::new(w, h, [0.0; 3]),
        depth: Grid::new(w, h, f64::NAN),
        valid: Mask::new(w, h, false),
        owner: Grid::new(w, h, None),
    };
    for (k, &key) in best.iter().enumerate() {
        if key != EMPTY {
            let i = (key & 0xFFFF_FFFF) as usize;
            out.rgb.data_mut()[k] = pc.colors[i];
            out.depth.data_mut()[k] = pose.world_to_camera(&pc.positions[i]).z;
            out.valid.data_mut()[k] = true;
            out.owner.data_mut()[k] = Some(i as u32);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarpPair {
    /// Source view with the holes blanked to black.
    pub condition_rgb: RgbImage,
    /// `true` where the pixel did not survive the round trip.
    pub hole_mask: Mask,
    pub target_rgb: RgbImage,
}

/// Forward-backward warp of a source view through `pose_dst`.
///
/// Source pixels are unprojected with their metric depth and rendered at the
/// destination. A point survives when it lands inside the destination frame
/// within [`SURVIVOR_DEPTH_TOLERANCE`] of the z-buffer there. Survivors are
/// warped back to the source view; every other pixel with depth (occluded
/// or outside the frame) becomes a hole.
pub fn make_warp_pair(
    rgb: &RgbImage,
    depth: &DepthMap,
    pose_src: &CameraPose,
    pose_dst: &CameraPose,
    intr: &Intrinsics,
) -> WarpPair {
    let (w, h) = (intr.width, intr.height);
    assert_eq!(rgb.dims(), (w, h), "image does not match intrinsics");
    assert_eq!(depth.dims(), (w, h), "depth does not match intrinsics");

    let mut pc = PointCloud::default();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if depth.is_valid(i, 0.0) {
                let z = depth.values.data()[i];
                pc.push(pose_src.camera_to_world(&(intr.pixel_ray(x, y) * z)), rgb.data()[i], 0, 1.0);
            }
        }
    }

    let fwd = render_pointcloud(&pc, pose_dst, intr, 1);
    let mut survivors = PointCloud::default();
    for (i, p) in pc.positions.iter().enumerate() {
        let c = pose_dst.world_to_camera(p);
        let Some((cx, cy, _)) = footprint(&c, intr, 1) else {
            continue;
        };
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
            continue;
        }
        let zb = *fwd.depth.get(cx as usize, cy as usize);
        if c.z <= zb * (1.0 + SURVIVOR_DEPTH_TOLERANCE) {
            survivors.push(*p, pc.colors[i], 0, 1.0);
        }
    }

    let back = render_pointcloud(&survivors, pose_src, intr, 1);
    // pixels without depth never entered the warp and are not holes
    let hole_mask = Grid::from_fn(w, h, |x, y| depth.is_valid(y * w + x, 0.0) && !back.valid.get(x, y));
    let mut condition_rgb = RgbImage::new(w, h, [0.0; 3]);
    condition_rgb.copy_masked(rgb, &hole_mask.not());
    WarpPair {
        condition_rgb,
        hole_mask,
        target_rgb: rgb.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpPairMeta {
    pub pose_src: CameraPose,
    pub pose_dst: CameraPose,
    pub intrinsics: Intrinsics,
}

/// Writes `{dir}/{id}/condition.png, mask.png (255 = hole), target.png, meta.json`.
pub fn write_warp_pair(dir: &Path, id: &str, pair: &WarpPair, meta: &WarpPairMeta) -> std::io::Result<()> {
    let d = dir.join(id);
    std::fs::create_dir_all(&d)?;
    let io = |e: image::ImageError| std::io::Error::other(e.to_string());
    pair.condition_rgb.to_rgb8().save_with_format(d.join("condition.png"), ImageFormat::Png).map_err(io)?;
    pair.hole_mask.to_gray().save_with_format(d.join("mask.png"), ImageFormat::Png).map_err(io)?;
    pair.target_rgb.to_rgb8().save_with_format(d.join("target.png"), ImageFormat::Png).map_err(io)?;
    std::fs::write(d.join("meta.json"), serde_json::to_vec_pretty(meta).expect("meta serializes"))
}

/// Translations of the inpainting grid: the 6 face centers, then the 8
/// corners of an axis-aligned cube centered at the origin.
pub fn grid_translations(cube_side: f64) -> Vec<Vector3<f64>> {
    let h = cube_side / 2.0;
    let mut t = Vec::with_capacity(14);
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut v = Vector3::zeros();
            v[axis] = sign * h;
            t.push(v);
        }
    }
    for sx in [1.0, -1.0] {
        for sy in [1.0, -1.0] {
            for sz in [1.0, -1.0] {
                t.push(Vector3::new(sx * h, sy * h, sz * h));
            }
        }
    }
    t
}

/// The 14 grid rotations in world terms: forward, backward, left, right,
/// up, down, then forward/backward/left/right each rolled by +45 and -45
/// degrees.
pub fn grid_rotations() -> Vec<CameraPose> {
    let headings = [0.0, PI, -FRAC_PI_2, FRAC_PI_2];
    let mut r: Vec<CameraPose> = headings.iter().map(|&yaw| CameraPose::look(yaw, 0.0, 0.0)).collect();
    r.push(CameraPose::look(0.0, FRAC_PI_2, 0.0));
    r.push(CameraPose::look(0.0, -FRAC_PI_2, 0.0));
    for &yaw in &headings {
        for roll in [FRAC_PI_4, -FRAC_PI_4] {
            r.push(CameraPose::look(yaw, 0.0, roll));
        }
    }
    r
}

/// Cartesian product of [`grid_translations`] and [`grid_rotations`],
/// translation-major: 196 views.
pub fn camera_grid(cube_side: f64, intr: &Intrinsics) -> Vec<CameraView> {
    assert!(cube_side > 0.0, "cube side must be positive");
    let rotations = grid_rotations();
    grid_translations(cube_side)
        .into_iter()
        .flat_map(|t| {
            rotations.iter().map(move |r| CameraView {
                pose: r.with_translation(t),
                intrinsics: *intr,
            })
        })
        .collect()
}

/// Three inward-looking circles of `n` views around the origin.
///
/// Trajectory 1 has no roll at height 0; trajectory 2 rolls +45 degrees at
/// height -0.5 m; trajectory 3 rolls -45 degrees at height +0.5 m. Every
/// camera looks at the origin.
pub fn eval_trajectories(radius: f64, n: usize, fov: f64, resolution: usize) -> [Vec<CameraView>; 3] {
    let intr = Intrinsics::square(fov, resolution).expect("valid fov and resolution");
    let circle = |roll: f64, z: f64| -> Vec<CameraView> {
        (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                let eye = Vector3::new(radius * a.cos(), radius * a.sin(), z);
                CameraView {
                    pose: CameraPose::look_at(eye, Vector3::zeros(), roll).expect("eye off target"),
                    intrinsics: intr,
                }
            })
            .collect()
    };
    [
        circle(0.0, 0.0),
        circle(FRAC_PI_4, -0.5),
        circle(-FRAC_PI_4, 0.5),
    ]
}
