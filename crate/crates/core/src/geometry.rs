//! Camera models and the perspective <-> equirectangular coordinate machinery.
//!
//! Conventions used throughout the crate:
//!
//! * World frame is right-handed and z-up: `+x` is the direction the input
//!   photograph looks at, `+y` is to its left, and the ground lies at `z < 0`.
//! * Camera frame follows the usual computer-vision layout: `+x` right,
//!   `+y` down, `+z` forward. [`CameraPose::rotation`] maps camera-frame
//!   vectors into the world frame.
//! * Panorama longitude `theta` grows to the right (clockwise seen from
//!   above) and latitude `phi` grows downward, so panorama row 0 is the
//!   zenith and `(theta, phi) = (0, 0)` is world `+x`.
//! * Normalized image coordinates `u, v` span `[-1, 1]` from the left/top
//!   edge to the right/bottom edge; pixel centers sit at half-integers.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{
    bilinear_taps, gaussian_blur, sample_rgb, sample_scalar, EdgeMode, Grid, Mask, RgbImage,
    ScalarMap,
};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole intrinsics expressed through fields of view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    /// Horizontal field of view in radians.
    pub fov_x: f64,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fov_x: f64, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        for (name, fov) in [("fov_x", fov_x), ("fov_y", fov_y)] {
            if !(fov > 0.0 && fov < PI) {
                return Err(GeometryError::Domain(format!(
                    "{name} = {fov} rad must lie in (0, pi)"
                )));
            }
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::Domain(format!(
                "image size {width}x{height} must be non-empty"
            )));
        }
        Ok(Self {
            fov_x,
            fov_y,
            width,
            height,
        })
    }

    /// Derives `fov_y` from `fov_x` assuming the same focal length on both axes.
    pub fn from_fov_x(fov_x: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_x > 0.0 && fov_x < PI) {
            return Err(GeometryError::Domain(format!(
                "fov_x = {fov_x} rad must lie in (0, pi)"
            )));
        }
        let fov_y = 2.0 * ((fov_x / 2.0).tan() * height as f64 / width.max(1) as f64).atan();
        Self::new(fov_x, fov_y, width, height)
    }

    pub fn square(fov: f64, side: usize) -> Result<Self> {
        Self::new(fov, fov, side, side)
    }

    pub fn focal_x(&self) -> f64 {
        self.width as f64 / 2.0 / (self.fov_x / 2.0).tan()
    }

    pub fn focal_y(&self) -> f64 {
        self.height as f64 / 2.0 / (self.fov_y / 2.0).tan()
    }

    /// Normalized coordinates of pixel `(x, y)`'s center.
    #[inline]
    pub fn pixel_center_uv(&self, x: usize, y: usize) -> (f64, f64) {
        (
            2.0 * (x as f64 + 0.5) / self.width as f64 - 1.0,
            2.0 * (y as f64 + 0.5) / self.height as f64 - 1.0,
        )
    }

    /// Camera-frame ray through normalized `(u, v)`, scaled to unit z.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(
            u * (self.fov_x / 2.0).tan(),
            v * (self.fov_y / 2.0).tan(),
            1.0,
        )
    }

    #[inline]
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let (u, v) = self.pixel_center_uv(x, y);
        self.ray(u, v)
    }

    /// Projects a camera-frame point to continuous edge-origin pixel
    /// coordinates. Points at or behind the camera plane return `None`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 1e-12 {
            return None;
        }
        let u = p.x / p.z / (self.fov_x / 2.0).tan();
        let v = p.y / p.z / (self.fov_y / 2.0).tan();
        Some((
            (u + 1.0) * 0.5 * self.width as f64,
            (v + 1.0) * 0.5 * self.height as f64,
        ))
    }

    /// Solid angle of the view frustum in steradians.
    pub fn solid_angle(&self) -> f64 {
        let a = (self.fov_x / 2.0).tan();
        let b = (self.fov_y / 2.0).tan();
        4.0 * (a * b / (1.0 + a * a + b * b).sqrt()).atan()
    }
}

/// Rigid camera pose, world <- camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::Domain(format!(
                "rotation is not a proper rotation (orthonormality error {err:e})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::Domain("translation must be finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera at the origin looking down world `+x`, image-up along `+z`.
    pub fn identity() -> Self {
        Self::look(0.0, 0.0, 0.0)
    }

    /// Rotation-only pose from yaw (positive turns right), pitch (positive
    /// looks up) and roll about the optical axis (positive rotates the
    /// camera clockwise as seen from behind it).
    pub fn look(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cp * cy, -cp * sy, sp);
        let right0 = Vector3::new(-sy, -cy, 0.0);
        let down0 = forward.cross(&right0);
        let (sr, cr) = roll.sin_cos();
        let right = right0 * cr + down0 * sr;
        let down = down0 * cr - right0 * sr;
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: Vector3::zeros(),
        }
    }

    /// Pose at `eye` whose optical axis passes through `target`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, roll: f64) -> Result<Self> {
        let f = target - eye;
        let n = f.norm();
        if n < 1e-12 {
            return Err(GeometryError::Domain("eye and target coincide".into()));
        }
        let f = f / n;
        let yaw = (-f.y).atan2(f.x);
        let pitch = f.z.clamp(-1.0, 1.0).asin();
        Ok(Self::look(yaw, pitch, roll).with_translation(eye))
    }

    pub fn with_translation(mut self, t: Vector3<f64>) -> Self {
        self.translation = t;
        self
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_rotation_only(&self) -> bool {
        self.translation.iter().all(|v| *v == 0.0)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    #[inline]
    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    /// 3x3 rotation, row-major.
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        let rotation = Matrix3::from_row_slice(&repr.rotation);
        let translation = Vector3::from(repr.translation);
        CameraPose::new(rotation, translation).map_err(serde::de::Error::custom)
    }
}

/// A planned or rendered camera: pose plus intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

/// Normalized pixel coordinates to view angles, linear in the field of view.
pub fn pixel_to_angles(u: f64, v: f64, intr: &Intrinsics) -> Result<(f64, f64)> {
    if !(u.abs() <= 1.0 && v.abs() <= 1.0) {
        return Err(GeometryError::Domain(format!(
            "normalized coordinates ({u}, {v}) outside [-1, 1]"
        )));
    }
    Ok((u * intr.fov_x / 2.0, v * intr.fov_y / 2.0))
}

/// Inverse of [`pixel_to_angles`].
pub fn angles_to_pixel(theta: f64, phi: f64, intr: &Intrinsics) -> (f64, f64) {
    (theta * 2.0 / intr.fov_x, phi * 2.0 / intr.fov_y)
}

/// View angles to continuous equirectangular coordinates.
#[inline]
pub fn angles_to_equirect(theta: f64, phi: f64, pano_w: usize, pano_h: usize) -> (f64, f64) {
    (
        (theta + PI) / TAU * pano_w as f64,
        (phi + FRAC_PI_2) / PI * pano_h as f64,
    )
}

/// Inverse of [`angles_to_equirect`].
#[inline]
pub fn equirect_to_angles(x: f64, y: f64, pano_w: usize, pano_h: usize) -> (f64, f64) {
    (
        x / pano_w as f64 * TAU - PI,
        y / pano_h as f64 * PI - FRAC_PI_2,
    )
}

/// Longitude/latitude of a world direction (need not be normalized).
#[inline]
pub fn direction_to_angles(d: &Vector3<f64>) -> (f64, f64) {
    let theta = (-d.y).atan2(d.x);
    let phi = (-d.z).atan2(d.x.hypot(d.y));
    (theta, phi)
}

/// Unit world direction for longitude/latitude.
#[inline]
pub fn angles_to_direction(theta: f64, phi: f64) -> Vector3<f64> {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vector3::new(cp * ct, -cp * st, -sp)
}

/// 2:1 equirectangular canvas with a per-pixel fill mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EquirectPanorama {
    pub rgb: RgbImage,
    /// `true` where the pixel holds known or synthesized content.
    pub fill_mask: Mask,
}

impl EquirectPanorama {
    /// Empty (all-unfilled, black) panorama.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(GeometryError::Domain(format!(
                "panorama must be 2:1, got {width}x{height}"
            )));
        }
        Ok(Self {
            rgb: RgbImage::new(width, height, [0.0; 3]),
            fill_mask: Mask::new(width, height, false),
        })
    }

    pub fn from_parts(rgb: RgbImage, fill_mask: Mask) -> Result<Self> {
        let mut pano = Self::new(rgb.width(), rgb.height())?;
        if !rgb.same_dims(&fill_mask) {
            return Err(GeometryError::Domain("rgb and fill mask sizes differ".into()));
        }
        pano.rgb = rgb;
        pano.fill_mask = fill_mask;
        Ok(pano)
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    /// Fraction of filled pixels (plain pixel mean).
    pub fn coverage(&self) -> f64 {
        self.fill_mask.fraction()
    }

    /// Fraction of the sphere's solid angle covered by filled pixels.
    pub fn solid_angle_coverage(&self) -> f64 {
        let (w, h) = (self.width(), self.height());
        let mut covered = 0.0;
        let mut total = 0.0;
        for y in 0..h {
            let (_, phi) = equirect_to_angles(0.0, y as f64 + 0.5, w, h);
            let weight = phi.cos();
            let row = &self.fill_mask.data()[y * w..(y + 1) * w];
            covered += weight * row.iter().filter(|&&b| b).count() as f64;
            total += weight * w as f64;
        }
        covered / total
    }

    /// World direction through the center of pixel `(x, y)`.
    #[inline]
    pub fn pixel_direction(&self, x: usize, y: usize) -> Vector3<f64> {
        let (theta, phi) =
            equirect_to_angles(x as f64 + 0.5, y as f64 + 0.5, self.width(), self.height());
        angles_to_direction(theta, phi)
    }

    /// Continuous equirectangular coordinates of a world direction.
    #[inline]
    pub fn direction_to_equirect(&self, d: &Vector3<f64>) -> (f64, f64) {
        let (theta, phi) = direction_to_angles(d);
        angles_to_equirect(theta, phi, self.width(), self.height())
    }

    /// Linear index of the pixel containing direction `d`.
    #[inline]
    pub fn direction_to_index(&self, d: &Vector3<f64>) -> usize {
        let (x, y) = self.direction_to_equirect(d);
        let (w, h) = (self.width(), self.height());
        let xi = (x.floor() as i64).rem_euclid(w as i64) as usize;
        let yi = (y.floor() as i64).clamp(0, h as i64 - 1) as usize;
        yi * w + xi
    }

    /// Clears `mask`ed pixels to unfilled black.
    pub fn clear(&mut self, mask: &Mask) {
        for (i, &m) in mask.data().iter().enumerate() {
            if m {
                self.rgb.data_mut()[i] = [0.0; 3];
                self.fill_mask.data_mut()[i] = false;
            }
        }
    }
}

fn require_rotation_only(pose: &CameraPose) -> Result<()> {
    if pose.is_rotation_only() {
        Ok(())
    } else {
        Err(GeometryError::Contract(format!(
            "panorama views support rotation only, got translation {:?}",
            pose.translation.as_slice()
        )))
    }
}

/// Renders a perspective view of the panorama.
///
/// Returns the image and a mask that is `true` where every bilinear tap with
/// non-zero weight lies on a filled panorama pixel.
pub fn render_view_from_pano(
    pano: &EquirectPanorama,
    pose: &CameraPose,
    intr: &Intrinsics,
) -> Result<(RgbImage, Mask)> {
    require_rotation_only(pose)?;
    let (pw, ph) = (pano.width(), pano.height());
    let rows: Vec<(Vec<[f32; 3]>, Vec<bool>)> = (0..intr.height)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(intr.width);
            let mut known = Vec::with_capacity(intr.width);
            for x in 0..intr.width {
                let d = pose.rotation * intr.pixel_ray(x, y);
                let (ex, ey) = pano.direction_to_equirect(&d);
                let (sx, sy) = (ex - 0.5, ey - 0.5);
                rgb.push(sample_rgb(&pano.rgb, sx, sy, EdgeMode::Wrap));
                let taps = bilinear_taps(sx, sy, pw, ph, EdgeMode::Wrap);
                known.push(
                    taps.iter()
                        .all(|&(i, w)| w == 0.0 || pano.fill_mask.data()[i]),
                );
            }
            (rgb, known)
        })
        .collect();
    let mut rgb = Vec::with_capacity(intr.width * intr.height);
    let mut known = Vec::with_capacity(intr.width * intr.height);
    for (r, k) in rows {
        rgb.extend(r);
        known.extend(k);
    }
    Ok((
        Grid::from_vec(intr.width, intr.height, rgb),
        Grid::from_vec(intr.width, intr.height, known),
    ))
}

/// Write weights for [`project_view_into_pano`]: the write mask, feathered
/// inward by a Gaussian of half-width `feather_radius` pixels.
pub fn feathered_write_weight(write_mask: &Mask, feather_radius: f64) -> ScalarMap {
    let hard = write_mask.to_scalar();
    if feather_radius <= 0.0 {
        return hard;
    }
    gaussian_blur(&hard, feather_radius / 3.0).zip_map(write_mask, |&b, &m| if m { b } else { 0.0 })
}

/// Writes a perspective view into the panorama by inverse lookup from every
/// panorama pixel inside the view frustum.
///
/// Unfilled panorama pixels reached by any positive write weight take the
/// view's color and become filled. Already filled pixels are blended with
/// the feathered write weight, which softens seams against earlier content.
pub fn project_view_into_pano(
    view: &RgbImage,
    write_mask: &Mask,
    pose: &CameraPose,
    intr: &Intrinsics,
    pano: &mut EquirectPanorama,
    feather_radius: f64,
) -> Result<()> {
    require_rotation_only(pose)?;
    if intr.fov_x >= PI || intr.fov_y >= PI {
        return Err(GeometryError::Domain("field of view must be below 180 degrees".into()));
    }
    if view.dims() != (intr.width, intr.height) || !view.same_dims(write_mask) {
        return Err(GeometryError::Domain(format!(
            "view {:?} / mask {:?} do not match intrinsics {}x{}",
            view.dims(),
            write_mask.dims(),
            intr.width,
            intr.height
        )));
    }
    let weight = feathered_write_weight(write_mask, feather_radius);
    let (pw, ph) = (pano.width(), pano.height());
    let rot_t = pose.rotation.transpose();

    let updates: Vec<Vec<(usize, [f32; 3], f32)>> = (0..ph)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::new();
            for x in 0..pw {
                let d = pano.pixel_direction(x, y);
                let cam = rot_t * d;
                let Some((px, py)) = intr.project(&cam) else {
                    continue;
                };
                if px < 0.0 || py < 0.0 || px > intr.width as f64 || py > intr.height as f64 {
                    continue;
                }
                let (sx, sy) = (px - 0.5, py - 0.5);
                let alpha = sample_scalar(&weight, sx, sy, EdgeMode::Clamp);
                if alpha <= 0.0 {
                    continue;
                }
                row.push((y * pw + x, sample_rgb(view, sx, sy, EdgeMode::Clamp), alpha));
            }
            row
        })
        .collect();

    for (i, color, alpha) in updates.into_iter().flatten() {
        if !pano.fill_mask.data()[i] {
            pano.rgb.data_mut()[i] = color;
            pano.fill_mask.data_mut()[i] = true;
        } else {
            let old = pano.rgb.data()[i];
            let a = alpha.min(1.0);
            pano.rgb.data_mut()[i] = [
                a * color[0] + (1.0 - a) * old[0],
                a * color[1] + (1.0 - a) * old[1],
                a * color[2] + (1.0 - a) * old[2],
            ];
        }
    }
    Ok(())
}

/// Pano-space mask of the pixels a view's frustum reaches.
pub fn frustum_mask(pano_w: usize, pano_h: usize, pose: &CameraPose, intr: &Intrinsics) -> Mask {
    let rot_t = pose.rotation.transpose();
    Grid::from_fn(pano_w, pano_h, |x, y| {
        let (theta, phi) = equirect_to_angles(x as f64 + 0.5, y as f64 + 0.5, pano_w, pano_h);
        let cam = rot_t * angles_to_direction(theta, phi);
        view_contains(intr, &cam)
    })
}

/// Whether a camera-frame direction falls inside the view's image rectangle.
#[inline]
pub fn view_contains(intr: &Intrinsics, cam_dir: &Vector3<f64>) -> bool {
    match intr.project(cam_dir) {
        Some((px, py)) => {
            px >= 0.0 && py >= 0.0 && px <= intr.width as f64 && py <= intr.height as f64
        }
        None => false,
    }
}
