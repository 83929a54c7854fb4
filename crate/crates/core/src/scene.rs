//! Procedural ray-cast scenes with analytic depth.
//!
//! These back the synthetic depth oracle and give every geometric test an
//! exact ground truth to compare against.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraPose, EquirectPanorama, Intrinsics};
use crate::raster::{Grid, RgbImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Closed axis-aligned room; rays from inside hit the inner walls.
    Room { min: [f64; 3], max: [f64; 3] },
    /// Solid axis-aligned box seen from outside.
    Cuboid { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Infinite plane `dot(normal, p) = offset`, visible from both sides.
    Plane { normal: [f64; 3], offset: f64 },
}

/// Smooth procedural albedo: `base + amplitude * sin(freq * p)` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f32; 3],
    pub amplitude: f32,
    pub frequency: f64,
}

impl Texture {
    pub fn flat(color: [f32; 3]) -> Self {
        Self {
            base: color,
            amplitude: 0.0,
            frequency: 0.0,
        }
    }

    pub fn shade(&self, p: &Vector3<f64>) -> [f32; 3] {
        if self.amplitude == 0.0 {
            return self.base;
        }
        let f = self.frequency;
        let w = [
            (f * p.x).sin() * (0.7 * f * p.y).cos(),
            (f * p.y + 1.3).sin() * (0.9 * f * p.z).cos(),
            (f * p.z + 2.1).sin() * (1.1 * f * p.x).cos(),
        ];
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            out[c] = (self.base[c] + self.amplitude * w[c] as f32).clamp(0.0, 255.0);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Primitive,
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Distance along the (unit) ray.
    pub t: f64,
    pub point: Vector3<f64>,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn new(objects: Vec<SceneObject>) -> Self {
        Self { objects }
    }

    /// 8 x 6 x 3 m room around the origin, floor at z = -1.6, with two
    /// free-standing boxes for parallax.
    pub fn default_room() -> Self {
        Self::new(vec![
            SceneObject {
                shape: Primitive::Room {
                    min: [-4.0, -3.0, -1.6],
                    max: [4.0, 3.0, 1.4],
                },
                texture: Texture {
                    base: [140.0, 120.0, 100.0],
                    amplitude: 60.0,
                    frequency: 1.7,
                },
            },
            SceneObject {
                shape: Primitive::Cuboid {
                    min: [2.0, -0.8, -1.6],
                    max: [2.6, 0.4, -0.4],
                },
                texture: Texture {
                    base: [60.0, 150.0, 90.0],
                    amplitude: 40.0,
                    frequency: 3.0,
                },
            },
            SceneObject {
                shape: Primitive::Cuboid {
                    min: [-2.5, 1.2, -1.6],
                    max: [-1.7, 2.2, 0.2],
                },
                texture: Texture {
                    base: [170.0, 80.0, 70.0],
                    amplitude: 40.0,
                    frequency: 2.3,
                },
            },
        ])
    }

    /// Nearest hit along `origin + t * dir` for `t > 1e-9`; `dir` must be unit.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, usize)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some(t) = intersect_primitive(&obj.shape, origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best.map(|(t, i)| {
            let point = origin + dir * t;
            Hit {
                t,
                point,
                color: self.objects[i].texture.shade(&point),
            }
        })
    }

    /// Ray-cast color and z-depth. Missed rays get depth `NaN` and black.
    pub fn render(&self, pose: &CameraPose, intr: &Intrinsics) -> (RgbImage, Grid<f64>) {
        let mut rgb = RgbImage::new(intr.width, intr.height, [0.0; 3]);
        let mut depth = Grid::new(intr.width, intr.height, f64::NAN);
        for y in 0..intr.height {
            for x in 0..intr.width {
                let ray = intr.pixel_ray(x, y);
                let n = ray.norm();
                let dir = pose.rotation * (ray / n);
                if let Some(hit) = self.intersect(&pose.translation, &dir) {
                    rgb.set(x, y, hit.color);
                    depth.set(x, y, hit.t / n);
                }
            }
        }
        (rgb, depth)
    }

    /// Equirectangular color panorama seen from `center`; missed rays stay unfilled.
    pub fn render_equirect(&self, width: usize, center: &Vector3<f64>) -> EquirectPanorama {
        let mut pano = EquirectPanorama::new(width, width / 2).expect("even panorama width");
        for y in 0..pano.height() {
            for x in 0..pano.width() {
                let d = pano.pixel_direction(x, y);
                if let Some(hit) = self.intersect(center, &d) {
                    pano.rgb.set(x, y, hit.color);
                    pano.fill_mask.set(x, y, true);
                }
            }
        }
        pano
    }
}

fn intersect_primitive(p: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-9;
    match p {
        Primitive::Room { min, max } => {
            // exit distance of the slab intersection
            let (t0, t1) = slab(min, max, o, d)?;
            let t = if t0 > EPS { t0 } else { t1 };
            (t > EPS).then_some(t)
        }
        Primitive::Cuboid { min, max } => {
            let (t0, t1) = slab(min, max, o, d)?;
            if t0 > EPS {
                Some(t0)
            } else if t1 > EPS && t0 <= EPS {
                // origin inside the solid: treat as a miss
                None
            } else {
                None
            }
        }
        Primitive::Sphere { center, radius } => {
            let c = Vector3::from(*center);
            let oc = o - c;
            let b = oc.dot(d);
            let cc = oc.dot(&oc) - radius * radius;
            let disc = b * b - cc;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t0 = -b - s;
            let t1 = -b + s;
            if t0 > EPS {
                Some(t0)
            } else if t1 > EPS {
                Some(t1)
            } else {
                None
            }
        }
        Primitive::Plane { normal, offset } => {
            let n = Vector3::from(*normal);
            let denom = n.dot(d);
            if denom.abs() < 1e-15 {
                return None;
            }
            let t = (offset - n.dot(o)) / denom;
            (t > EPS).then_some(t)
        }
    }
}

/// Entry/exit distances of a ray through an axis-aligned box.
fn slab(min: &[f64; 3], max: &[f64; 3], o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut ta = (min[a] - o[a]) * inv;
        let mut tb = (max[a] - o[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}
