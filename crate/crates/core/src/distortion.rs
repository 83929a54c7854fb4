//! Trainable per-image grid distortion.
//!
//! Each training image `I` is resampled as `Î(p) = I(p + f(p, c_I; θ))`,
//! where `f` is a small MLP over a harmonic embedding of the normalized
//! position `p ∈ [−1,1]²` and a per-image code `c_I`. The MLP runs only on
//! a coarse corner-aligned grid; the grid is bilinearly upsampled to full
//! resolution before sampling.
//!
//! Normalized coordinates follow the pixel-center convention: pixel `x` of
//! a `W`-wide image sits at `u = (2x + 1)/W − 1`, so an offset `Δu` moves
//! the sample by `Δu·W/2` pixels. Sampling clamps to the border pixels.
//!
//! Everything is `f64` so the analytic gradients can be checked against
//! finite differences.
//!
//! # Checkpoint layout
//!
//! A UTF-8 text file:
//!
//! ```text
//! panoworld-distortion 1
//! grid_res 128
//! offset_scale 0.02
//! embed_freqs 8
//! tensor mlp.0.weight 128 64
//! <128·64 float32 values, row-major, space separated>
//! tensor mlp.0.bias 128 1
//! ...
//! tensor code.<image id> 32 1
//! ...
//! ```
//!
//! Layer `k` maps `x ↦ W x + b` with `W` of shape `out × in`. Layer 0 takes
//! the 32 embedding values followed by the 32 code values. Hidden layers use
//! ReLU; the output is `offset_scale · tanh(·)` as `(Δu, Δv)`. Values are
//! written with the shortest representation that round-trips as `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{bilinear_taps, EdgeMode, Grid, RgbImage};

pub const EMBED_FREQS: usize = 8;
pub const EMBED_DIM: usize = 4 * EMBED_FREQS;
pub const CODE_DIM: usize = 32;
pub const HIDDEN: usize = 128;
pub const DEFAULT_GRID_RES: usize = 128;
/// Maximum offset in normalized units, about 10 px at 1024².
pub const DEFAULT_OFFSET_SCALE: f64 = 0.02;
const CHECKPOINT_MAGIC: &str = "panoworld-distortion";
const CHECKPOINT_VERSION: u32 = 1;

/// Color image with `f64` channels on the 0..=255 scale.
pub type FloatImage = Grid<[f64; 3]>;
/// Per-sample `(Δu, Δv)` in normalized units.
pub type OffsetGrid = Grid<[f64; 2]>;

#[derive(Debug, Error)]
pub enum DistortionError {
    #[error("no code registered for image {0:?}")]
    UnknownImage(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fit diverged at step {step}: loss {loss:.6e} vs initial {initial:.6e}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `[sin(2^k π u), cos(2^k π u), sin(2^k π v), cos(2^k π v)]` for each `k`.
pub fn harmonic_embed(p: [f64; 2], n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * n_freq);
    for k in 0..n_freq {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        let (su, cu) = (f * p[0]).sin_cos();
        let (sv, cv) = (f * p[1]).sin_cos();
        out.extend_from_slice(&[su, cu, sv, cv]);
    }
    out
}

pub fn to_float_image(img: &RgbImage) -> FloatImage {
    img.map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
}

pub fn to_rgb_image(img: &FloatImage) -> RgbImage {
    img.map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
}

/// The three dense layers of `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 6] = [
    "mlp.0.weight",
    "mlp.0.bias",
    "mlp.1.weight",
    "mlp.1.bias",
    "mlp.2.weight",
    "mlp.2.bias",
];

impl Mlp {
    pub fn zeros() -> Self {
        Self {
            w1: Array2::zeros((HIDDEN, EMBED_DIM + CODE_DIM)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, HIDDEN)),
            b2: Array1::zeros(HIDDEN),
            w3: Array2::zeros((2, HIDDEN)),
            b3: Array1::zeros(2),
        }
    }

    fn shapes() -> [(usize, usize); 6] {
        [
            (HIDDEN, EMBED_DIM + CODE_DIM),
            (HIDDEN, 1),
            (HIDDEN, HIDDEN),
            (HIDDEN, 1),
            (2, HIDDEN),
            (2, 1),
        ]
    }

    /// Row-major views of every tensor, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    pub grid_res: usize,
    pub offset_scale: f64,
    /// Std of the random per-image codes.
    pub code_std: f64,
    /// Std of the output layer weights. Zero starts at the identity warp.
    pub final_layer_std: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid_res: DEFAULT_GRID_RES,
            offset_scale: DEFAULT_OFFSET_SCALE,
            code_std: 1.0,
            final_layer_std: 0.0,
            seed: 0,
        }
    }
}

/// MLP parameters, per-image codes and the evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionField {
    pub mlp: Mlp,
    pub codes: BTreeMap<String, Array1<f64>>,
    pub grid_res: usize,
    pub offset_scale: f64,
    code_std: f64,
    seed: u64,
    embed: Array2<f64>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn grid_embedding(g: usize) -> Array2<f64> {
    let mut e = Array2::zeros((g * g, EMBED_DIM));
    for j in 0..g {
        for i in 0..g {
            let p = [grid_coord(i, g), grid_coord(j, g)];
            let row = harmonic_embed(p, EMBED_FREQS);
            e.row_mut(j * g + i).assign(&Array1::from(row));
        }
    }
    e
}

/// Normalized coordinate of grid node `i`; the grid spans `[−1, 1]` corner to corner.
pub fn grid_coord(i: usize, g: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (g - 1) as f64
}

impl DistortionField {
    pub fn new(config: &FieldConfig) -> Result<Self, DistortionError> {
        if config.grid_res < 2 {
            return Err(DistortionError::Config(format!("grid_res {} < 2", config.grid_res)));
        }
        if !(config.offset_scale > 0.0) {
            return Err(DistortionError::Config("offset_scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut mlp = Mlp::zeros();
        let he = |fan_in: usize| Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let n1 = he(EMBED_DIM + CODE_DIM);
        mlp.w1.mapv_inplace(|_| n1.sample(&mut rng));
        let n2 = he(HIDDEN);
        mlp.w2.mapv_inplace(|_| n2.sample(&mut rng));
        if config.final_layer_std > 0.0 {
            let n3 = Normal::new(0.0, config.final_layer_std).unwrap();
            mlp.w3.mapv_inplace(|_| n3.sample(&mut rng));
        }
        Ok(Self {
            mlp,
            codes: BTreeMap::new(),
            grid_res: config.grid_res,
            offset_scale: config.offset_scale,
            code_std: config.code_std,
            seed: config.seed,
            embed: grid_embedding(config.grid_res),
        })
    }

    /// Registers `id` with a random code derived from the seed and the id.
    /// Keeps an existing code.
    pub fn register(&mut self, id: &str) -> Result<(), DistortionError> {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(DistortionError::Config(format!("invalid image id {id:?}")));
        }
        if !self.codes.contains_key(id) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(id));
            let code = if self.code_std > 0.0 {
                let n = Normal::new(0.0, self.code_std).unwrap();
                Array1::from_iter((0..CODE_DIM).map(|_| n.sample(&mut rng)))
            } else {
                Array1::zeros(CODE_DIM)
            };
            self.codes.insert(id.to_string(), code);
        }
        Ok(())
    }

    pub fn set_code(&mut self, id: &str, code: &[f64]) -> Result<(), DistortionError> {
        if code.len() != CODE_DIM {
            return Err(DistortionError::SizeMismatch(format!("code length {}", code.len())));
        }
        self.register(id)?;
        self.codes.insert(id.to_string(), Array1::from(code.to_vec()));
        Ok(())
    }

    pub fn code(&self, id: &str) -> Result<&Array1<f64>, DistortionError> {
        self.codes
            .get(id)
            .ok_or_else(|| DistortionError::UnknownImage(id.to_string()))
    }

    /// Offsets at every grid node for image `id`.
    pub fn offset_grid(&self, id: &str) -> Result<OffsetGrid, DistortionError> {
        Ok(self.offset_grid_for_code(self.code(id)?))
    }

    pub fn offset_grid_for_code(&self, code: &Array1<f64>) -> OffsetGrid {
        let fw = self.forward(code);
        self.to_grid(&fw.out)
    }

    fn to_grid(&self, out: &Array2<f64>) -> OffsetGrid {
        let g = self.grid_res;
        Grid::from_fn(g, g, |i, j| {
            let r = out.row(j * g + i);
            [r[0], r[1]]
        })
    }

    fn forward(&self, code: &Array1<f64>) -> Forward {
        let m = &self.mlp;
        let w1e = m.w1.slice(s![.., ..EMBED_DIM]);
        let w1c = m.w1.slice(s![.., EMBED_DIM..]);
        let shift = w1c.dot(code) + &m.b1;
        let z1 = self.embed.dot(&w1e.t()) + &shift;
        let h1 = z1.mapv(|v| v.max(0.0));
        let z2 = h1.dot(&m.w2.t()) + &m.b2;
        let h2 = z2.mapv(|v| v.max(0.0));
        let t = (h2.dot(&m.w3.t()) + &m.b3).mapv(f64::tanh);
        let out = &t * self.offset_scale;
        Forward { h1, h2, t, out }
    }

    /// Backpropagates `d_out` (dL/d offsets, one row per grid node).
    fn backward(&self, code: &Array1<f64>, fw: &Forward, d_out: &Array2<f64>) -> (Mlp, Array1<f64>) {
        let m = &self.mlp;
        let dz3 = d_out * &fw.t.mapv(|t| self.offset_scale * (1.0 - t * t));
        let mut g = Mlp::zeros();
        g.w3 = dz3.t().dot(&fw.h2);
        g.b3 = dz3.sum_axis(Axis(0));
        let mut dz2 = dz3.dot(&m.w3);
        ndarray::Zip::from(&mut dz2).and(&fw.h2).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0
            }
        });
        g.w2 = dz2.t().dot(&fw.h1);
        g.b2 = dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&m.w2);
        ndarray::Zip::from(&mut dz1).and(&fw.h1).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0
            }
        });
        let total = dz1.sum_axis(Axis(0));
        g.w1.slice_mut(s![.., ..EMBED_DIM]).assign(&dz1.t().dot(&self.embed));
        let outer = total
            .view()
            .insert_axis(Axis(1))
            .dot(&code.view().insert_axis(Axis(0)));
        g.w1.slice_mut(s![.., EMBED_DIM..]).assign(&outer);
        g.b1 = total.clone();
        let d_code = m.w1.slice(s![.., EMBED_DIM..]).t().dot(&total);
        (g, d_code)
    }

    /// Loss and analytic gradients for one `(image, target)` pair.
    pub fn gradients(
        &self,
        image: &FloatImage,
        target: &FloatImage,
        id: &str,
        opts: &GradOptions,
    ) -> Result<Gradients, DistortionError> {
        if !image.same_dims(target) {
            return Err(DistortionError::SizeMismatch(format!(
                "image {:?} vs target {:?}",
                image.dims(),
                target.dims()
            )));
        }
        let code = self.code(id)?;
        let fw = self.forward(code);
        let offsets = self.to_grid(&fw.out);
        let bw = warp_backward(image, target, &offsets, opts.image_gradient);
        let g = self.grid_res;
        let n = (g * g) as f64;
        let mut d_out = Array2::zeros((g * g, 2));
        let mut reg = 0.0;
        for (k, d) in bw.d_offsets.data().iter().enumerate() {
            let o = fw.out.row(k);
            d_out[[k, 0]] = d[0] + 2.0 * opts.offset_l2 * o[0] / n;
            d_out[[k, 1]] = d[1] + 2.0 * opts.offset_l2 * o[1] / n;
            reg += (o[0] * o[0] + o[1] * o[1]) / n;
        }
        let (mlp, code_grad) = self.backward(code, &fw, &d_out);
        Ok(Gradients {
            loss: bw.loss + opts.offset_l2 * reg,
            photometric: bw.loss,
            mlp,
            code: code_grad,
            image: bw.d_image,
        })
    }

    /// Loss of one pair, as used by [`Self::gradients`].
    pub fn loss(
        &self,
        image: &FloatImage,
        target: &FloatImage,
        id: &str,
        offset_l2: f64,
    ) -> Result<f64, DistortionError> {
        let offsets = self.offset_grid(id)?;
        let out = apply_distortion(image, &offsets);
        let mut reg = 0.0;
        for o in offsets.data() {
            reg += o[0] * o[0] + o[1] * o[1];
        }
        Ok(photometric_loss(&out, target) + offset_l2 * reg / offsets.len() as f64)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = format!(
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\ngrid_res {}\noffset_scale {}\nembed_freqs {EMBED_FREQS}\n",
            self.grid_res, self.offset_scale
        );
        let write = |s: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]| {
            s.push_str(&format!("tensor {name} {rows} {cols}\n"));
            let vals: Vec<String> = data.iter().map(|&v| format!("{}", v as f32)).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        };
        for ((name, (r, c)), data) in TENSOR_NAMES.iter().zip(Mlp::shapes()).zip(self.mlp.tensors()) {
            write(&mut s, name, r, c, data);
        }
        for (id, code) in &self.codes {
            write(&mut s, &format!("code.{id}"), CODE_DIM, 1, code.as_slice().unwrap());
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, DistortionError> {
        let bad = |m: &str| DistortionError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("not a distortion checkpoint"));
        }
        let version: u32 = hp.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut grid_res = None;
        let mut offset_scale = None;
        let mut tensors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        while let Some(line) = lines.next() {
            let mut f = line.split_whitespace();
            match f.next() {
                Some("grid_res") => grid_res = f.next().and_then(|v| v.parse::<usize>().ok()),
                Some("offset_scale") => offset_scale = f.next().and_then(|v| v.parse::<f64>().ok()),
                Some("embed_freqs") => {
                    if f.next().and_then(|v| v.parse::<usize>().ok()) != Some(EMBED_FREQS) {
                        return Err(bad("embed_freqs mismatch"));
                    }
                }
                Some("tensor") => {
                    let name = f.next().ok_or_else(|| bad("tensor without name"))?.to_string();
                    let rows: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("rows"))?;
                    let cols: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("cols"))?;
                    let data = lines.next().ok_or_else(|| bad("missing tensor data"))?;
                    let vals = data
                        .split_whitespace()
                        .map(|v| v.parse::<f32>().map(|x| x as f64))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| bad(&format!("{name}: {e}")))?;
                    if vals.len() != rows * cols {
                        return Err(bad(&format!("{name}: expected {} values, got {}", rows * cols, vals.len())));
                    }
                    tensors.insert(name, vals);
                }
                Some(other) => return Err(bad(&format!("unknown key {other}"))),
                None => {}
            }
        }
        let mut field = DistortionField::new(&FieldConfig {
            grid_res: grid_res.ok_or_else(|| bad("missing grid_res"))?,
            offset_scale: offset_scale.ok_or_else(|| bad("missing offset_scale"))?,
            ..FieldConfig::default()
        })?;
        for ((name, (r, c)), dst) in TENSOR_NAMES.iter().zip(Mlp::shapes()).zip(field.mlp.tensors_mut()) {
            let src = tensors.remove(*name).ok_or_else(|| bad(&format!("missing {name}")))?;
            if src.len() != r * c {
                return Err(bad(&format!("{name} has wrong shape")));
            }
            dst.copy_from_slice(&src);
        }
        for (name, vals) in tensors {
            let id = name
                .strip_prefix("code.")
                .ok_or_else(|| bad(&format!("unknown tensor {name}")))?;
            field.set_code(id, &vals).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<(), DistortionError> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DistortionError> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

struct Forward {
    h1: Array2<f64>,
    h2: Array2<f64>,
    t: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct GradOptions {
    /// Also return dL/dI.
    pub image_gradient: bool,
    /// Weight of the mean squared offset penalty.
    pub offset_l2: f64,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Photometric loss plus the offset penalty.
    pub loss: f64,
    pub photometric: f64,
    pub mlp: Mlp,
    pub code: Array1<f64>,
    pub image: Option<FloatImage>,
}

/// Mean squared difference over pixels and channels.
pub fn photometric_loss(a: &FloatImage, b: &FloatImage) -> f64 {
    assert!(a.same_dims(b));
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    s / (a.len() * 3) as f64
}

/// Grid-space position of pixel `x` along an axis of `n` pixels.
#[inline]
fn grid_pos(x: usize, n: usize, g: usize) -> f64 {
    (x as f64 + 0.5) / n as f64 * (g - 1) as f64
}

/// Bilinear upsampling of grid offsets to one offset per pixel.
pub fn upsample_offsets(offsets: &OffsetGrid, width: usize, height: usize) -> OffsetGrid {
    let (g, gh) = offsets.dims();
    Grid::from_fn(width, height, |x, y| {
        let taps = bilinear_taps(grid_pos(x, width, g), grid_pos(y, height, gh), g, gh, EdgeMode::Clamp);
        let mut o = [0.0; 2];
        for (i, w) in taps {
            let v = offsets.data()[i];
            o[0] += w * v[0];
            o[1] += w * v[1];
        }
        o
    })
}

/// Sample position and bilinear data along one axis.
struct Axis1 {
    i0: usize,
    i1: usize,
    f: f64,
    /// d(sample)/d(position); zero where the position is clamped.
    inside: bool,
}

#[inline]
fn axis(pos: f64, n: usize) -> Axis1 {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&pos);
    let v = pos.clamp(0.0, max);
    let v0 = v.floor();
    let i0 = v0 as usize;
    Axis1 {
        i0,
        i1: (i0 + 1).min(n - 1),
        f: v - v0,
        inside,
    }
}

/// `Î(x) = I(x + offset(x))` with one normalized offset per pixel.
pub fn warp_dense(image: &FloatImage, dense: &OffsetGrid) -> FloatImage {
    assert!(image.same_dims(dense));
    let (w, h) = image.dims();
    let data = image.data();
    Grid::from_fn(w, h, |x, y| {
        let o = dense.get(x, y);
        let ax = axis(x as f64 + o[0] * w as f64 / 2.0, w);
        let ay = axis(y as f64 + o[1] * h as f64 / 2.0, h);
        let taps = [
            (ay.i0 * w + ax.i0, (1.0 - ax.f) * (1.0 - ay.f)),
            (ay.i0 * w + ax.i1, ax.f * (1.0 - ay.f)),
            (ay.i1 * w + ax.i0, (1.0 - ax.f) * ay.f),
            (ay.i1 * w + ax.i1, ax.f * ay.f),
        ];
        let mut out = [0.0; 3];
        for (i, wt) in taps {
            if wt != 0.0 {
                let p = data[i];
                for c in 0..3 {
                    out[c] += wt * p[c];
                }
            }
        }
        out
    })
}

/// Resamples `image` with grid offsets upsampled to its resolution.
/// Zero offsets reproduce the input exactly.
pub fn apply_distortion(image: &FloatImage, offsets: &OffsetGrid) -> FloatImage {
    let (w, h) = image.dims();
    warp_dense(image, &upsample_offsets(offsets, w, h))
}

/// [`apply_distortion`] on a working image.
pub fn apply_distortion_rgb(image: &RgbImage, offsets: &OffsetGrid) -> RgbImage {
    to_rgb_image(&apply_distortion(&to_float_image(image), offsets))
}

struct WarpBackward {
    loss: f64,
    d_offsets: OffsetGrid,
    d_image: Option<FloatImage>,
}

fn warp_backward(
    image: &FloatImage,
    target: &FloatImage,
    offsets: &OffsetGrid,
    with_image: bool,
) -> WarpBackward {
    let (w, h) = image.dims();
    let (g, gh) = offsets.dims();
    let dense = upsample_offsets(offsets, w, h);
    let data = image.data();
    let scale = 1.0 / (w * h * 3) as f64;
    let mut loss = 0.0;
    let mut d_offsets = Grid::new(g, gh, [0.0f64; 2]);
    let mut d_image = with_image.then(|| Grid::new(w, h, [0.0f64; 3]));
    for y in 0..h {
        for x in 0..w {
            let o = dense.get(x, y);
            let ax = axis(x as f64 + o[0] * w as f64 / 2.0, w);
            let ay = axis(y as f64 + o[1] * h as f64 / 2.0, h);
            let p00 = data[ay.i0 * w + ax.i0];
            let p10 = data[ay.i0 * w + ax.i1];
            let p01 = data[ay.i1 * w + ax.i0];
            let p11 = data[ay.i1 * w + ax.i1];
            let t = target.get(x, y);
            let (fx, fy) = (ax.f, ay.f);
            let mut dfx = 0.0;
            let mut dfy = 0.0;
            let mut gc = [0.0; 3];
            for c in 0..3 {
                let v = (1.0 - fx) * (1.0 - fy) * p00[c]
                    + fx * (1.0 - fy) * p10[c]
                    + (1.0 - fx) * fy * p01[c]
                    + fx * fy * p11[c];
                let r = v - t[c];
                loss += r * r;
                gc[c] = 2.0 * r * scale;
                dfx += gc[c] * ((1.0 - fy) * (p10[c] - p00[c]) + fy * (p11[c] - p01[c]));
                dfy += gc[c] * ((1.0 - fx) * (p01[c] - p00[c]) + fx * (p11[c] - p10[c]));
            }
            let du = if ax.inside { dfx * w as f64 / 2.0 } else { 0.0 };
            let dv = if ay.inside { dfy * h as f64 / 2.0 } else { 0.0 };
            let taps = bilinear_taps(grid_pos(x, w, g), grid_pos(y, h, gh), g, gh, EdgeMode::Clamp);
            let dd = d_offsets.data_mut();
            for (i, wt) in taps {
                dd[i][0] += wt * du;
                dd[i][1] += wt * dv;
            }
            if let Some(di) = d_image.as_mut() {
                let di = di.data_mut();
                let taps = [
                    (ay.i0 * w + ax.i0, (1.0 - fx) * (1.0 - fy)),
                    (ay.i0 * w + ax.i1, fx * (1.0 - fy)),
                    (ay.i1 * w + ax.i0, (1.0 - fx) * fy),
                    (ay.i1 * w + ax.i1, fx * fy),
                ];
                for (i, wt) in taps {
                    for c in 0..3 {
                        di[i][c] += wt * gc[c];
                    }
                }
            }
        }
    }
    WarpBackward {
        loss: loss * scale,
        d_offsets,
        d_image,
    }
}

/// One training example for [`fit`].
#[derive(Clone, Debug)]
pub struct FitPair {
    pub image: FloatImage,
    pub target: FloatImage,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub offset_l2: f64,
    /// Stop once the loss falls to `(1 − r)` of its initial value.
    pub stop_at_reduction: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            offset_l2: 0.0,
            stop_at_reduction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Mean loss before each update; the last entry is after the final one.
    pub losses: Vec<f64>,
    pub steps: usize,
}

impl FitReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().unwrap()
    }

    pub fn reduction(&self) -> f64 {
        if self.initial() == 0.0 {
            0.0
        } else {
            1.0 - self.last() / self.initial()
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut f64], grads: &[f64], cfg: &FitConfig) {
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k];
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g;
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            **p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Adam on the mean loss over `pairs`, updating `field` in place. Codes of
/// ids that appear in `pairs` are registered if missing and optimized.
pub fn fit(
    field: &mut DistortionField,
    pairs: &[FitPair],
    cfg: &FitConfig,
) -> Result<FitReport, DistortionError> {
    if pairs.is_empty() {
        return Err(DistortionError::Config("fit needs at least one pair".into()));
    }
    for p in pairs {
        field.register(&p.id)?;
    }
    let ids: Vec<String> = {
        let mut v: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let n_params = field.mlp.param_count() + ids.len() * CODE_DIM;
    let mut adam = Adam::new(n_params);
    let opts = GradOptions {
        image_gradient: false,
        offset_l2: cfg.offset_l2,
    };
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut steps = 0;
    loop {
        let per_pair: Vec<Gradients> = pairs
            .par_iter()
            .map(|p| field.gradients(&p.image, &p.target, &p.id, &opts))
            .collect::<Result<_, _>>()?;
        let inv = 1.0 / pairs.len() as f64;
        let loss: f64 = per_pair.iter().map(|g| g.loss).sum::<f64>() * inv;
        if !loss.is_finite() || (!losses.is_empty() && loss > 1e3 * losses[0]) {
            return Err(DistortionError::Diverged {
                step: steps,
                loss,
                initial: losses.first().copied().unwrap_or(loss),
            });
        }
        losses.push(loss);
        let reached = cfg
            .stop_at_reduction
            .is_some_and(|r| loss <= (1.0 - r) * losses[0]);
        if steps == cfg.steps || reached {
            break;
        }
        // flatten gradients in the same order as the parameters below
        let mut grads = vec![0.0; n_params];
        for (pair, g) in pairs.iter().zip(&per_pair) {
            let mut k = 0;
            for t in g.mlp.tensors() {
                for v in t {
                    grads[k] += v * inv;
                    k += 1;
                }
            }
            let slot = ids.binary_search(&pair.id).unwrap();
            let base = k + slot * CODE_DIM;
            for (i, v) in g.code.iter().enumerate() {
                grads[base + i] += v * inv;
            }
        }
        let DistortionField { mlp, codes, .. } = field;
        let mut params: Vec<&mut f64> = Vec::with_capacity(n_params);
        for t in mlp.tensors_mut() {
            params.extend(t.iter_mut());
        }
        for (id, code) in codes.iter_mut() {
            if ids.binary_search(id).is_ok() {
                params.extend(code.iter_mut());
            }
        }
        adam.step(&mut params, &grads, cfg);
        steps += 1;
    }
    Ok(FitReport { losses, steps })
}

/// Smooth random warp with components bounded by `amplitude` (normalized units).
pub fn random_smooth_warp(width: usize, height: usize, amplitude: f64, seed: u64) -> OffsetGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::new();
    for _ in 0..2 {
        let mut comps = Vec::new();
        for _ in 0..3 {
            comps.push((
                rng.random_range(0.5..1.5) * std::f64::consts::PI,
                rng.random_range(0.5..1.5) * std::f64::consts::PI,
                rng.random_range(0.0..std::f64::consts::TAU),
            ));
        }
        terms.push(comps);
    }
    Grid::from_fn(width, height, |x, y| {
        let u = (2 * x + 1) as f64 / width as f64 - 1.0;
        let v = (2 * y + 1) as f64 / height as f64 - 1.0;
        let mut o = [0.0; 2];
        for (c, comps) in terms.iter().enumerate() {
            let s: f64 = comps.iter().map(|(a, b, p)| (a * u + b * v + p).sin()).sum();
            o[c] = amplitude * s / comps.len() as f64;
        }
        o
    })
}
