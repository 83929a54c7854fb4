//! Dense 2D rasters and the resampling primitives shared by every stage.
//!
//! Pixel `(x, y)` has its center at continuous coordinate `(x + 0.5, y + 0.5)`
//! when measured from the image's top-left edge. The sampling functions in
//! this module take *index-space* coordinates, where pixel `(x, y)` sits at
//! exactly `(x, y)`.

use image::{GrayImage, Luma, Rgb};

/// Row-major 2D array of per-pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Working color image, channel values on the 0..=255 scale.
pub type RgbImage = Grid<[f32; 3]>;
/// Boolean per-pixel mask.
pub type Mask = Grid<bool>;
/// Scalar per-pixel map (soft masks, weights).
pub type ScalarMap = Grid<f32>;

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps an existing row-major buffer.
    ///
    /// Panics if `data.len() != width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn zip_map<U, V>(&self, other: &Grid<U>, mut f: impl FnMut(&T, &U) -> V) -> Grid<V> {
        assert!(self.same_dims(other), "grid dimension mismatch");
        Grid {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| f(a, b))
                .collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }

    pub fn not(&self) -> Mask {
        self.map(|b| !b)
    }

    pub fn to_scalar(&self) -> ScalarMap {
        self.map(|&b| if b { 1.0 } else { 0.0 })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if *self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Any non-zero value counts as set.
    pub fn from_gray(img: &GrayImage) -> Mask {
        Grid::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] > 0
        })
    }

    /// Number of 4-connected components of set pixels.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut stack = Vec::new();
        let mut count = 0;
        for start in 0..self.data.len() {
            if !self.data[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % self.width, i / self.width);
                let mut visit = |j: usize| {
                    if self.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < self.width {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - self.width);
                }
                if y + 1 < self.height {
                    visit(i + self.width);
                }
            }
        }
        count
    }
}

impl ScalarMap {
    /// Quantizes to 8 bits, `0.0 -> 0` and `1.0 -> 255`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn from_gray(img: &GrayImage) -> ScalarMap {
        Grid::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        })
    }
}

impl RgbImage {
    /// Rounds and clamps every channel to `u8`.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.get(x as usize, y as usize);
            Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> RgbImage {
        Grid::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            let p = img.get_pixel(x as u32, y as u32);
            [p[0] as f32, p[1] as f32, p[2] as f32]
        })
    }

    /// Snaps every channel to the nearest representable `u8` value in place.
    pub fn quantize_in_place(&mut self) {
        for p in self.data.iter_mut() {
            for c in p.iter_mut() {
                *c = quantize(*c) as f32;
            }
        }
    }

    /// Copies `src` into `self` wherever `mask` is set.
    pub fn copy_masked(&mut self, src: &RgbImage, mask: &Mask) {
        assert!(self.same_dims(src) && self.same_dims(mask));
        for ((dst, s), &m) in self.data.iter_mut().zip(src.data.iter()).zip(mask.data.iter()) {
            if m {
                *dst = *s;
            }
        }
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Horizontal edge behaviour for bilinear sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    Clamp,
    Wrap,
}

/// The four bilinear taps `(linear index, weight)` around index-space
/// position `(x, y)`. Vertical access always clamps.
#[inline]
pub fn bilinear_taps(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
    edge_x: EdgeMode,
) -> [(usize, f64); 4] {
    let (x0, x1, fx) = match edge_x {
        EdgeMode::Clamp => clamp_axis(x, width),
        EdgeMode::Wrap => {
            let w = width as f64;
            let xw = x.rem_euclid(w);
            let x0f = xw.floor();
            let fx = xw - x0f;
            let x0 = (x0f as usize).min(width - 1);
            let x1 = if x0 + 1 == width { 0 } else { x0 + 1 };
            (x0, x1, fx)
        }
    };
    let (y0, y1, fy) = clamp_axis(y, height);
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

#[inline]
fn clamp_axis(v: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let v = v.clamp(0.0, max);
    let v0 = v.floor();
    let i0 = v0 as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, v - v0)
}

/// Bilinear color sample at index-space `(x, y)`.
#[inline]
pub fn sample_rgb(img: &RgbImage, x: f64, y: f64, edge_x: EdgeMode) -> [f32; 3] {
    let taps = bilinear_taps(x, y, img.width, img.height, edge_x);
    let mut out = [0.0f64; 3];
    for (i, w) in taps {
        if w == 0.0 {
            continue;
        }
        let p = img.data[i];
        out[0] += w * p[0] as f64;
        out[1] += w * p[1] as f64;
        out[2] += w * p[2] as f64;
    }
    [out[0] as f32, out[1] as f32, out[2] as f32]
}

/// Bilinear scalar sample at index-space `(x, y)`.
#[inline]
pub fn sample_scalar(map: &ScalarMap, x: f64, y: f64, edge_x: EdgeMode) -> f32 {
    let taps = bilinear_taps(x, y, map.width, map.height, edge_x);
    let mut out = 0.0f64;
    for (i, w) in taps {
        if w != 0.0 {
            out += w * map.data[i] as f64;
        }
    }
    out as f32
}

/// Normalized 1D Gaussian kernel truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` is the identity.
pub fn gaussian_blur(map: &ScalarMap, sigma: f64) -> ScalarMap {
    if sigma <= 0.0 {
        return map.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = map.dims();
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * map.data[y * w + xx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    Grid::from_vec(w, h, out)
}

/// Soft version of a boolean mask for handing to inpainting models: the
/// blurred mask, never below the hard mask itself.
///
/// `radius` is the kernel half-width in pixels (Gaussian sigma = radius / 3).
pub fn feather_mask(mask: &Mask, radius: f64) -> ScalarMap {
    let blurred = gaussian_blur(&mask.to_scalar(), radius / 3.0);
    blurred.zip_map(mask, |&b, &m| if m { 1.0 } else { b.clamp(0.0, 1.0) })
}
