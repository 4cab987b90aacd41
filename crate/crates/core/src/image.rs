//! RGB raster images with values in `[0, 1]`, plus PNG persistence and the
//! resampling kernels used by degradation and conditioning.

use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Minimum side length accepted for dataset imagery.
pub const MIN_DATASET_SIDE: usize = 8;

/// An `height x width x 3` image stored row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage<S> {
    width: usize,
    height: usize,
    pixels: Vec<S>,
}

impl<S: Scalar> RasterImage<S> {
    pub fn new(width: usize, height: usize, pixels: Vec<S>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height}x3 image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < S::zero() || **v > S::one()) {
            return Err(Error::InvalidArgument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<S>) -> Result<Self> {
        for v in &mut pixels {
            *v = clamp01(*v);
        }
        Self::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, rgb: [S; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).map(clamp01).collect();
        Self { width, height, pixels }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [S; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).map(clamp01));
            }
        }
        Self { width, height, pixels }
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

    pub fn pixels(&self) -> &[S] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<S> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> S {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [S; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Writes a pixel, clamping into range.
    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [S; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.pixels[i + c] = clamp01(rgb[c]);
        }
    }

    pub fn ensure_min_side(&self, min: usize) -> Result<()> {
        if self.width < min || self.height < min {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} below the minimum side {min}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(width, height, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// Channel-first tensor in the model's `[-1, 1]` range.
    pub fn to_model_tensor(&self) -> Tensor<S> {
        let two = S::lit(2.0);
        let mut t = Tensor::zeros(3, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    *t.at_mut(c, y, x) = self.get(x, y, c) * two - S::one();
                }
            }
        }
        t
    }

    /// Inverse of [`to_model_tensor`](Self::to_model_tensor), clamping to `[0, 1]`.
    pub fn from_model_tensor(t: &Tensor<S>) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 channels, got {}", t.channels())));
        }
        let half = S::lit(0.5);
        Ok(Self::from_fn(t.width(), t.height(), |x, y| {
            [0, 1, 2].map(|c| (t.at(c, y, x) + S::one()) * half)
        }))
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { width: self.width, height: self.height, pixels: self.pixels.iter().map(|&v| clamp01(f(v))).collect() }
    }

    /// Mean over pixels and channels.
    pub fn mean(&self) -> S {
        self.pixels.iter().copied().sum::<S>() / S::from_usize(self.pixels.len()).unwrap()
    }

    /// Rec. 601 luma plane, row-major.
    pub fn luma(&self) -> Vec<S> {
        let (r, g, b) = (S::lit(0.299), S::lit(0.587), S::lit(0.114));
        self.pixels.chunks_exact(3).map(|p| r * p[0] + g * p[1] + b * p[2]).collect()
    }

    /// Single channel plane, row-major.
    pub fn channel(&self, c: usize) -> Vec<S> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn cast<T: Scalar>(&self) -> RasterImage<T> {
        RasterImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Box-filter downsampling by an integer factor (each output pixel is the
    /// mean of a `factor x factor` block).
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "downscale {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let norm = S::from_usize(factor * factor).unwrap();
        Ok(Self::from_fn(self.width / factor, self.height / factor, |x, y| {
            let mut acc = [S::zero(); 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.pixel(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            acc.map(|v| v / norm)
        }))
    }

    /// Bicubic (Keys, a = -0.5) upsampling by an integer factor with
    /// edge-clamped sampling.
    pub fn bicubic_upsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let f = factor as f64;
        let taps = |dst: usize| -> ([usize; 4], [S; 4], usize) {
            let src = (dst as f64 + 0.5) / f - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [S::zero(); 4];
            for k in 0..4 {
                let off = k as f64 - 1.0;
                idx[k] = (base + off).max(0.0) as usize;
                w[k] = S::lit(keys_cubic(frac - off));
            }
            (idx, w, base as isize as usize)
        };
        let (ow, oh) = (self.width * factor, self.height * factor);
        let xt: Vec<_> = (0..ow).map(taps).collect();
        let yt: Vec<_> = (0..oh).map(taps).collect();
        let (mw, mh) = (self.width - 1, self.height - 1);
        let mut out = Vec::with_capacity(ow * oh * 3);
        for (yi, yw, _) in &yt {
            for (xi, xw, _) in &xt {
                let mut acc = [S::zero(); 3];
                for j in 0..4 {
                    let sy = yi[j].min(mh);
                    for i in 0..4 {
                        let sx = xi[i].min(mw);
                        let w = yw[j] * xw[i];
                        let p = self.pixel(sx, sy);
                        for c in 0..3 {
                            acc[c] += w * p[c];
                        }
                    }
                }
                out.extend(acc.map(clamp01));
            }
        }
        Ok(Self { width: ow, height: oh, pixels: out })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let inv = S::lit(1.0 / 255.0);
        let pixels = rgb.as_raw().iter().map(|&v| S::from_u8(v).unwrap() * inv).collect();
        Self::new(w as usize, h as usize, pixels)
    }

    /// Quantizes to 8 bits per channel and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).io_context(|| format!("creating {}", parent.display()))?;
        }
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| quantize_u8(*v)).collect()
    }

    /// Rounds every value to the nearest 8-bit level, matching a PNG round trip.
    pub fn quantized(&self) -> Self {
        let inv = S::lit(1.0 / 255.0);
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| S::from_u8(quantize_u8(v)).unwrap() * inv).collect(),
        }
    }
}

fn quantize_u8<S: Scalar>(v: S) -> u8 {
    (clamp01(v).as_f64() * 255.0).round() as u8
}

#[inline]
pub(crate) fn clamp01<S: Scalar>(v: S) -> S {
    if v.is_nan() {
        S::zero()
    } else {
        v.max(S::zero()).min(S::one())
    }
}

fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}
