//! Image quality metrics: PSNR and SSIM, plus labelled desk-scale stand-ins
//! for the learned metrics. Stand-ins sit behind [`MetricSuite`] so real
//! implementations can be swapped in.

use serde::{Deserialize, Serialize};

use crate::degrade::gaussian_blur;
use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::scalar::Scalar;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Psnr,
    Ssim,
    Lpips,
    Dists,
    Niqe,
    Musiq,
    Maniqa,
    Clipiqa,
}

impl Metric {
    pub const ALL: [Metric; 8] = [Metric::Psnr, Metric::Ssim, Metric::Lpips, Metric::Dists, Metric::Niqe, Metric::Musiq, Metric::Maniqa, Metric::Clipiqa];

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Lpips | Metric::Dists | Metric::Niqe)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR",
            Metric::Ssim => "SSIM",
            Metric::Lpips => "LPIPS",
            Metric::Dists => "DISTS",
            Metric::Niqe => "NIQE",
            Metric::Musiq => "MUSIQ",
            Metric::Maniqa => "MANIQA",
            Metric::Clipiqa => "CLIPIQA",
        }
    }

    pub fn index(self) -> usize {
        Metric::ALL.iter().position(|m| *m == self).expect("listed")
    }
}

/// Scores for the eight metrics, indexed in [`Metric::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector<S> {
    pub values: [S; 8],
}

impl<S: Scalar> MetricVector<S> {
    pub fn get(&self, m: Metric) -> S {
        self.values[m.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Produces a [`MetricVector`] for a candidate against its reference.
pub trait MetricSuite<S: Scalar> {
    fn name(&self) -> &str;
    fn evaluate(&self, candidate: &RasterImage<S>, reference: &RasterImage<S>) -> Result<MetricVector<S>>;
}

/// Exact PSNR and SSIM; the six learned metrics replaced by
/// hand-crafted proxies with the same trend direction:
/// LPIPS -> multi-scale gradient-correlation distance,
/// DISTS -> multi-scale structure/texture distance on gradient magnitude,
/// NIQE -> deviation of local normalized luminance statistics from Gaussian,
/// MUSIQ / MANIQA / CLIPIQA -> gradient-energy sharpness proxies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuiltinSuite;

impl<S: Scalar> MetricSuite<S> for BuiltinSuite {
    fn name(&self) -> &str {
        "builtin-standins"
    }

    fn evaluate(&self, candidate: &RasterImage<S>, reference: &RasterImage<S>) -> Result<MetricVector<S>> {
        same_shape(candidate, reference)?;
        let values = [
            psnr(candidate, reference)?,
            ssim(candidate, reference)?,
            gradient_correlation_distance(candidate, reference)?,
            structure_texture_distance(candidate, reference)?,
            local_statistics_deviation(candidate),
            gradient_sharpness(candidate),
            laplacian_sharpness(candidate),
            high_frequency_ratio(candidate),
        ];
        Ok(MetricVector { values })
    }
}

fn same_shape<S: Scalar>(a: &RasterImage<S>, b: &RasterImage<S>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr<S: Scalar>(a: &RasterImage<S>, b: &RasterImage<S>) -> Result<S> {
    same_shape(a, b)?;
    let n = a.pixels().len() as f64;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(S::lit(PSNR_CAP_DB));
    }
    Ok(S::lit((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w: Vec<f64> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (-((x * x + y * y) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()))
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over valid 7x7 Gaussian windows (sigma 1.5), averaged over
/// channels, with `k1 = 0.01`, `k2 = 0.03` and unit dynamic range.
pub fn ssim<S: Scalar>(a: &RasterImage<S>, b: &RasterImage<S>) -> Result<S> {
    same_shape(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    if a == b {
        return Ok(S::one());
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa: Vec<f64> = a.channel(c).into_iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.channel(c).into_iter().map(|v| v.as_f64()).collect();
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = win[dy * SSIM_WINDOW + dx];
                        let i = (y0 + dy) * w + x0 + dx;
                        ma += k * pa[i];
                        mb += k * pb[i];
                        saa += k * pa[i] * pa[i];
                        sbb += k * pb[i] * pb[i];
                        sab += k * pa[i] * pb[i];
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(S::lit(total / count as f64))
}

/// Luma plane as `f64` with its dimensions.
fn luma64<S: Scalar>(img: &RasterImage<S>) -> (Vec<f64>, usize, usize) {
    (img.luma().into_iter().map(|v| v.as_f64()).collect(), img.width(), img.height())
}

fn box_down(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            let i = 2 * y * w + 2 * x;
            out.push(0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]));
        }
    }
    (out, nw, nh)
}

/// Central-difference gradients with replicated borders.
fn gradients(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| plane[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut gx = Vec::with_capacity(w * h);
    let mut gy = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            gx.push(0.5 * (at(x + 1, y) - at(x - 1, y)));
            gy.push(0.5 * (at(x, y + 1) - at(x, y - 1)));
        }
    }
    (gx, gy)
}

/// Pyramid of luma planes down to a minimum side of 4 (at most 3 levels).
fn pyramid<S: Scalar>(img: &RasterImage<S>) -> Vec<(Vec<f64>, usize, usize)> {
    let mut levels = vec![luma64(img)];
    while levels.len() < 3 {
        let (p, w, h) = levels.last().expect("non-empty");
        if *w < 8 || *h < 8 {
            break;
        }
        levels.push(box_down(p, *w, *h));
    }
    levels
}

/// Stand-in for LPIPS: mean over scales of `(1 - cos(grad a, grad b)) / 2`.
pub fn gradient_correlation_distance<S: Scalar>(a: &RasterImage<S>, b: &RasterImage<S>) -> Result<S> {
    same_shape(a, b)?;
    if a == b {
        return Ok(S::zero());
    }
    let (pa, pb) = (pyramid(a), pyramid(b));
    let mut total = 0.0;
    for ((la, w, h), (lb, _, _)) in pa.iter().zip(&pb) {
        let (ax, ay) = gradients(la, *w, *h);
        let (bx, by) = gradients(lb, *w, *h);
        let dot: f64 = (0..ax.len()).map(|i| ax[i] * bx[i] + ay[i] * by[i]).sum();
        let na: f64 = (0..ax.len()).map(|i| ax[i] * ax[i] + ay[i] * ay[i]).sum();
        let nb: f64 = (0..bx.len()).map(|i| bx[i] * bx[i] + by[i] * by[i]).sum();
        let cos = if na < 1e-20 && nb < 1e-20 {
            1.0
        } else if na < 1e-20 || nb < 1e-20 {
            0.0
        } else {
            (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
        };
        total += 0.5 * (1.0 - cos);
    }
    Ok(S::lit(total / pa.len() as f64))
}

/// Stand-in for DISTS: `1 - mean_scales(0.5 * structure + 0.5 * texture)`
/// computed on gradient-magnitude maps.
pub fn structure_texture_distance<S: Scalar>(a: &RasterImage<S>, b: &RasterImage<S>) -> Result<S> {
    same_shape(a, b)?;
    if a == b {
        return Ok(S::zero());
    }
    const C: f64 = 1e-6;
    let (pa, pb) = (pyramid(a), pyramid(b));
    let mut sim = 0.0;
    for ((la, w, h), (lb, _, _)) in pa.iter().zip(&pb) {
        let mag = |p: &[f64]| -> Vec<f64> {
            let (gx, gy) = gradients(p, *w, *h);
            gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect()
        };
        let (ma, mb) = (mag(la), mag(lb));
        let n = ma.len() as f64;
        let (mu_a, mu_b) = (ma.iter().sum::<f64>() / n, mb.iter().sum::<f64>() / n);
        let var_a = ma.iter().map(|v| (v - mu_a).powi(2)).sum::<f64>() / n;
        let var_b = mb.iter().map(|v| (v - mu_b).powi(2)).sum::<f64>() / n;
        let cov = ma.iter().zip(&mb).map(|(x, y)| (x - mu_a) * (y - mu_b)).sum::<f64>() / n;
        let texture = (2.0 * mu_a * mu_b + C) / (mu_a * mu_a + mu_b * mu_b + C);
        let structure = (2.0 * cov + C) / (var_a + var_b + C);
        sim += 0.5 * texture + 0.5 * structure;
    }
    Ok(S::lit((1.0 - sim / pa.len() as f64).max(0.0)))
}

/// Stand-in for NIQE (lower is better): how far the mean-subtracted,
/// contrast-normalized luma deviates from unit-variance Gaussian statistics.
pub fn local_statistics_deviation<S: Scalar>(img: &RasterImage<S>) -> S {
    let (plane, w, h) = luma64(img);
    let gray = RasterImage::<f64>::from_fn(w, h, |x, y| [plane[y * w + x]; 3]);
    let mu = gaussian_blur(&gray, 7.0 / 6.0).channel(0);
    let sq = RasterImage::<f64>::from_fn(w, h, |x, y| [plane[y * w + x].powi(2); 3]);
    let mu2 = gaussian_blur(&sq, 7.0 / 6.0).channel(0);
    let mscn: Vec<f64> = (0..w * h).map(|i| (plane[i] - mu[i]) / ((mu2[i] - mu[i] * mu[i]).max(0.0).sqrt() + 1.0 / 255.0)).collect();
    let n = mscn.len() as f64;
    let mean = mscn.iter().sum::<f64>() / n;
    let var = mscn.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let kurt = if var > 1e-12 { mscn.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n / (var * var) } else { 0.0 };
    S::lit(10.0 * ((var - 1.0).abs() + (kurt - 3.0).abs() / 10.0))
}

/// Stand-in for MUSIQ (0-100): saturating mean gradient magnitude.
pub fn gradient_sharpness<S: Scalar>(img: &RasterImage<S>) -> S {
    let (p, w, h) = luma64(img);
    let (gx, gy) = gradients(&p, w, h);
    let g = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).sum::<f64>() / (w * h) as f64;
    S::lit(100.0 * g / (g + 0.05))
}

/// Stand-in for MANIQA (0-1): saturating Laplacian variance.
pub fn laplacian_sharpness<S: Scalar>(img: &RasterImage<S>) -> S {
    let (p, w, h) = luma64(img);
    let at = |x: isize, y: isize| p[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    let mut lap = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            lap.push(at(x + 1, y) + at(x - 1, y) + at(x, y + 1) + at(x, y - 1) - 4.0 * at(x, y));
        }
    }
    let n = lap.len() as f64;
    let mean = lap.iter().sum::<f64>() / n;
    let v = lap.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    S::lit(v / (v + 1e-3))
}

/// Stand-in for CLIPIQA (0-1): share of luma variance above a blur cutoff.
pub fn high_frequency_ratio<S: Scalar>(img: &RasterImage<S>) -> S {
    let (p, w, h) = luma64(img);
    let gray = RasterImage::<f64>::from_fn(w, h, |x, y| [p[y * w + x]; 3]);
    let low = gaussian_blur(&gray, 1.0).channel(0);
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let total: f64 = p.iter().map(|v| (v - mean).powi(2)).sum();
    if total < 1e-12 {
        return S::zero();
    }
    let high: f64 = p.iter().zip(&low).map(|(a, b)| (a - b).powi(2)).sum();
    S::lit((high / total).min(1.0))
}
