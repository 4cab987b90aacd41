//! Synthetic LQ/HQ pair generation: blur, area downsampling, additive
//! Gaussian noise and block-DCT quantization, optionally applied twice.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::image::{RasterImage, MIN_DATASET_SIDE};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    /// Gaussian blur standard deviation in HQ pixels; 0 disables blur.
    pub blur_sigma: f64,
    /// Additive noise standard deviation in `[0, 1]` intensity units.
    pub noise_sigma: f64,
    /// Integer SR factor.
    pub downscale: usize,
    /// JPEG-style quality in `1..=100`; 100 disables quantization.
    pub compression_quality: u8,
    pub second_order: bool,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self { blur_sigma: 1.2, noise_sigma: 0.03, downscale: 4, compression_quality: 75, second_order: false, seed: 0 }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur_sigma {} must be >= 0", self.blur_sigma)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.downscale == 0 {
            return Err(Error::InvalidArgument("downscale must be >= 1".into()));
        }
        if !(1..=100).contains(&self.compression_quality) {
            return Err(Error::InvalidArgument(format!("quality {} outside 1..=100", self.compression_quality)));
        }
        Ok(())
    }

    /// Same configuration with a different noise seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Uniformly random `size x size` window, deterministic in `seed`.
pub fn random_crop<S: Scalar>(hq: &RasterImage<S>, size: usize, seed: u64) -> Result<RasterImage<S>> {
    let (w, h) = hq.dims();
    if w < size || h < size {
        return Err(Error::ImageTooSmall { width: w, height: h, size });
    }
    if size < MIN_DATASET_SIDE {
        return Err(Error::InvalidArgument(format!("crop size {size} below {MIN_DATASET_SIDE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rng.random_range(0..=w - size);
    let y0 = rng.random_range(0..=h - size);
    hq.crop(x0, y0, size, size)
}

/// Applies the degradation chain, producing an image `downscale` times smaller.
pub fn degrade<S: Scalar>(hq: &RasterImage<S>, cfg: &DegradationConfig) -> Result<RasterImage<S>> {
    cfg.validate()?;
    hq.ensure_min_side(MIN_DATASET_SIDE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut img = gaussian_blur(hq, cfg.blur_sigma);
    img = img.area_downsample(cfg.downscale)?;
    img = add_gaussian_noise(&img, cfg.noise_sigma, &mut rng);
    img = dct_quantize(&img, cfg.compression_quality);
    if cfg.second_order {
        img = gaussian_blur(&img, cfg.blur_sigma / cfg.downscale as f64);
        img = add_gaussian_noise(&img, cfg.noise_sigma * 0.5, &mut rng);
        img = dct_quantize(&img, cfg.compression_quality);
    }
    Ok(img)
}

/// Separable Gaussian blur (radius `ceil(3 sigma)`, reflect padding).
pub fn gaussian_blur<S: Scalar>(img: &RasterImage<S>, sigma: f64) -> RasterImage<S> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let kernel: Vec<S> = kernel.into_iter().map(S::lit).collect();
    let (w, h) = img.dims();
    let horizontal = RasterImage::from_fn(w, h, |x, y| {
        let mut acc = [S::zero(); 3];
        for (k, &kw) in kernel.iter().enumerate() {
            let sx = reflect(x as isize + k as isize - radius, w);
            let p = img.pixel(sx, y);
            for c in 0..3 {
                acc[c] += kw * p[c];
            }
        }
        acc
    });
    RasterImage::from_fn(w, h, |x, y| {
        let mut acc = [S::zero(); 3];
        for (k, &kw) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - radius, h);
            let p = horizontal.pixel(x, sy);
            for c in 0..3 {
                acc[c] += kw * p[c];
            }
        }
        acc
    })
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn add_gaussian_noise<S: Scalar, R: Rng>(img: &RasterImage<S>, sigma: f64, rng: &mut R) -> RasterImage<S> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let pixels = img.pixels().iter().map(|&v| v + { let n: f64 = StandardNormal.sample(rng); S::lit(sigma * n) }).collect();
    RasterImage::from_clamped(img.width(), img.height(), pixels).expect("same shape")
}

const JPEG_LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56., 14., 17.,
    22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78.,
    87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quantization step table for a JPEG quality level (IJG scaling).
fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    JPEG_LUMA_TABLE.map(|v| ((v * scale + 50.0) / 100.0).floor().max(1.0))
}

/// 8x8 block DCT quantization per channel, a stand-in for JPEG compression.
/// Partial edge blocks are handled by edge replication.
pub fn dct_quantize<S: Scalar>(img: &RasterImage<S>, quality: u8) -> RasterImage<S> {
    if quality >= 100 {
        return img.clone();
    }
    let table = quant_table(quality);
    let basis = dct_basis();
    let (w, h) = img.dims();
    let mut out = img.pixels().to_vec();
    let mut block = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    for c in 0..3 {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for v in 0..8 {
                    for u in 0..8 {
                        let (x, y) = ((bx + u).min(w - 1), (by + v).min(h - 1));
                        block[v * 8 + u] = img.get(x, y, c).as_f64() * 255.0 - 128.0;
                    }
                }
                // forward 2D DCT-II (orthonormal)
                for k in 0..8 {
                    for l in 0..8 {
                        let mut acc = 0.0;
                        for v in 0..8 {
                            for u in 0..8 {
                                acc += basis[k][v] * basis[l][u] * block[v * 8 + u];
                            }
                        }
                        let q = table[k * 8 + l];
                        coef[k * 8 + l] = (acc / q).round() * q;
                    }
                }
                for v in 0..8 {
                    for u in 0..8 {
                        let (x, y) = (bx + u, by + v);
                        if x >= w || y >= h {
                            continue;
                        }
                        let mut acc = 0.0;
                        for k in 0..8 {
                            for l in 0..8 {
                                acc += basis[k][v] * basis[l][u] * coef[k * 8 + l];
                            }
                        }
                        out[(y * w + x) * 3 + c] = S::lit((acc + 128.0) / 255.0);
                    }
                }
            }
        }
    }
    RasterImage::from_clamped(w, h, out).expect("same shape")
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
        }
    }
    b
}

/// An HQ crop with its degraded counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample<S> {
    pub id: String,
    pub hq: RasterImage<S>,
    pub lq: RasterImage<S>,
}

impl<S: Scalar> PairedSample<S> {
    pub fn new(id: impl Into<String>, hq: RasterImage<S>, lq: RasterImage<S>) -> Result<Self> {
        if lq.width() == 0 || hq.width() % lq.width() != 0 || hq.height() % lq.height() != 0 || hq.width() / lq.width() != hq.height() / lq.height() {
            return Err(Error::ShapeMismatch(format!("hq {:?} vs lq {:?}", hq.dims(), lq.dims())));
        }
        Ok(Self { id: id.into(), hq, lq })
    }

    pub fn scale(&self) -> usize {
        self.hq.width() / self.lq.width()
    }

    /// Crops `hq` with `seed` and degrades it with `cfg`.
    pub fn synthesize(id: impl Into<String>, source: &RasterImage<S>, crop: usize, cfg: &DegradationConfig) -> Result<Self> {
        if crop % cfg.downscale != 0 {
            return Err(Error::InvalidArgument(format!("downscale {} does not divide crop {crop}", cfg.downscale)));
        }
        let hq = random_crop(source, crop, cfg.seed)?;
        let lq = degrade(&hq, cfg)?;
        Self::new(id, hq, lq)
    }
}

/// One line of the pair manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub hq_path: PathBuf,
    pub lq_path: PathBuf,
    pub config: DegradationConfig,
}

impl PairRecord {
    pub fn load<S: Scalar>(&self) -> Result<PairedSample<S>> {
        PairedSample::new(self.id.clone(), RasterImage::load_png(&self.hq_path)?, RasterImage::load_png(&self.lq_path)?)
    }
}

pub const PAIR_MANIFEST: &str = "pairs.jsonl";

/// Derives a per-image seed from the base seed and the image id.
pub fn item_seed(base: u64, id: &str) -> u64 {
    let digest = Sha256::new().chain_update(base.to_le_bytes()).chain_update(id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Crops and degrades every readable image in `source_dir` (sorted by file
/// name), writing `hq/<id>.png`, `lq/<id>.png` and `pairs.jsonl` under
/// `out_dir`. Unreadable or too-small files are skipped with a warning.
pub fn build_pair_dataset(source_dir: &Path, out_dir: &Path, cfg: &DegradationConfig, crop: usize) -> Result<Vec<PairRecord>> {
    cfg.validate()?;
    if crop % cfg.downscale != 0 {
        return Err(Error::InvalidArgument(format!("downscale {} does not divide crop {crop}", cfg.downscale)));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(source_dir)
        .io_context(|| format!("reading {}", source_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut records = Vec::new();
    for path in files {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let source = match RasterImage::<f32>::load_png(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping unreadable {}: {e}", path.display());
                continue;
            }
        };
        let item_cfg = cfg.reseeded(item_seed(cfg.seed, &id));
        let pair = match PairedSample::synthesize(id.clone(), &source, crop, &item_cfg) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let hq_path = out_dir.join("hq").join(format!("{id}.png"));
        let lq_path = out_dir.join("lq").join(format!("{id}.png"));
        pair.hq.save_png(&hq_path)?;
        pair.lq.save_png(&lq_path)?;
        records.push(PairRecord { id, hq_path, lq_path, config: item_cfg });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(source_dir.to_path_buf()));
    }
    write_jsonl(&out_dir.join(PAIR_MANIFEST), &records)?;
    Ok(records)
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    read_jsonl(path)
}

/// Writes one JSON value per line, atomically (temp file then rename).
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).io_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.io_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Malformed { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        out.push(item);
    }
    Ok(out)
}

/// Write-temp-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).io_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes).io_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path).map_err(|e| Error::Io { context: format!("renaming into {}", path.display()), source: e.error })?;
    Ok(())
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).io_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> RasterImage<f64> {
        RasterImage::from_fn(w, h, |x, y| {
            let v = ((x * 7 + y * 13) % 17) as f64 / 16.0;
            [v, 1.0 - v, (x % 5) as f64 / 4.0]
        })
    }

    #[test]
    fn crop_sizes_and_determinism() {
        let img = textured(1024, 1024).cast::<f32>();
        let a = random_crop(&img, 512, 9).unwrap();
        assert_eq!(a.dims(), (512, 512));
        assert_eq!(a, random_crop(&img, 512, 9).unwrap());
        let small = textured(64, 64);
        assert_eq!(random_crop(&small, 64, 3).unwrap(), small);
        assert!(matches!(random_crop(&small, 65, 0), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn degradation_free_path_is_area_downsampling() {
        let cfg = DegradationConfig { blur_sigma: 0.0, noise_sigma: 0.0, downscale: 4, compression_quality: 100, second_order: false, seed: 1 };
        let c = RasterImage::<f64>::constant(64, 64, [0.3, 0.6, 0.9]);
        let lq = degrade(&c, &cfg).unwrap();
        assert_eq!(lq.dims(), (16, 16));
        assert_eq!(lq, c.area_downsample(4).unwrap());
        for p in lq.pixels().chunks(3) {
            assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12 && (p[2] - 0.9).abs() < 1e-12);
        }
        let t = textured(64, 64);
        assert_eq!(degrade(&t, &cfg).unwrap(), t.area_downsample(4).unwrap());
    }

    #[test]
    fn noisy_degradation_is_deterministic_and_clamped() {
        let cfg = DegradationConfig { noise_sigma: 0.1, second_order: true, ..DegradationConfig::default() };
        let t = textured(64, 64);
        let a = degrade(&t, &cfg).unwrap();
        let b = degrade(&t, &cfg).unwrap();
        assert_eq!(a.dims(), (16, 16));
        assert_eq!(a.pixels(), b.pixels());
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, degrade(&t, &cfg.reseeded(99)).unwrap());
    }

    #[test]
    fn dct_quantization_keeps_constants_close() {
        let c = RasterImage::<f64>::constant(16, 16, [0.5, 0.5, 0.5]);
        let q = dct_quantize(&c, 10);
        for v in q.pixels() {
            assert!((v - 0.5).abs() < 0.1);
        }
        let t = textured(16, 16);
        assert_ne!(dct_quantize(&t, 10), t);
        assert_eq!(dct_quantize(&t, 100), t);
    }

    #[test]
    fn config_validation() {
        assert!(DegradationConfig { compression_quality: 0, ..Default::default() }.validate().is_err());
        assert!(DegradationConfig { blur_sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(DegradationConfig { downscale: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-3, 1), 0);
    }
}
