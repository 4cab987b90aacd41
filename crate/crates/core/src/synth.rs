//! Procedural scenes for desk-scale runs: a smooth two-colour background
//! with a handful of coloured, optionally textured shapes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IoContext, Result};
use crate::image::RasterImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Texture {
    Flat,
    Stripes { period: f64, angle: f64 },
    Checker { period: f64 },
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // saturated hue with moderate value
    let h = rng.random::<f64>() * 6.0;
    let (s, v) = (0.55 + 0.4 * rng.random::<f64>(), 0.55 + 0.4 * rng.random::<f64>());
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// One deterministic scene of `size x size` pixels.
pub fn synth_scene<S: Scalar>(size: usize, seed: u64) -> RasterImage<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bg_a, bg_b) = (random_colour(&mut rng).map(|v| v * 0.6), random_colour(&mut rng).map(|v| v * 0.6));
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let n = rng.random_range(3..=6);
    let s = size as f64;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let (cx, cy) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
        let r = s * (0.1 + 0.2 * rng.random::<f64>());
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc { cx, cy, r },
            1 => Shape::Rect { x0: cx - r, y0: cy - 0.7 * r, x1: cx + r, y1: cy + 0.7 * r },
            _ => Shape::Ellipse { cx, cy, rx: r, ry: r * (0.4 + 0.5 * rng.random::<f64>()) },
        };
        let texture = match rng.random_range(0..3) {
            0 => Texture::Flat,
            1 => Texture::Stripes { period: 3.0 + 5.0 * rng.random::<f64>(), angle: rng.random::<f64>() * std::f64::consts::PI },
            _ => Texture::Checker { period: 3.0 + 4.0 * rng.random::<f64>() },
        };
        layers.push((shape, texture, random_colour(&mut rng), random_colour(&mut rng)));
    }
    RasterImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let u = ((fx * angle.cos() + fy * angle.sin()) / s).clamp(0.0, 1.0);
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = bg_a[c] * (1.0 - u) + bg_b[c] * u;
        }
        for (shape, texture, main, alt) in &layers {
            if !shape.contains(fx, fy) {
                continue;
            }
            let use_alt = match *texture {
                Texture::Flat => false,
                Texture::Stripes { period, angle } => ((fx * angle.cos() + fy * angle.sin()) / period).floor() as i64 % 2 == 0,
                Texture::Checker { period } => ((fx / period).floor() as i64 + (fy / period).floor() as i64) % 2 == 0,
            };
            px = if use_alt { alt.map(|v| 0.5 * v + 0.25) } else { *main };
        }
        px.map(S::lit)
    })
}

/// Writes `count` scenes as `scene-NNN.png` into `dir`.
pub fn write_synthetic_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("scene-{i:03}.png"));
        synth_scene::<f32>(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)).save_png(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_varied_and_in_range() {
        let a = synth_scene::<f64>(48, 1);
        assert_eq!(a, synth_scene::<f64>(48, 1));
        assert_ne!(a, synth_scene::<f64>(48, 2));
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synthetic_corpus(dir.path(), 3, 32, 5).unwrap();
        assert_eq!(paths.len(), 3);
        let img = RasterImage::<f32>::load_png(&paths[1]).unwrap();
        assert_eq!(img.dims(), (32, 32));
    }
}
