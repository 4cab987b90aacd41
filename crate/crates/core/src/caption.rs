//! Captioners turn instance crops into short text used for hallucination
//! checks and negative prompts.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;

use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::scalar::Scalar;

/// Hallucination threshold on caption similarity.
pub const DEFAULT_TAU: f64 = 0.1;

/// Deterministic image-to-text adapter.
pub trait Captioner<S: Scalar> {
    fn name(&self) -> &str;
    fn caption(&self, image: &RasterImage<S>) -> Result<String>;

    /// Similarity in `[0, 1]` between two captions; cosine over
    /// whitespace-token counts by default.
    fn similarity(&self, a: &str, b: &str) -> f64 {
        token_cosine(a, b)
    }
}

/// Cosine similarity between whitespace-token count vectors. Identical
/// captions score exactly 1; two empty captions score 1.
pub fn token_cosine(a: &str, b: &str) -> f64 {
    if a == b {
        return 1.0;
    }
    let (ca, cb) = (token_counts(a), token_counts(b));
    let dot: u64 = ca.iter().map(|(k, v)| v * cb.get(k).copied().unwrap_or(0)).sum();
    let na: u64 = ca.values().map(|v| v * v).sum();
    let nb: u64 = cb.values().map(|v| v * v).sum();
    match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => dot as f64 / ((na as f64) * (nb as f64)).sqrt(),
    }
}

fn token_counts(s: &str) -> BTreeMap<&str, u64> {
    let mut m = BTreeMap::new();
    for tok in s.split_whitespace() {
        *m.entry(tok).or_default() += 1;
    }
    m
}

/// Stand-in captioner: splits the crop into 4x4 blocks, names each block by
/// its texture (`smooth` / `textured` / `busy`, from luma spread) and its
/// mean colour (six hue names, or five grey levels when unsaturated), and
/// repeats each `texture-colour` token in proportion to its share (tenths,
/// at least the dominant token).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramCaptioner {
    pub block: usize,
}

impl Default for HistogramCaptioner {
    fn default() -> Self {
        Self { block: 4 }
    }
}

fn colour_name(rgb: [f64; 3]) -> &'static str {
    let max = rgb.iter().copied().fold(f64::MIN, f64::max);
    let min = rgb.iter().copied().fold(f64::MAX, f64::min);
    let chroma = max - min;
    if chroma < 0.15 {
        let v = 0.5 * (max + min);
        return match v {
            v if v < 0.2 => "black",
            v if v < 0.45 => "dark-grey",
            v if v <= 0.55 => "grey",
            v if v <= 0.8 => "light-grey",
            _ => "white",
        };
    }
    let [r, g, b] = rgb;
    let hue = if max == r {
        60.0 * ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / chroma + 2.0)
    } else {
        60.0 * ((r - g) / chroma + 4.0)
    };
    const NAMES: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];
    NAMES[(((hue + 30.0) / 60.0).floor() as usize) % 6]
}

fn texture_name(spread: f64) -> &'static str {
    if spread < 0.03 {
        "smooth"
    } else if spread < 0.12 {
        "textured"
    } else {
        "busy"
    }
}

impl<S: Scalar> Captioner<S> for HistogramCaptioner {
    fn name(&self) -> &str {
        "histogram"
    }

    fn caption(&self, image: &RasterImage<S>) -> Result<String> {
        if self.block == 0 {
            return Err(Error::Captioner { name: "histogram".into(), reason: "block size must be positive".into() });
        }
        let (w, h) = image.dims();
        let luma: Vec<f64> = image.luma().into_iter().map(|v| v.as_f64()).collect();
        let mut counts = BTreeMap::<String, usize>::new();
        let mut blocks = 0usize;
        for by in (0..h).step_by(self.block) {
            for bx in (0..w).step_by(self.block) {
                let (x1, y1) = ((bx + self.block).min(w), (by + self.block).min(h));
                let mut sum = [0.0; 3];
                let (mut l1, mut l2, mut n) = (0.0, 0.0, 0.0);
                for y in by..y1 {
                    for x in bx..x1 {
                        let p = image.pixel(x, y);
                        for c in 0..3 {
                            sum[c] += p[c].as_f64();
                        }
                        let l = luma[y * w + x];
                        l1 += l;
                        l2 += l * l;
                        n += 1.0;
                    }
                }
                let mean = sum.map(|s| s / n);
                let spread = (l2 / n - (l1 / n).powi(2)).max(0.0).sqrt();
                *counts.entry(format!("{}-{}", texture_name(spread), colour_name(mean))).or_default() += 1;
                blocks += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = Vec::new();
        for (i, (tok, n)) in ranked.iter().enumerate() {
            let reps = ((10 * n) as f64 / blocks as f64).round() as usize;
            let reps = if i == 0 { reps.max(1) } else { reps };
            words.extend(std::iter::repeat_n(tok.as_str(), reps));
        }
        Ok(words.join(" "))
    }
}

/// Adapter slot for an external captioning model: runs `program args...
/// <png path>` and uses its trimmed stdout as the caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandCaptioner {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl<S: Scalar> Captioner<S> for CommandCaptioner {
    fn name(&self) -> &str {
        "command"
    }

    fn caption(&self, image: &RasterImage<S>) -> Result<String> {
        let fail = |reason: String| Error::Captioner { name: self.program.display().to_string(), reason };
        let dir = tempfile::tempdir().map_err(|e| fail(e.to_string()))?;
        let path = dir.path().join("crop.png");
        image.save_png(&path)?;
        let out = Command::new(&self.program).args(&self.args).arg(&path).output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exit status {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
        }
        let text = String::from_utf8(out.stdout).map_err(|e| fail(e.to_string()))?;
        Ok(text.trim().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes() -> RasterImage<f64> {
        RasterImage::from_fn(16, 16, |x, y| if (x / 4 + y / 8) % 2 == 0 { [0.9, 0.1, 0.1] } else { [0.1, 0.2, 0.85] })
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(token_cosine("a b", "a b"), 1.0);
        assert_eq!(token_cosine("a a", "b"), 0.0);
        assert!((token_cosine("a b", "a c") - 0.5).abs() < 1e-12);
        assert_eq!(token_cosine("", ""), 1.0);
        assert_eq!(token_cosine("", "a"), 0.0);
    }

    #[test]
    fn colour_names_and_inversion() {
        assert_eq!(colour_name([0.9, 0.1, 0.1]), "red");
        assert_eq!(colour_name([0.1, 0.9, 0.9]), "cyan");
        assert_eq!(colour_name([0.1, 0.1, 0.9]), "blue");
        assert_eq!(colour_name([0.9, 0.9, 0.1]), "yellow");
        assert_eq!(colour_name([0.05, 0.05, 0.05]), "black");
        assert_eq!(colour_name([0.5, 0.5, 0.52]), "grey");
    }

    #[test]
    fn captions_are_deterministic_and_inversion_is_dissimilar() {
        let cap = HistogramCaptioner::default();
        let img = stripes();
        let a = Captioner::<f64>::caption(&cap, &img).unwrap();
        assert_eq!(a, Captioner::<f64>::caption(&cap, &img).unwrap());
        assert!(a.contains("smooth-red") && a.contains("smooth-blue"), "{a}");
        let inv = Captioner::<f64>::caption(&cap, &img.map(|v| 1.0 - v)).unwrap();
        assert!(Captioner::<f64>::similarity(&cap, &a, &inv) < DEFAULT_TAU, "{a} / {inv}");
    }

    #[test]
    fn shares_are_in_tenths() {
        let img = RasterImage::<f64>::from_fn(40, 4, |x, _| if x < 12 { [0.9, 0.1, 0.1] } else { [0.1, 0.9, 0.1] });
        let c = Captioner::<f64>::caption(&HistogramCaptioner::default(), &img).unwrap();
        assert_eq!(c.matches("smooth-green").count(), 7);
        assert_eq!(c.matches("smooth-red").count(), 3);
    }

    #[test]
    fn command_captioner_reads_stdout_and_reports_failure() {
        let ok = CommandCaptioner { program: "echo".into(), args: vec!["a".into(), "cat".into()] };
        let c = Captioner::<f64>::caption(&ok, &stripes()).unwrap();
        assert!(c.starts_with("a cat "), "{c}");
        let bad = CommandCaptioner { program: "false".into(), args: vec![] };
        assert!(matches!(Captioner::<f64>::caption(&bad, &stripes()), Err(Error::Captioner { .. })));
    }
}
