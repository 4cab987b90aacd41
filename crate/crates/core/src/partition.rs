//! Instance partitions: label maps where every pixel belongs to exactly one
//! instance, their area weights, and the segmenters that seed them.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::RasterImage;
use crate::scalar::Scalar;

/// A binary mask as produced by a segmenter; may overlap others or leave holes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl RawMask {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, bits }
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

pub trait Segmenter<S: Scalar> {
    fn name(&self) -> &str;
    fn segment(&self, image: &RasterImage<S>) -> Result<Vec<RawMask>>;
}

/// Regular `tiles_x x tiles_y` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSegmenter {
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl<S: Scalar> Segmenter<S> for GridSegmenter {
    fn name(&self) -> &str {
        "grid"
    }

    fn segment(&self, image: &RasterImage<S>) -> Result<Vec<RawMask>> {
        let (w, h) = image.dims();
        if self.tiles_x == 0 || self.tiles_y == 0 || self.tiles_x > w || self.tiles_y > h {
            return Err(Error::Segmenter { name: "grid".into(), reason: format!("{}x{} tiles on {w}x{h}", self.tiles_x, self.tiles_y) });
        }
        let mut masks = Vec::with_capacity(self.tiles_x * self.tiles_y);
        for ty in 0..self.tiles_y {
            for tx in 0..self.tiles_x {
                let (x0, x1) = (tx * w / self.tiles_x, (tx + 1) * w / self.tiles_x);
                let (y0, y1) = (ty * h / self.tiles_y, (ty + 1) * h / self.tiles_y);
                masks.push(RawMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)));
            }
        }
        Ok(masks)
    }
}

/// Greedy flood fill: a 4-neighbour joins the region when its RGB distance
/// to the running region mean is below `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionGrowingSegmenter {
    pub threshold: f64,
}

impl Default for RegionGrowingSegmenter {
    fn default() -> Self {
        Self { threshold: 0.12 }
    }
}

impl<S: Scalar> Segmenter<S> for RegionGrowingSegmenter {
    fn name(&self) -> &str {
        "region"
    }

    fn segment(&self, image: &RasterImage<S>) -> Result<Vec<RawMask>> {
        let (w, h) = image.dims();
        let px = |i: usize| image.pixel(i % w, i / w).map(|v| v.as_f64());
        let mut label = vec![usize::MAX; w * h];
        let mut regions = 0;
        let mut queue = VecDeque::new();
        for seed in 0..w * h {
            if label[seed] != usize::MAX {
                continue;
            }
            let mut sum = px(seed);
            let mut count = 1.0;
            label[seed] = regions;
            queue.push_back(seed);
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % w, i / w);
                let neighbours = [(x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1), (y > 0).then(|| i - w), (y + 1 < h).then(|| i + w)];
                for j in neighbours.into_iter().flatten() {
                    if label[j] != usize::MAX {
                        continue;
                    }
                    let p = px(j);
                    let dist = (0..3).map(|c| (p[c] - sum[c] / count).powi(2)).sum::<f64>().sqrt();
                    if dist < self.threshold {
                        label[j] = regions;
                        for c in 0..3 {
                            sum[c] += p[c];
                        }
                        count += 1.0;
                        queue.push_back(j);
                    }
                }
            }
            regions += 1;
        }
        Ok((0..regions).map(|r| RawMask { width: w, height: h, bits: label.iter().map(|&l| l == r).collect() }).collect())
    }
}

/// Adapter for masks produced by an external model, delivered as a 16-bit
/// label-map PNG (one mask per distinct value).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSegmenter {
    pub label_map: PathBuf,
}

impl<S: Scalar> Segmenter<S> for ExternalSegmenter {
    fn name(&self) -> &str {
        "external"
    }

    fn segment(&self, image: &RasterImage<S>) -> Result<Vec<RawMask>> {
        let fail = |reason: String| Error::Segmenter { name: "external".into(), reason };
        let (labels, w, h) = read_label_png(&self.label_map).map_err(|e| fail(e.to_string()))?;
        if (w, h) != image.dims() {
            return Err(fail(format!("label map {w}x{h} vs image {:?}", image.dims())));
        }
        let values: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
        Ok(values.into_iter().map(|v| RawMask { width: w, height: h, bits: labels.iter().map(|&l| l == v).collect() }).collect())
    }
}

/// Exact partition of an image into `M >= 1` non-empty instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstancePartition {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    num_instances: usize,
    background: Option<u32>,
}

impl InstancePartition {
    /// Validates that labels are exactly `0..M` with every label used.
    pub fn new(width: usize, height: usize, labels: Vec<u32>, background: Option<u32>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::NotAPartition(format!("{} labels for {width}x{height}", labels.len())));
        }
        let num_instances = *labels.iter().max().expect("non-empty") as usize + 1;
        let mut areas = vec![0usize; num_instances];
        for &l in &labels {
            areas[l as usize] += 1;
        }
        if let Some(empty) = areas.iter().position(|&a| a == 0) {
            return Err(Error::NotAPartition(format!("instance {empty} is empty")));
        }
        if let Some(b) = background {
            if b as usize >= num_instances {
                return Err(Error::NotAPartition(format!("background {b} outside 0..{num_instances}")));
            }
        }
        Ok(Self { width, height, labels, num_instances, background })
    }

    /// Single instance covering the whole image.
    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height], num_instances: 1, background: None }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn background(&self) -> Option<u32> {
        self.background
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.num_instances];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    pub fn mask(&self, instance: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == instance).collect()
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        (0..self.num_instances).map(|m| self.mask(m)).collect()
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)` of an instance.
    pub fn bounding_box(&self, instance: usize) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize != instance {
                continue;
            }
            let (x, y) = (i % self.width, i / self.width);
            bbox = Some(match bbox {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        bbox
    }

    /// Relabels to `0..M` in order of first appearance of `order`'s keys.
    fn compacted(width: usize, height: usize, labels: &[u32], keep_order: &[u32], background: Option<u32>) -> Self {
        let mut map = BTreeMap::new();
        for &old in keep_order {
            if labels.contains(&old) && !map.contains_key(&old) {
                let next = map.len() as u32;
                map.insert(old, next);
            }
        }
        let labels: Vec<u32> = labels.iter().map(|l| map[l]).collect();
        let background = background.and_then(|b| map.get(&b).copied());
        Self::new(width, height, labels, background).expect("compaction keeps a partition")
    }

    pub fn save(&self, png: &Path, sidecar: &Path) -> Result<()> {
        write_label_png(png, &self.labels, self.width, self.height)?;
        let sc = PartitionSidecar {
            pixel_counts: self.areas().into_iter().enumerate().map(|(i, a)| (i.to_string(), a)).collect(),
            background: self.background,
        };
        crate::degrade::write_atomic(sidecar, &serde_json::to_vec_pretty(&sc)?)
    }

    pub fn load(png: &Path, sidecar: &Path) -> Result<Self> {
        let (labels, w, h) = read_label_png(png)?;
        let sc: PartitionSidecar = serde_json::from_slice(&std::fs::read(sidecar).io_context(|| format!("reading {}", sidecar.display()))?)?;
        let p = Self::new(w, h, labels, sc.background)?;
        let areas = p.areas();
        for (id, count) in &sc.pixel_counts {
            let idx: usize = id.parse().map_err(|_| Error::NotAPartition(format!("bad instance id {id:?} in sidecar")))?;
            if areas.get(idx) != Some(count) {
                return Err(Error::NotAPartition(format!("sidecar count for {id} disagrees with {}", png.display())));
            }
        }
        Ok(p)
    }
}

/// Sidecar next to a label-map PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSidecar {
    pub pixel_counts: BTreeMap<String, usize>,
    pub background: Option<u32>,
}

fn write_label_png(path: &Path, labels: &[u32], width: usize, height: usize) -> Result<()> {
    if let Some(&big) = labels.iter().find(|&&l| l > u16::MAX as u32) {
        return Err(Error::InvalidArgument(format!("label {big} does not fit a 16-bit label map")));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).io_context(|| format!("creating {}", parent.display()))?;
    }
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(width as u32, height as u32, labels.iter().map(|&l| l as u16).collect()).expect("sized buffer");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn read_label_png(path: &Path) -> Result<(Vec<u32>, usize, usize)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma16();
    let (w, h) = img.dimensions();
    Ok((img.into_raw().into_iter().map(u32::from).collect(), w as usize, h as usize))
}

/// Resolves overlaps in favour of the smaller mask (ties by lower index),
/// collects uncovered pixels into a trailing background instance and drops
/// empty masks.
pub fn enforce_partition(raw: &[RawMask], width: usize, height: usize) -> Result<InstancePartition> {
    if let Some(bad) = raw.iter().position(|m| m.width != width || m.height != height || m.bits.len() != width * height) {
        return Err(Error::ShapeMismatch(format!("mask {bad} does not fit {width}x{height}")));
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by_key(|&i| (raw[i].area(), i));
    let mut owner: Vec<Option<usize>> = vec![None; width * height];
    for &m in &order {
        for (o, &bit) in owner.iter_mut().zip(&raw[m].bits) {
            if bit && o.is_none() {
                *o = Some(m);
            }
        }
    }
    let bg = raw.len() as u32;
    let labels: Vec<u32> = owner.iter().map(|o| o.map_or(bg, |m| m as u32)).collect();
    let has_bg = labels.contains(&bg);
    let keep: Vec<u32> = (0..=bg).collect();
    Ok(InstancePartition::compacted(width, height, &labels, &keep, has_bg.then_some(bg)))
}

pub fn segment_partition<S: Scalar>(image: &RasterImage<S>, segmenter: &dyn Segmenter<S>) -> Result<InstancePartition> {
    let raw = segmenter.segment(image)?;
    if raw.is_empty() {
        return Err(Error::Segmenter { name: segmenter.name().into(), reason: "no masks".into() });
    }
    enforce_partition(&raw, image.width(), image.height())
}

/// Area weights `w_m = |s_m| / sum |s_m|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceWeightVector<S> {
    pub weights: Vec<S>,
}

impl<S: Scalar> InstanceWeightVector<S> {
    pub fn uniform_single() -> Self {
        Self { weights: vec![S::one()] }
    }

    pub fn sum(&self) -> S {
        self.weights.iter().copied().sum()
    }

    /// Zeroes one instance and renormalizes the rest.
    pub fn excluding(&self, instance: usize) -> Result<Self> {
        let mut weights = self.weights.clone();
        if instance >= weights.len() {
            return Err(Error::InvalidArgument(format!("instance {instance} outside {}", weights.len())));
        }
        weights[instance] = S::zero();
        let total: S = weights.iter().copied().sum();
        if total <= S::zero() {
            return Err(Error::InvalidArgument("no weight left after exclusion".into()));
        }
        weights.iter_mut().for_each(|w| *w = *w / total);
        Ok(Self { weights })
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.weights.iter().all(|w| *w >= S::zero()) && (self.sum().as_f64() - 1.0).abs() <= tol
    }
}

pub fn instance_weights<S: Scalar>(p: &InstancePartition) -> InstanceWeightVector<S> {
    let total = S::from_usize(p.labels.len()).unwrap();
    InstanceWeightVector { weights: p.areas().into_iter().map(|a| S::from_usize(a).unwrap() / total).collect() }
}

/// Keeps the `k` largest instances (ties by lower label) and merges the
/// rest into one background instance labelled `k`.
pub fn top_k_largest(p: &InstancePartition, k: usize) -> Result<InstancePartition> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k >= p.num_instances {
        return Ok(p.clone());
    }
    let areas = p.areas();
    let mut order: Vec<usize> = (0..p.num_instances).collect();
    order.sort_by_key(|&m| (std::cmp::Reverse(areas[m]), m));
    let mut remap = vec![k as u32; p.num_instances];
    for (rank, &m) in order.iter().take(k).enumerate() {
        remap[m] = rank as u32;
    }
    let labels = p.labels.iter().map(|&l| remap[l as usize]).collect();
    InstancePartition::new(p.width, p.height, labels, Some(k as u32))
}

/// Nearest-neighbour resampling of the label map; labels that vanish are
/// dropped and the rest compacted in their original order.
pub fn resample_partition(p: &InstancePartition, width: usize, height: usize) -> Result<InstancePartition> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!("target {width}x{height}")));
    }
    if (width, height) == (p.width, p.height) {
        return Ok(p.clone());
    }
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = (((y as f64 + 0.5) * p.height as f64 / height as f64) as usize).min(p.height - 1);
        for x in 0..width {
            let sx = (((x as f64 + 0.5) * p.width as f64 / width as f64) as usize).min(p.width - 1);
            labels.push(p.labels[sy * p.width + sx]);
        }
    }
    let order: Vec<u32> = (0..p.num_instances as u32).collect();
    Ok(InstancePartition::compacted(width, height, &labels, &order, p.background))
}
