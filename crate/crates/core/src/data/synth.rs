use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::px_to_unit;
use crate::error::{Error, Result};
use crate::match_loss::{BBox, GroundTruth};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Kind of procedural shape. Class ids follow the order of
/// [`SynthSpec::classes`], starting at 1 (0 is background).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

/// Parameters of the procedural shapes dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_images: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub classes: Vec<ShapeKind>,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    /// Inclusive range of object side lengths as fractions of the image side.
    pub size: (f64, f64),
    /// Maximum IoU between any two placed objects.
    pub max_overlap: f64,
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 256,
            image_size: 96,
            channels: 1,
            classes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle],
            objects: (1, 3),
            size: (0.2, 0.5),
            max_overlap: 0.1,
            noise: 0.05,
        }
    }
}

/// Sub-pixel sampling grid per axis when rasterising shapes.
const SUPERSAMPLE: usize = 4;
/// Shape geometry is snapped to this fraction of a pixel so that pixel
/// coordinates are exactly representable in the manifest.
const GRID: f64 = 16.0;
/// Placement attempts per object before the object is dropped.
const PLACEMENT_ATTEMPTS: usize = 200;
const BACKGROUND_MEAN: f64 = 0.2;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return bad(format!("class {} listed twice", c.name()));
            }
        }
        let (lo, hi) = self.objects;
        if lo == 0 || lo > hi {
            return bad(format!("objects range ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        let (a, b) = self.size;
        if !(a > 0.0 && a <= b && b < 1.0) {
            return bad(format!("size range ({a}, {b}) must satisfy 0 < min <= max < 1"));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return bad(format!("max_overlap {} must lie in [0, 1)", self.max_overlap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be a finite non-negative number", self.noise));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }

    /// Mean fill intensity of class `k` (0-based), evenly spread over
    /// [0.5, 0.95].
    fn fill_mean(&self, k: usize) -> f64 {
        let n = self.classes.len();
        if n == 1 {
            0.75
        } else {
            0.5 + 0.45 * k as f64 / (n - 1) as f64
        }
    }
}

/// One image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` with intensities in [0, 1].
    pub image: Tensor,
    pub annotations: Vec<GroundTruth>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// A placed shape in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Placed {
    kind: ShapeKind,
    class: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    /// Apex x of a triangle (its base spans the bottom edge).
    apex: f64,
}

impl Placed {
    fn contains(&self, x: f64, y: f64) -> bool {
        if x < self.x0 || x > self.x1 || y < self.y0 || y > self.y1 {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let (cx, cy) = ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0);
                let (rx, ry) = ((self.x1 - self.x0) / 2.0, (self.y1 - self.y0) / 2.0);
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            ShapeKind::Triangle => {
                let t = (y - self.y0) / (self.y1 - self.y0);
                let left = self.apex + (self.x0 - self.apex) * t;
                let right = self.apex + (self.x1 - self.apex) * t;
                x >= left && x <= right
            }
        }
    }

    fn bbox(&self) -> BBox {
        BBox { xmin: self.x0, ymin: self.y0, xmax: self.x1, ymax: self.y1 }
    }
}

/// Generates the whole dataset. Sample `i` equals [`generate_sample`]`(spec, i)`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    par_map!(0..spec.num_images, |i| generate_sample(spec, i)).into_iter().collect()
}

/// Generates sample `index` alone; a pure function of `(spec, index)`.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let size = spec.image_size as f64;
    let mut rng = substream(spec.seed, "synth", &[index as u64]);
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let snap = |v: f64| (v * GRID).round() / GRID;

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = snap(rng.random_range(spec.size.0..=spec.size.1) * size).max(1.0);
            let h = snap(rng.random_range(spec.size.0..=spec.size.1) * size).max(1.0);
            let x0 = snap(rng.random_range(0.0..=size - w));
            let y0 = snap(rng.random_range(0.0..=size - h));
            let class = rng.random_range(0..spec.classes.len());
            let apex = snap(x0 + rng.random_range(0.0..=w));
            let cand = Placed { kind: spec.classes[class], class, x0, y0, x1: x0 + w, y1: y0 + h, apex };
            let ok = placed.iter().all(|p| p.bbox().iou_unchecked(&cand.bbox()) <= spec.max_overlap);
            if ok {
                placed.push(cand);
                break;
            }
        }
    }

    let n = spec.image_size;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let draw = |rng: &mut crate::rng::Rng| if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
    let mut plane = vec![0.0; n * n];
    for v in plane.iter_mut() {
        *v = BACKGROUND_MEAN + draw(&mut rng);
    }
    for p in &placed {
        let level = spec.fill_mean(p.class) + rng.random_range(-0.03..=0.03);
        let (c0, c1) = (p.x0.floor() as usize, (p.x1.ceil() as usize).min(n));
        let (r0, r1) = (p.y0.floor() as usize, (p.y1.ceil() as usize).min(n));
        for r in r0..r1 {
            for c in c0..c1 {
                let cover = coverage(p, c as f64, r as f64);
                if cover > 0.0 {
                    let fill = level + draw(&mut rng);
                    let idx = r * n + c;
                    plane[idx] = plane[idx] * (1.0 - cover) + fill * cover;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(spec.channels * n * n);
    for ch in 0..spec.channels {
        for &v in &plane {
            let v = if ch == 0 { v } else { v + draw(&mut rng) };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let image = Tensor::new(vec![spec.channels, n, n], data)?;
    let annotations = placed
        .iter()
        .map(|p| GroundTruth::new(p.class + 1, px_to_unit(&p.bbox(), size, size), false))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample { image, annotations })
}

/// Fraction of the sub-pixel samples of pixel `(c, r)` inside the shape.
fn coverage(p: &Placed, c: f64, r: f64) -> f64 {
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut hits = 0;
    for i in 0..SUPERSAMPLE {
        for j in 0..SUPERSAMPLE {
            let x = c + (j as f64 + 0.5) * step;
            let y = r + (i as f64 + 0.5) * step;
            hits += p.contains(x, y) as usize;
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}
