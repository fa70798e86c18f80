use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::Result;
use crate::match_loss::{BBox, GroundTruth};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Probabilities and ranges of the training augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentOptions {
    pub flip_prob: f64,
    /// Probability of placing the image on a larger canvas first.
    pub expand_prob: f64,
    /// Largest canvas side as a multiple of the image side.
    pub max_expand: f64,
    /// Probability of cropping a random window.
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the (expanded) image side.
    pub min_crop: f64,
    /// Maximum additive brightness shift.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            expand_prob: 0.5,
            max_expand: 2.0,
            crop_prob: 0.5,
            min_crop: 0.5,
            brightness: 0.1,
            contrast: 0.2,
        }
    }
}

const CROP_ATTEMPTS: usize = 50;

/// Mirrors the image left to right and reflects every box (`x' = 1 − x`).
pub fn hflip(sample: &Sample) -> Sample {
    let (c, h, w) = (sample.image.shape()[0], sample.height(), sample.width());
    let src = sample.image.data();
    let mut data = vec![0.0; src.len()];
    for ch in 0..c {
        for r in 0..h {
            let row = (ch * h + r) * w;
            for x in 0..w {
                data[row + x] = src[row + w - 1 - x];
            }
        }
    }
    let annotations = sample
        .annotations
        .iter()
        .map(|g| GroundTruth {
            bbox: BBox { xmin: 1.0 - g.bbox.xmax, ymin: g.bbox.ymin, xmax: 1.0 - g.bbox.xmin, ymax: g.bbox.ymax },
            ..*g
        })
        .collect();
    Sample { image: Tensor::new(sample.image.shape().to_vec(), data).expect("same shape"), annotations }
}

/// Random flip, expand-and-crop and intensity jitter; the output keeps the
/// input's image size and contains at least one annotation whenever the
/// input does. Deterministic in `(sample, seed)`.
pub fn augment(sample: &Sample, seed: u64, opts: &AugmentOptions) -> Result<Sample> {
    let mut rng = substream(seed, "augment", &[]);
    let mut out = if rng.random_bool(opts.flip_prob.clamp(0.0, 1.0)) { hflip(sample) } else { sample.clone() };

    // Window of the output in the coordinates of the expanded canvas, where
    // the original image occupies [ox, ox + 1/scale] x [oy, oy + 1/scale].
    let mut scale = 1.0;
    let (mut ox, mut oy) = (0.0, 0.0);
    if opts.max_expand > 1.0 && rng.random_bool(opts.expand_prob.clamp(0.0, 1.0)) {
        scale = rng.random_range(1.0..=opts.max_expand);
        ox = rng.random_range(0.0..=1.0 - 1.0 / scale);
        oy = rng.random_range(0.0..=1.0 - 1.0 / scale);
    }
    let on_canvas: Vec<GroundTruth> = out
        .annotations
        .iter()
        .map(|g| GroundTruth {
            bbox: BBox {
                xmin: ox + g.bbox.xmin / scale,
                ymin: oy + g.bbox.ymin / scale,
                xmax: ox + g.bbox.xmax / scale,
                ymax: oy + g.bbox.ymax / scale,
            },
            ..*g
        })
        .collect();

    let mut window = BBox { xmin: 0.0, ymin: 0.0, xmax: 1.0, ymax: 1.0 };
    let mut kept = on_canvas.clone();
    if !on_canvas.is_empty() && rng.random_bool(opts.crop_prob.clamp(0.0, 1.0)) {
        let lo = opts.min_crop.clamp(0.05, 1.0);
        for _ in 0..CROP_ATTEMPTS {
            let cw = rng.random_range(lo..=1.0);
            let ch = rng.random_range(lo..=1.0);
            let x0 = rng.random_range(0.0..=1.0 - cw);
            let y0 = rng.random_range(0.0..=1.0 - ch);
            let cand = BBox { xmin: x0, ymin: y0, xmax: x0 + cw, ymax: y0 + ch };
            let inside: Vec<GroundTruth> = on_canvas
                .iter()
                .filter(|g| {
                    let (cx, cy) = g.bbox.center();
                    cx > cand.xmin && cx < cand.xmax && cy > cand.ymin && cy < cand.ymax
                })
                .copied()
                .collect();
            if !inside.is_empty() {
                window = cand;
                kept = inside;
                break;
            }
        }
    }

    let (h, w) = (out.height(), out.width());
    if scale != 1.0 || window.area() < 1.0 {
        out.image = resample(&out.image, scale, ox, oy, &window, h, w);
    }
    let (ww, wh) = (window.width(), window.height());
    let mut annotations = Vec::with_capacity(kept.len());
    for g in kept {
        let b = BBox {
            xmin: (g.bbox.xmin - window.xmin) / ww,
            ymin: (g.bbox.ymin - window.ymin) / wh,
            xmax: (g.bbox.xmax - window.xmin) / ww,
            ymax: (g.bbox.ymax - window.ymin) / wh,
        }
        .clipped();
        if b.check().is_ok() {
            annotations.push(GroundTruth::new(g.class_id, b, g.difficult)?);
        }
    }
    out.annotations = annotations;

    let gain = 1.0 + rng.random_range(-opts.contrast..=opts.contrast);
    let shift = rng.random_range(-opts.brightness..=opts.brightness);
    let mean = out.image.data().iter().sum::<f64>() / out.image.len().max(1) as f64;
    out.image = out.image.map(|v| ((v - mean) * gain + mean + shift).clamp(0.0, 1.0));
    Ok(out)
}

/// Bilinear resampling of `window` of the expanded canvas back to `h x w`.
/// Canvas pixels outside the original image take the image mean.
fn resample(img: &Tensor, scale: f64, ox: f64, oy: f64, window: &BBox, h: usize, w: usize) -> Tensor {
    let c = img.shape()[0];
    let (ih, iw) = (img.shape()[1], img.shape()[2]);
    let src = img.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * ih * iw..(ch + 1) * ih * iw];
        let fill = plane.iter().sum::<f64>() / plane.len() as f64;
        let at = |r: isize, x: isize| -> f64 {
            if r < 0 || x < 0 || r >= ih as isize || x >= iw as isize {
                fill
            } else {
                plane[r as usize * iw + x as usize]
            }
        };
        for r in 0..h {
            let v = window.ymin + (r as f64 + 0.5) / h as f64 * window.height();
            let sy = (v - oy) * scale * ih as f64 - 0.5;
            for x in 0..w {
                let u = window.xmin + (x as f64 + 0.5) / w as f64 * window.width();
                let sx = (u - ox) * scale * iw as f64 - 0.5;
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                out[(ch * h + r) * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("sized buffer")
}
