use serde::{Deserialize, Serialize};

use crate::detector::{PriorBox, Predictions};
use crate::error::{Error, Result};
use crate::match_loss::{decode, BBox, Variances};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// 1-based foreground class.
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOptions {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub variances: Variances,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { conf_threshold: 0.01, nms_iou: 0.45, top_k: 200, variances: Variances::default() }
    }
}

/// Greedy non-maximum suppression: visit boxes by descending score (ties
/// to the lower index), keep a box unless it overlaps an already kept box
/// by IoU above `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let n = boxes.len().min(scores.len());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| boxes[k].iou_unchecked(&boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn decode_image(loc: &[f64], conf: &[f64], k: usize, priors: &[PriorBox], opts: &DecodeOptions) -> Vec<Detection> {
    let p = priors.len();
    let mut probs = vec![0.0; p * k];
    for i in 0..p {
        softmax_into(&conf[i * k..(i + 1) * k], &mut probs[i * k..(i + 1) * k]);
    }
    let mut boxes: Vec<Option<BBox>> = vec![None; p];
    let mut out = Vec::new();
    for class in 1..k {
        let mut cand_boxes = Vec::new();
        let mut cand_scores = Vec::new();
        for i in 0..p {
            let s = probs[i * k + class];
            if s <= opts.conf_threshold {
                continue;
            }
            let b = *boxes[i].get_or_insert_with(|| {
                let o = [loc[i * 4], loc[i * 4 + 1], loc[i * 4 + 2], loc[i * 4 + 3]];
                decode(&o, &priors[i], opts.variances).clipped()
            });
            if b.check().is_ok() {
                cand_boxes.push(b);
                cand_scores.push(s);
            }
        }
        for i in nms(&cand_boxes, &cand_scores, opts.nms_iou) {
            out.push(Detection { class_id: class, score: cand_scores[i], bbox: cand_boxes[i] });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
    out.truncate(opts.top_k);
    out
}

/// Per-image detections: softmax over classes, background dropped, then per
/// class a confidence filter, box decoding (clipped to the unit square),
/// NMS, and finally the `top_k` highest-scoring detections overall.
pub fn decode_detections(pred: &Predictions, priors: &[PriorBox], opts: &DecodeOptions) -> Result<Vec<Vec<Detection>>> {
    let [n, p, four] = pred.loc.shape()[..] else {
        return Err(Error::shape("decode_detections", format!("loc {:?}", pred.loc.shape())));
    };
    let [nc, pc, k] = pred.conf.shape()[..] else {
        return Err(Error::shape("decode_detections", format!("conf {:?}", pred.conf.shape())));
    };
    if four != 4 || nc != n || pc != p || p != priors.len() {
        return Err(Error::shape(
            "decode_detections",
            format!("loc {:?}, conf {:?} and {} priors disagree", pred.loc.shape(), pred.conf.shape(), priors.len()),
        ));
    }
    let (ld, cd) = (pred.loc.data(), pred.conf.data());
    Ok(par_map!(0..n, |b| decode_image(
        &ld[b * p * 4..(b + 1) * p * 4],
        &cd[b * p * k..(b + 1) * p * k],
        k,
        priors,
        opts
    )))
}
