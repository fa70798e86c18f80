use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::match_loss::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall change.
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    ElevenPoint,
    /// Mean envelope precision at recall 0, 0.01, …, 1.
    Coco101,
}

/// A detection of the class under evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// A ground truth of the class under evaluation. Ignored ground truths
/// (difficult, or outside a size bucket) are neither required nor
/// penalized: detections matched to them are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGt {
    pub image: usize,
    pub bbox: BBox,
    pub ignore: bool,
}

/// Precision and recall after each counted detection, in score order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub scores: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Non-ignored ground truths.
    pub num_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Sorts by descending score; ties fall back to image and box coordinates
/// so the order does not depend on the input order.
pub(crate) fn sort_detections(dets: &[ClassDetection]) -> Vec<ClassDetection> {
    let mut d = dets.to_vec();
    d.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.bbox.xmin.total_cmp(&b.bbox.xmin))
            .then(a.bbox.ymin.total_cmp(&b.bbox.ymin))
            .then(a.bbox.xmax.total_cmp(&b.bbox.xmax))
            .then(a.bbox.ymax.total_cmp(&b.bbox.ymax))
    });
    d
}

/// Greedy matching in score order. Each detection takes the ground truth
/// of its image with the highest IoU (ties to the lower index). At
/// `IoU ≥ iou_threshold` it is dropped if that ground truth is ignored, a
/// true positive if the ground truth is still unmatched, otherwise a false
/// positive. Unmatched detections are false positives when `counts_as_fp`
/// accepts their box and dropped otherwise.
pub(crate) fn match_class(
    dets: &[ClassDetection],
    gts: &[ClassGt],
    iou_threshold: f64,
    counts_as_fp: &dyn Fn(&BBox) -> bool,
) -> PrCurve {
    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(j);
    }
    let mut matched = vec![false; gts.len()];
    let mut curve = PrCurve { num_gt: gts.iter().filter(|g| !g.ignore).count(), ..Default::default() };
    let (mut tp, mut fp) = (0usize, 0usize);
    for d in sort_detections(dets) {
        let mut best: Option<(f64, usize)> = None;
        for &j in by_image.get(&d.image).map_or(&[][..], |v| v.as_slice()) {
            let o = d.bbox.iou_unchecked(&gts[j].bbox);
            if best.is_none_or(|(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        match best {
            Some((o, j)) if o >= iou_threshold => {
                if gts[j].ignore {
                    continue;
                }
                if matched[j] {
                    if !counts_as_fp(&d.bbox) {
                        continue;
                    }
                    fp += 1;
                } else {
                    matched[j] = true;
                    tp += 1;
                }
            }
            _ => {
                if !counts_as_fp(&d.bbox) {
                    continue;
                }
                fp += 1;
            }
        }
        curve.scores.push(d.score);
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(if curve.num_gt > 0 { tp as f64 / curve.num_gt as f64 } else { 0.0 });
    }
    curve.true_positives = tp;
    curve.false_positives = fp;
    curve
}

/// The precision-recall curve of one class at one IoU threshold.
pub fn pr_curve(dets: &[ClassDetection], gts: &[ClassGt], iou_threshold: f64) -> PrCurve {
    match_class(dets, gts, iou_threshold, &|_| true)
}

impl PrCurve {
    /// Zero when there is nothing to find.
    pub fn average_precision(&self, interp: Interpolation) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        // precision envelope: max precision at any recall ≥ this point
        let mut env = self.precision.clone();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        let at_recall = |t: f64| {
            let j = self.recall.partition_point(|&r| r < t);
            env.get(j).copied().unwrap_or(0.0)
        };
        match interp {
            Interpolation::AllPoint => {
                let mut ap = 0.0;
                let mut prev = 0.0;
                for (i, &r) in self.recall.iter().enumerate() {
                    if r > prev {
                        ap += (r - prev) * env[i];
                        prev = r;
                    }
                }
                ap
            }
            Interpolation::ElevenPoint => (0..=10).map(|k| at_recall(k as f64 / 10.0)).sum::<f64>() / 11.0,
            Interpolation::Coco101 => (0..=100).map(|k| at_recall(k as f64 / 100.0)).sum::<f64>() / 101.0,
        }
    }
}

/// Average precision of one class.
pub fn average_precision(dets: &[ClassDetection], gts: &[ClassGt], iou_threshold: f64, interp: Interpolation) -> f64 {
    pr_curve(dets, gts, iou_threshold).average_precision(interp)
}
