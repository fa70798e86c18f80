use serde::{Deserialize, Serialize};

use super::{encode, BBox, Variances};
use crate::detector::PriorBox;
use crate::error::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;

/// An annotated object with a normalized box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// 1-based; 0 is background.
    pub class_id: usize,
    pub bbox: BBox,
    pub difficult: bool,
}

impl GroundTruth {
    pub fn new(class_id: usize, bbox: BBox, difficult: bool) -> Result<Self> {
        bbox.check()?;
        let inside = [bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax].iter().all(|v| (0.0..=1.0).contains(v));
        if !inside {
            return Err(Error::InvalidBox(format!("outside the unit square: {bbox:?}")));
        }
        if class_id == 0 {
            return Err(Error::UnknownClass(0));
        }
        Ok(Self { class_id, bbox, difficult })
    }
}

/// Per-prior training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Class per prior; 0 is background.
    pub labels: Vec<usize>,
    /// Encoded offsets per prior (zeros for background).
    pub targets: Vec<[f64; 4]>,
    /// Index of the matched ground truth per prior.
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn num_priors(&self) -> usize {
        self.labels.len()
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }
}

/// Assigns ground truths to priors.
///
/// First every ground truth claims a prior: repeatedly the highest-IoU pair
/// among unclaimed ground truths and unclaimed priors is fixed (ties go to
/// the lower prior index, then the lower ground-truth index), so two ground
/// truths never compete for the same prior. Every remaining prior whose best
/// IoU (ties to the lower ground-truth index) exceeds `threshold` is then
/// positive for that ground truth. Everything else is background.
pub fn match_priors(priors: &[PriorBox], gts: &[GroundTruth], threshold: f64, v: Variances) -> Result<MatchResult> {
    let p = priors.len();
    let mut labels = vec![0; p];
    let mut targets = vec![[0.0; 4]; p];
    let mut matched_gt = vec![None; p];
    if gts.is_empty() {
        return Ok(MatchResult { labels, targets, matched_gt });
    }
    let pboxes: Vec<BBox> = priors.iter().map(BBox::from).collect();
    let g = gts.len();
    let overlaps: Vec<f64> = pboxes
        .iter()
        .flat_map(|pb| gts.iter().map(move |gt| pb.iou_unchecked(&gt.bbox)))
        .collect();

    let mut gt_done = vec![false; g];
    for _ in 0..g.min(p) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &claimed) in matched_gt.iter().enumerate() {
            if claimed.is_some() {
                continue;
            }
            for j in (0..g).filter(|&j| !gt_done[j]) {
                let o = overlaps[i * g + j];
                if best.is_none_or(|(b, _, _)| o > b) {
                    best = Some((o, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        gt_done[j] = true;
        matched_gt[i] = Some(j);
    }

    for i in 0..p {
        if matched_gt[i].is_some() {
            continue;
        }
        let row = &overlaps[i * g..(i + 1) * g];
        let mut bj = 0;
        for j in 1..g {
            if row[j] > row[bj] {
                bj = j;
            }
        }
        if row[bj] > threshold {
            matched_gt[i] = Some(bj);
        }
    }

    for i in 0..p {
        if let Some(j) = matched_gt[i] {
            labels[i] = gts[j].class_id;
            targets[i] = encode(&gts[j].bbox, &priors[i], v)?;
        }
    }
    Ok(MatchResult { labels, targets, matched_gt })
}
