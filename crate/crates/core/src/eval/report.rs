use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ap::{match_class, ClassDetection, ClassGt, Interpolation, PrCurve};
use super::Detection;
use crate::error::{Error, Result};
use crate::match_loss::{BBox, GroundTruth};

/// Ground-truth size ranges in pixels² at the canonical image size:
/// small `< 32²`, medium `[32², 96²)`, large `≥ 96²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn contains(self, area_px: f64) -> bool {
        const S: f64 = 32.0 * 32.0;
        const L: f64 = 96.0 * 96.0;
        match self {
            SizeBucket::Small => area_px < S,
            SizeBucket::Medium => (S..L).contains(&area_px),
            SizeBucket::Large => area_px >= L,
        }
    }

    pub fn of(b: &BBox, canonical_size: f64) -> Self {
        let a = b.area() * canonical_size * canonical_size;
        Self::ALL.into_iter().find(|s| s.contains(a)).unwrap_or(SizeBucket::Large)
    }
}

/// Non-difficult ground truths per size bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    /// Non-difficult ground truths.
    pub num_gt: usize,
    pub num_detections: usize,
    /// All-point AP at IoU 0.5.
    pub ap: f64,
    /// Eleven-point AP at IoU 0.5.
    pub ap_eleven_point: f64,
    /// Curve at IoU 0.5.
    #[serde(skip)]
    pub pr_curve: PrCurve,
}

/// Dataset-level accuracy. `map` and the per-class values use the VOC
/// protocol (IoU 0.5, all-point); `ap*` use the 101-point recall grid, with
/// `ap` and the size-bucket values averaged over IoU 0.50:0.05:0.95.
/// Averages run over classes that have at least one relevant ground truth;
/// with none, the value is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// No non-difficult ground truth at all; every metric is 0.
    pub empty: bool,
    pub num_images: usize,
    pub canonical_size: f64,
    pub map: f64,
    pub map_eleven_point: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub bucket_counts: BucketCounts,
    pub classes: Vec<ClassReport>,
}

fn coco_thresholds() -> impl Iterator<Item = f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores per-image detections against per-image ground truths.
/// `num_classes` includes background; class ids must lie in
/// `1..num_classes`.
pub fn evaluate(
    predictions: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruth>],
    num_classes: usize,
    canonical_size: f64,
) -> Result<EvalReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} prediction lists for {} images", predictions.len(), ground_truths.len()),
        ));
    }
    let check = |c: usize| if c == 0 || c >= num_classes { Err(Error::UnknownClass(c)) } else { Ok(()) };
    for d in predictions.iter().flatten() {
        check(d.class_id)?;
    }
    for g in ground_truths.iter().flatten() {
        check(g.class_id)?;
    }

    let px = |b: &BBox| b.area() * canonical_size * canonical_size;
    let mut bucket_counts = BucketCounts::default();
    for g in ground_truths.iter().flatten().filter(|g| !g.difficult) {
        match SizeBucket::of(&g.bbox, canonical_size) {
            SizeBucket::Small => bucket_counts.small += 1,
            SizeBucket::Medium => bucket_counts.medium += 1,
            SizeBucket::Large => bucket_counts.large += 1,
        }
    }

    let mut classes = Vec::new();
    let (mut voc, mut voc11, mut coco, mut coco50, mut coco75) = (vec![], vec![], vec![], vec![], vec![]);
    let mut buckets: [Vec<f64>; 3] = Default::default();
    for class in 1..num_classes {
        let dets: Vec<ClassDetection> = predictions
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter().filter(|d| d.class_id == class).map(move |d| ClassDetection { image, score: d.score, bbox: d.bbox })
            })
            .collect();
        let gts: Vec<(ClassGt, f64)> = ground_truths
            .iter()
            .enumerate()
            .flat_map(|(image, gs)| {
                gs.iter()
                    .filter(|g| g.class_id == class)
                    .map(move |g| (ClassGt { image, bbox: g.bbox, ignore: g.difficult }, px(&g.bbox)))
            })
            .collect();
        let plain: Vec<ClassGt> = gts.iter().map(|g| g.0).collect();

        let curve = match_class(&dets, &plain, 0.5, &|_| true);
        let report = ClassReport {
            class_id: class,
            num_gt: curve.num_gt,
            num_detections: dets.len(),
            ap: curve.average_precision(Interpolation::AllPoint),
            ap_eleven_point: curve.average_precision(Interpolation::ElevenPoint),
            pr_curve: curve,
        };
        if report.num_gt > 0 {
            voc.push(report.ap);
            voc11.push(report.ap_eleven_point);
            let per_t: Vec<f64> = coco_thresholds()
                .map(|t| match_class(&dets, &plain, t, &|_| true).average_precision(Interpolation::Coco101))
                .collect();
            coco.push(mean(&per_t));
            coco50.push(per_t[0]);
            coco75.push(per_t[5]);
        }
        for (k, bucket) in SizeBucket::ALL.into_iter().enumerate() {
            let in_bucket: Vec<ClassGt> = gts
                .iter()
                .map(|(g, a)| ClassGt { ignore: g.ignore || !bucket.contains(*a), ..*g })
                .collect();
            if in_bucket.iter().all(|g| g.ignore) {
                continue;
            }
            let fp_filter = |b: &BBox| bucket.contains(px(b));
            let per_t: Vec<f64> = coco_thresholds()
                .map(|t| match_class(&dets, &in_bucket, t, &fp_filter).average_precision(Interpolation::Coco101))
                .collect();
            buckets[k].push(mean(&per_t));
        }
        classes.push(report);
    }

    Ok(EvalReport {
        empty: voc.is_empty(),
        num_images: ground_truths.len(),
        canonical_size,
        map: mean(&voc),
        map_eleven_point: mean(&voc11),
        ap: mean(&coco),
        ap50: mean(&coco50),
        ap75: mean(&coco75),
        ap_small: mean(&buckets[0]),
        ap_medium: mean(&buckets[1]),
        ap_large: mean(&buckets[2]),
        bucket_counts,
        classes,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.json` and one `pr_class<id>.csv` (score, precision,
    /// recall) per class into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        for c in &self.classes {
            let mut csv = String::from("score,precision,recall\n");
            let pr = &c.pr_curve;
            for i in 0..pr.scores.len() {
                let _ = writeln!(csv, "{},{},{}", pr.scores[i], pr.precision[i], pr.recall[i]);
            }
            let path = dir.join(format!("pr_class{}.csv", c.class_id));
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
