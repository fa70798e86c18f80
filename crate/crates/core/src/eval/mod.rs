//! Detection decoding, non-maximum suppression and AP/mAP evaluation.

mod ap;
mod decode;
mod predictions;
mod report;

pub use ap::{average_precision, pr_curve, ClassDetection, ClassGt, Interpolation, PrCurve};
pub use decode::{decode_detections, nms, DecodeOptions, Detection};
pub use predictions::{ImagePredictions, PredictionSet};
pub use report::{evaluate, BucketCounts, ClassReport, EvalReport, SizeBucket};
