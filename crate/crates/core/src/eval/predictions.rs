use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, Detection, EvalReport};
use crate::error::{Error, Result};
use crate::match_loss::GroundTruth;

/// Detections and ground truth of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePredictions {
    #[serde(default)]
    pub ground_truths: Vec<GroundTruth>,
    #[serde(default)]
    pub detections: Vec<Detection>,
}

/// A self-contained set of precomputed detections, evaluable without a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSet {
    /// Including background.
    pub num_classes: usize,
    /// Image side in pixels used for the size buckets.
    pub canonical_size: f64,
    pub images: Vec<ImagePredictions>,
}

impl PredictionSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        for g in self.images.iter().flat_map(|i| &i.ground_truths) {
            GroundTruth::new(g.class_id, g.bbox, g.difficult)?;
        }
        let preds: Vec<_> = self.images.iter().map(|i| i.detections.clone()).collect();
        let gts: Vec<_> = self.images.iter().map(|i| i.ground_truths.clone()).collect();
        evaluate(&preds, &gts, self.num_classes, self.canonical_size)
    }
}
