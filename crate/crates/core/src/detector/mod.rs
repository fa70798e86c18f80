//! Detector configuration, default boxes and the detection graph.

mod config;
mod model;
mod priors;

pub use config::{AnchorLevel, DetectorConfig, ExtraKind, ExtraSpec, HeadSpec, LayerSpec, SfeOptions};
pub use model::{build_detector, Detector, HeadOutput, Predictions};
pub use priors::{generate_priors, PriorBox};
