//! Box geometry, prior matching and the multibox loss.

mod boxes;
mod loss;
mod matching;

pub use boxes::{decode, encode, iou, BBox, Variances};
pub use loss::{multibox_loss, LossBreakdown, MultiboxLoss, NEG_POS_RATIO};
pub use matching::{match_priors, GroundTruth, MatchResult, IOU_THRESHOLD};
