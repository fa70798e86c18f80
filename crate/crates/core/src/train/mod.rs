//! Learning-rate schedule, SGD, checkpoints, the training loop and the
//! ablation driver.

mod ablation;
mod checkpoint;
mod schedule;
mod sgd;
mod trainer;

pub use ablation::{run_ablation, AblationRow, AblationTable, Variant, VARIANTS};
pub use checkpoint::{config_fingerprint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::{lr_at, TrainConfig};
pub use sgd::Sgd;
pub use trainer::{
    evaluate_model, overfit, read_metrics, train, train_step, MetricRecord, TrainOptions, TrainOutcome,
    CHECKPOINT_FILE, METRICS_FILE,
};
