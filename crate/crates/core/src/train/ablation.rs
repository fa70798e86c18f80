use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, train, TrainConfig, TrainOptions};
use crate::data::Sample;
use crate::detector::{build_detector, DetectorConfig};
use crate::error::Result;
use crate::eval::DecodeOptions;

/// One ablation variant: its toggles and the published VOC2007 mAP (%) of
/// the 300-pixel model, kept for context only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub use_sfe: bool,
    pub use_dfe: bool,
    pub use_fam: bool,
    pub reference_map: f64,
}

pub const VARIANTS: [Variant; 4] = [
    Variant { name: "baseline", use_sfe: false, use_dfe: false, use_fam: false, reference_map: 77.5 },
    Variant { name: "+SFE", use_sfe: true, use_dfe: false, use_fam: false, reference_map: 79.0 },
    Variant { name: "+SFE+DFE", use_sfe: true, use_dfe: true, use_fam: false, reference_map: 79.5 },
    Variant { name: "+SFE+DFE+FAM", use_sfe: true, use_dfe: true, use_fam: true, reference_map: 80.1 },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_sfe: bool,
    pub use_dfe: bool,
    pub use_fam: bool,
    pub params: usize,
    /// Held-out mAP in [0, 1] after training.
    pub map: f64,
    /// Published mAP (%) of the same variant at full scale.
    pub reference_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub epochs: usize,
    /// mAP of the untrained full variant.
    pub random_init_map: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// A fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>4} {:>4} {:>4} {:>10} {:>8} {:>10}", "variant", "SFE", "DFE", "FAM", "params", "mAP", "reference");
        for r in &self.rows {
            let mark = |b: bool| if b { "x" } else { "" };
            let _ = writeln!(
                s,
                "{:<14} {:>4} {:>4} {:>4} {:>10} {:>8.4} {:>10.1}",
                r.variant,
                mark(r.use_sfe),
                mark(r.use_dfe),
                mark(r.use_fam),
                r.params,
                r.map,
                r.reference_map
            );
        }
        let _ = writeln!(s, "random init (full variant): mAP {:.4}", self.random_init_map);
        s
    }
}

/// Trains the four variants with identical seed and schedule. Each
/// variant's log and checkpoint go to `out_dir/<index>-<name>` when given.
pub fn run_ablation(
    detector: &DetectorConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    eval_set: &[Sample],
    decode: &DecodeOptions,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let full = TrainConfig { use_sfe: true, use_dfe: true, use_fam: true, ..cfg.clone() };
    let (det, store) = build_detector(&full.apply_toggles(detector), cfg.seed)?;
    let random_init_map = evaluate_model(&det, &store, eval_set, decode)?.map;

    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (i, v) in VARIANTS.iter().enumerate() {
        let vcfg = TrainConfig { use_sfe: v.use_sfe, use_dfe: v.use_dfe, use_fam: v.use_fam, ..cfg.clone() };
        let dir = out_dir.map(|d| d.join(format!("{i}-{}", v.name.trim_start_matches('+').replace('+', "-").to_lowercase())));
        let opts = TrainOptions { out_dir: dir, decode: *decode, ..Default::default() };
        let outcome = train(detector, &vcfg, train_set, eval_set, opts)?;
        rows.push(AblationRow {
            variant: v.name.to_string(),
            use_sfe: v.use_sfe,
            use_dfe: v.use_dfe,
            use_fam: v.use_fam,
            params: outcome.store.num_trainable(),
            map: outcome.report.map,
            reference_map: v.reference_map,
        });
    }
    Ok(AblationTable { seed: cfg.seed, epochs: cfg.total_epochs, random_init_map, rows })
}
