use serde::{Deserialize, Serialize};

use super::DetectorConfig;
use crate::error::{Error, Result};

/// A default box in normalized center-size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub level: usize,
    /// (row, col) of the owning cell.
    pub cell: (usize, usize),
}

impl PriorBox {
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }
}

/// Default boxes for every scale, ordered by level, row, column, then box:
/// one box per declared aspect ratio `a` (`w = s·√a`, `h = s/√a`) followed
/// by a square box of side `√(s_k·s_{k+1})`. Widths and heights are clipped
/// to 1.
pub fn generate_priors(config: &DetectorConfig) -> Result<Vec<PriorBox>> {
    if config.anchors.is_empty() {
        return Err(Error::Config("anchors: empty layout".into()));
    }
    let mut priors = Vec::with_capacity(config.num_priors());
    for (level, a) in config.anchors.iter().enumerate() {
        if a.extent == 0 || a.aspect_ratios.is_empty() {
            return Err(Error::Config(format!("anchors[{level}]: empty level")));
        }
        let next = config.anchors.get(level + 1).map_or(config.scale_end, |n| n.scale);
        let extra = (a.scale * next).sqrt();
        let mut shapes: Vec<(f64, f64)> = a
            .aspect_ratios
            .iter()
            .map(|r| (a.scale * r.sqrt(), a.scale / r.sqrt()))
            .collect();
        shapes.push((extra, extra));
        let step = 1.0 / a.extent as f64;
        for row in 0..a.extent {
            for col in 0..a.extent {
                let cx = (col as f64 + 0.5) * step;
                let cy = (row as f64 + 0.5) * step;
                for &(w, h) in &shapes {
                    priors.push(PriorBox { cx, cy, w: w.min(1.0), h: h.min(1.0), level, cell: (row, col) });
                }
            }
        }
    }
    Ok(priors)
}
