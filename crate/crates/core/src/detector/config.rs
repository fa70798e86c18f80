use serde::{Deserialize, Serialize};

use crate::blocks::DfeConfig;
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// One backbone convolution (always Conv+BN+ReLU).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub padding: usize,
}

fn three() -> usize {
    3
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub const fn conv3(out: usize, stride: usize) -> Self {
        Self { out, kernel: 3, stride, padding: 1 }
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.padding, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraKind {
    /// Halves the extent (3×3, stride 2, padding 1). Becomes a dual-path
    /// unit when `use_dfe` is set, otherwise a 1×1 reduce plus a 3×3 conv.
    Down,
    /// A 1×1 reduce plus a 3×3 valid conv (extent − 2), always plain.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraSpec {
    pub width: usize,
    pub kind: ExtraKind,
}

/// Anchors of one prediction scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorLevel {
    /// Side of the (square) feature map.
    pub extent: usize,
    /// Anchor scale `s_k` relative to the image side.
    pub scale: f64,
    pub aspect_ratios: Vec<f64>,
}

impl AnchorLevel {
    /// One box per aspect ratio plus the intermediate-scale square box.
    pub fn boxes_per_cell(&self) -> usize {
        self.aspect_ratios.len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kernel: usize,
    pub padding: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self { kernel: 3, padding: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfeOptions {
    pub bottleneck_ratio: usize,
    pub se_reduction: usize,
}

impl Default for SfeOptions {
    fn default() -> Self {
        Self { bottleneck_ratio: 4, se_reduction: 16 }
    }
}

/// Architecture of a detector. The backbone output at index `tap` is the
/// stride-8 map and the last backbone output the stride-16 map; `extras`
/// continue from the stride-16 map. Prediction scales read, in order, the
/// (enhanced) stride-8 map, the (enhanced) stride-16 map and each extra.
///
/// Omitted fields take their values from [`DetectorConfig::mini`] with
/// three object classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Including background (class 0).
    pub num_classes: usize,
    pub backbone: Vec<LayerSpec>,
    pub tap: usize,
    pub extras: Vec<ExtraSpec>,
    pub anchors: Vec<AnchorLevel>,
    /// `s_{k+1}` for the last scale.
    pub scale_end: f64,
    #[serde(default)]
    pub head: HeadSpec,
    pub use_sfe: bool,
    pub use_dfe: bool,
    pub use_fam: bool,
    /// Lateral width inside each aggregation module.
    pub fam_lateral: usize,
    #[serde(default)]
    pub sfe: SfeOptions,
    /// Initial per-channel scale of the baseline L2 normalization.
    #[serde(default = "l2_scale")]
    pub l2norm_scale: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::mini(4)
    }
}

fn l2_scale() -> f64 {
    20.0
}

fn ratios(extra: bool) -> Vec<f64> {
    if extra {
        vec![1.0, 2.0, 0.5, 3.0, 1.0 / 3.0]
    } else {
        vec![1.0, 2.0, 0.5]
    }
}

impl DetectorConfig {
    /// The 300-pixel, six-scale ladder (38, 19, 10, 5, 3, 1) with 8732
    /// priors. Channel widths are the reference widths divided by
    /// `width_divisor`.
    pub fn full(width_divisor: usize, num_classes: usize) -> Self {
        let d = width_divisor.max(1);
        let w = |c: usize| (c / d).max(1);
        let backbone = vec![
            LayerSpec::conv3(w(64), 1),
            LayerSpec::conv3(w(64), 2),
            LayerSpec::conv3(w(128), 1),
            LayerSpec::conv3(w(128), 2),
            LayerSpec::conv3(w(256), 1),
            LayerSpec::conv3(w(256), 2),
            LayerSpec::conv3(w(512), 1),
            LayerSpec::conv3(w(512), 1),
            LayerSpec::conv3(w(1024), 2),
            LayerSpec::conv3(w(1024), 1),
        ];
        let scales = [0.1, 0.2, 0.37, 0.54, 0.71, 0.88];
        let extents = [38, 19, 10, 5, 3, 1];
        let anchors = extents
            .iter()
            .zip(scales)
            .enumerate()
            .map(|(i, (&extent, scale))| AnchorLevel { extent, scale, aspect_ratios: ratios((1..=3).contains(&i)) })
            .collect();
        Self {
            input_size: 300,
            in_channels: 3,
            num_classes,
            backbone,
            tap: 7,
            extras: vec![
                ExtraSpec { width: w(512), kind: ExtraKind::Down },
                ExtraSpec { width: w(256), kind: ExtraKind::Down },
                ExtraSpec { width: w(256), kind: ExtraKind::Down },
                ExtraSpec { width: w(256), kind: ExtraKind::Valid },
            ],
            anchors,
            scale_end: 1.05,
            head: HeadSpec::default(),
            use_sfe: true,
            use_dfe: true,
            use_fam: true,
            fam_lateral: w(256),
            sfe: SfeOptions::default(),
            l2norm_scale: l2_scale(),
        }
    }

    /// The 96-pixel grayscale three-scale (12, 6, 3) configuration used for
    /// CPU training.
    pub fn mini(num_classes: usize) -> Self {
        Self {
            input_size: 96,
            in_channels: 1,
            num_classes,
            backbone: vec![
                LayerSpec::conv3(8, 1),
                LayerSpec::conv3(16, 2),
                LayerSpec::conv3(16, 1),
                LayerSpec::conv3(24, 2),
                LayerSpec::conv3(24, 1),
                LayerSpec::conv3(32, 2),
                LayerSpec::conv3(32, 1),
                LayerSpec::conv3(32, 1),
                LayerSpec::conv3(48, 2),
                LayerSpec::conv3(48, 1),
            ],
            tap: 7,
            extras: vec![ExtraSpec { width: 48, kind: ExtraKind::Down }],
            anchors: vec![
                AnchorLevel { extent: 12, scale: 0.15, aspect_ratios: ratios(false) },
                AnchorLevel { extent: 6, scale: 0.3, aspect_ratios: ratios(false) },
                AnchorLevel { extent: 3, scale: 0.55, aspect_ratios: ratios(false) },
            ],
            scale_end: 0.8,
            head: HeadSpec::default(),
            use_sfe: true,
            use_dfe: true,
            use_fam: true,
            fam_lateral: 16,
            sfe: SfeOptions::default(),
            l2norm_scale: l2_scale(),
        }
    }

    pub fn with_toggles(mut self, use_sfe: bool, use_dfe: bool, use_fam: bool) -> Self {
        self.use_sfe = use_sfe;
        self.use_dfe = use_dfe;
        self.use_fam = use_fam;
        self
    }

    pub fn stride8_width(&self) -> usize {
        self.backbone[self.tap].out
    }

    pub fn stride16_width(&self) -> usize {
        self.backbone.last().map_or(0, |l| l.out)
    }

    pub fn num_priors(&self) -> usize {
        self.anchors.iter().map(|a| a.extent * a.extent * a.boxes_per_cell()).sum()
    }

    /// Channel plans of the dual-path extras, chained from the stride-16 map.
    pub(crate) fn dfe_plans(&self) -> Vec<DfeConfig> {
        let mut plans = Vec::new();
        let mut res = self.stride16_width();
        let mut dense = 0;
        for e in self.extras.iter().filter(|e| e.kind == ExtraKind::Down) {
            let mut cfg = DfeConfig::entry(res, e.width, 2);
            cfg.in_dense = dense;
            res = cfg.residual;
            dense = cfg.out_dense();
            plans.push(cfg);
        }
        plans
    }

    /// Spatial extents of every prediction scale as implied by the layers.
    pub fn feature_extents(&self) -> Result<Vec<usize>> {
        self.validate()?;
        Ok(self.anchors.iter().map(|a| a.extent).collect())
    }

    /// Checks every edge of the channel and extent plumbing.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || self.in_channels == 0 {
            return bad("input: size and channel count must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes: {} leaves no foreground class", self.num_classes));
        }
        if self.backbone.is_empty() {
            return bad("backbone: no layers".into());
        }
        if self.tap + 1 >= self.backbone.len() {
            return bad(format!("backbone: tap {} must precede the last layer", self.tap));
        }

        let mut extent = self.input_size;
        let mut stride = 1;
        let mut tap_extent = 0;
        for (i, l) in self.backbone.iter().enumerate() {
            if l.out == 0 || l.kernel == 0 || l.stride == 0 {
                return bad(format!("backbone[{i}]: width, kernel and stride must be positive"));
            }
            extent = match l.spec().out_extent(extent, l.kernel) {
                Some(e) => e,
                None => return bad(format!("backbone[{i}]: kernel {} does not fit a {extent}px map", l.kernel)),
            };
            stride *= l.stride;
            if i == self.tap {
                if stride != 8 {
                    return bad(format!("backbone[{i}] (tap): cumulative stride {stride}, expected 8"));
                }
                tap_extent = extent;
            }
        }
        if stride != 16 {
            return bad(format!("backbone[{}] (stride-16 map): cumulative stride {stride}, expected 16", self.backbone.len() - 1));
        }
        if tap_extent != 2 * extent {
            return bad(format!(
                "backbone[{}] -> backbone[{}]: stride-8 extent {tap_extent} is not twice the stride-16 extent {extent}",
                self.tap,
                self.backbone.len() - 1
            ));
        }

        let mut extents = vec![tap_extent, extent];
        for (i, e) in self.extras.iter().enumerate() {
            if e.width == 0 {
                return bad(format!("extras[{i}]: width must be positive"));
            }
            let (kernel, spec) = match e.kind {
                ExtraKind::Down => (3, ConvSpec::new(2, 1, 1)),
                ExtraKind::Valid => (3, ConvSpec::new(1, 0, 1)),
            };
            extent = match spec.out_extent(extent, kernel) {
                Some(x) => x,
                None => return bad(format!("extras[{i}]: a {extent}px map is too small for a {:?} layer", e.kind)),
            };
            extents.push(extent);
        }
        if self.use_dfe {
            let mut down = 0;
            for (i, e) in self.extras.iter().enumerate() {
                if e.kind == ExtraKind::Down {
                    if e.width < 8 {
                        return bad(format!("extras[{i}]: width {} is too narrow for a dual-path split", e.width));
                    }
                    down += 1;
                } else if down == 0 {
                    return bad(format!("extras[{i}]: a valid layer must follow a dual-path unit"));
                }
            }
        }

        if self.anchors.is_empty() {
            return bad("anchors: empty layout".into());
        }
        if self.anchors.len() != extents.len() {
            return bad(format!(
                "anchors: {} scales declared but the network yields {} maps (stride 8, stride 16 and {} extras)",
                self.anchors.len(),
                extents.len(),
                self.extras.len()
            ));
        }
        for (k, (a, &e)) in self.anchors.iter().zip(&extents).enumerate() {
            let src = match k {
                0 => format!("backbone[{}]", self.tap),
                1 => format!("backbone[{}]", self.backbone.len() - 1),
                _ => format!("extras[{}]", k - 2),
            };
            if a.extent != e {
                return bad(format!("{src} -> anchors[{k}]: map extent {e}, declared extent {}", a.extent));
            }
            if !(a.scale > 0.0 && a.scale.is_finite()) {
                return bad(format!("anchors[{k}]: scale must be positive"));
            }
            if a.aspect_ratios.is_empty() || a.aspect_ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return bad(format!("anchors[{k}]: aspect ratios must be a non-empty list of positive numbers"));
            }
        }
        if !(self.scale_end > 0.0 && self.scale_end.is_finite()) {
            return bad("scale_end: must be positive".into());
        }
        if self.head.kernel == 0 || self.head.kernel > 2 * self.head.padding + 1 {
            return bad(format!(
                "head: kernel {} with padding {} does not preserve the map extent",
                self.head.kernel, self.head.padding
            ));
        }

        if self.use_fam && self.fam_lateral == 0 {
            return bad("fam_lateral: must be positive".into());
        }
        if self.use_sfe {
            let o = self.sfe;
            for (name, c) in [("stride-8", self.stride8_width()), ("stride-16", self.stride16_width())] {
                if o.bottleneck_ratio == 0 || c % o.bottleneck_ratio != 0 {
                    return bad(format!("sfe ({name} map): width {c} not divisible by bottleneck ratio {}", o.bottleneck_ratio));
                }
                if o.se_reduction == 0 || c % o.se_reduction != 0 {
                    return bad(format!("sfe ({name} map): width {c} not divisible by SE reduction {}", o.se_reduction));
                }
            }
        }
        Ok(())
    }
}
