use serde::{Deserialize, Serialize};

use super::SaBlock;
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Forward, ParamBuilder};
use crate::tensor::{ConvSpec, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamVariant {
    /// Output at the stride-8 (shallow) resolution.
    V1,
    /// Output at the stride-16 (deep) resolution.
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamConfig {
    pub variant: FamVariant,
    pub shallow_channels: usize,
    pub deep_channels: usize,
    /// Shared width of both lateral paths.
    pub lateral: usize,
    pub out_channels: usize,
    /// Extent (height, width) of the shallow map; the deep map is half of it.
    pub shallow_extent: (usize, usize),
}

/// Feature aggregation module. Both variants bring the two inputs to a
/// common width with lateral 1×1 Conv+BN+ReLU, match resolutions, gate the
/// shallow path with spatial attention computed from the deep path, then
/// fuse `concat(gated shallow, deep)` with a 3×3 Conv+BN+ReLU.
///
/// V1 upsamples the deep path 2× (nearest); V2 downsamples the shallow path
/// with a stride-2 3×3 Conv+BN+ReLU.
#[derive(Clone, Debug)]
pub struct Fam {
    pub lateral_shallow: ConvBnRelu,
    pub lateral_deep: ConvBnRelu,
    /// V2 only.
    pub downsample: Option<ConvBnRelu>,
    pub attention: SaBlock,
    pub fuse: ConvBnRelu,
    pub config: FamConfig,
}

impl Fam {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: FamConfig) -> Result<Self> {
        let (h, w) = cfg.shallow_extent;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "{name}: shallow extent {h}x{w} must be twice the deep extent"
            )));
        }
        let (ah, aw) = match cfg.variant {
            FamVariant::V1 => (h, w),
            FamVariant::V2 => (h / 2, w / 2),
        };
        let l = cfg.lateral;
        let mut s = pb.scope(name);
        Ok(Self {
            lateral_shallow: ConvBnRelu::new(&mut s, "lateral_shallow", cfg.shallow_channels, l, 1, ConvSpec::unit())?,
            lateral_deep: ConvBnRelu::new(&mut s, "lateral_deep", cfg.deep_channels, l, 1, ConvSpec::unit())?,
            downsample: match cfg.variant {
                FamVariant::V1 => None,
                FamVariant::V2 => Some(ConvBnRelu::new(&mut s, "downsample", l, l, 3, ConvSpec::new(2, 1, 1))?),
            },
            attention: SaBlock::new(&mut s, "attention", l, ah, aw)?,
            fuse: ConvBnRelu::new(&mut s, "fuse", 2 * l, cfg.out_channels, 3, ConvSpec::new(1, 1, 1))?,
            config: cfg,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, shallow: Var, deep: Var) -> Result<Var> {
        let (n, cs, hs, ws) = f.graph.value(shallow).dims4("fam")?;
        let (nd, cd, hd, wd) = f.graph.value(deep).dims4("fam")?;
        if n != nd || hs != 2 * hd || ws != 2 * wd {
            return Err(Error::shape(
                "fam",
                format!(
                    "shallow {:?} must be exactly twice the resolution of deep {:?}",
                    f.graph.shape(shallow),
                    f.graph.shape(deep)
                ),
            ));
        }
        if cs != self.config.shallow_channels || cd != self.config.deep_channels {
            return Err(Error::shape(
                "fam",
                format!(
                    "channels ({cs}, {cd}) do not match declared ({}, {})",
                    self.config.shallow_channels, self.config.deep_channels
                ),
            ));
        }
        let a = self.lateral_shallow.forward(f, shallow)?;
        let b = self.lateral_deep.forward(f, deep)?;
        let (gate_src, semantic, target) = match &self.downsample {
            None => {
                let up = f.graph.upsample_nearest2x(b)?;
                (up, up, a)
            }
            Some(down) => {
                let a_down = down.forward(f, a)?;
                (b, b, a_down)
            }
        };
        let z = self.attention.forward(f, gate_src, target)?;
        let cat = f.graph.concat_channels(z, semantic)?;
        self.fuse.forward(f, cat)
    }
}
