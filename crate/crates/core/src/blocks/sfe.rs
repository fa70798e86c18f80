use serde::{Deserialize, Serialize};

use super::SeBlock;
use crate::error::{Error, Result};
use crate::nn::{BnReluConv, Forward, ParamBuilder};
use crate::tensor::{ConvSpec, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfeConfig {
    pub channels: usize,
    /// Bottleneck width is `channels / bottleneck_ratio`.
    pub bottleneck_ratio: usize,
    pub se_reduction: usize,
}

impl SfeConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, bottleneck_ratio: 4, se_reduction: 16 }
    }
}

/// Pre-activation bottleneck with an identity shortcut:
/// `x + [se](expand(middle(reduce(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub reduce: BnReluConv,
    /// 3×3, dilation 2, padding 2.
    pub middle: BnReluConv,
    pub expand: BnReluConv,
    pub se: Option<SeBlock>,
}

impl ResidualUnit {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &SfeConfig, with_se: bool) -> Result<Self> {
        let c = cfg.channels;
        let mid = c / cfg.bottleneck_ratio;
        let mut s = pb.scope(name);
        Ok(Self {
            reduce: BnReluConv::without_bias(&mut s, "reduce", c, mid, 1, ConvSpec::unit())?,
            middle: BnReluConv::without_bias(&mut s, "middle", mid, mid, 3, ConvSpec::new(1, 2, 2))?,
            expand: BnReluConv::new(&mut s, "expand", mid, c, 1, ConvSpec::unit())?,
            se: if with_se { Some(SeBlock::new(&mut s, "se", c, cfg.se_reduction)?) } else { None },
        })
    }

    /// The residual branch alone.
    pub fn branch(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(f, x)?;
        let y = self.middle.forward(f, y)?;
        let y = self.expand.forward(f, y)?;
        match &self.se {
            Some(se) => se.forward(f, y),
            None => Ok(y),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let r = self.branch(f, x)?;
        f.graph.add(x, r)
    }
}

/// Shallow feature enhancement: two residual units, SE in the second.
#[derive(Clone, Debug)]
pub struct SfeBlock {
    pub first: ResidualUnit,
    pub second: ResidualUnit,
    pub config: SfeConfig,
}

impl SfeBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: SfeConfig) -> Result<Self> {
        let c = cfg.channels;
        if cfg.bottleneck_ratio == 0 || !c.is_multiple_of(cfg.bottleneck_ratio) || c < cfg.bottleneck_ratio {
            return Err(Error::Config(format!(
                "{name}: bottleneck ratio {} does not divide {c} channels",
                cfg.bottleneck_ratio
            )));
        }
        let mut s = pb.scope(name);
        Ok(Self {
            first: ResidualUnit::new(&mut s, "unit1", &cfg, false)?,
            second: ResidualUnit::new(&mut s, "unit2", &cfg, true)?,
            config: cfg,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let (_, c, _, _) = f.graph.value(x).dims4("sfe_block")?;
        if c != self.config.channels {
            return Err(Error::shape(
                "sfe_block",
                format!("input {:?} but block expects {} channels", f.graph.shape(x), self.config.channels),
            ));
        }
        let y = self.first.forward(f, x)?;
        self.second.forward(f, y)
    }
}
