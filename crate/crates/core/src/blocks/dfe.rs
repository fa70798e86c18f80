use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnReluConv, Forward, ParamBuilder};
use crate::tensor::{ConvSpec, Var};

/// Channel plan of one dual-path unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfeConfig {
    /// Width of the incoming residual state.
    pub in_residual: usize,
    /// Width of the incoming dense state (0 when there is none).
    pub in_dense: usize,
    /// Residual width `R` carried out of the unit.
    pub residual: usize,
    /// Dense growth `G` appended by the unit.
    pub growth: usize,
    /// Dense width produced by the projection shortcut, when there is one.
    pub proj_dense: usize,
    /// Bottleneck width.
    pub mid: usize,
    /// 1 or 2.
    pub stride: usize,
}

impl DfeConfig {
    /// A unit mapping a `width`-channel map to `out_width` channels with the
    /// default split `G = out_width / 8`, `R = out_width − G`, a bottleneck
    /// as wide as the output and a projection that carries no dense channels.
    pub fn entry(width: usize, out_width: usize, stride: usize) -> Self {
        let growth = (out_width / 8).max(1);
        Self {
            in_residual: width,
            in_dense: 0,
            residual: out_width - growth,
            growth,
            proj_dense: 0,
            mid: out_width.max(1),
            stride,
        }
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_residual != self.residual
    }

    pub fn out_dense(&self) -> usize {
        if self.has_projection() {
            self.proj_dense + self.growth
        } else {
            self.in_dense + self.growth
        }
    }

    pub fn out_width(&self) -> usize {
        self.residual + self.out_dense()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {}", self.stride)));
        }
        if self.residual == 0 || self.growth == 0 || self.mid == 0 || self.in_residual == 0 {
            return Err(Error::Config(format!("{name}: residual, growth and bottleneck widths must be positive")));
        }
        Ok(())
    }
}

/// Residual and dense state flowing between dual-path units.
#[derive(Clone, Copy, Debug)]
pub struct DfeState {
    pub residual: Var,
    pub dense: Option<Var>,
}

impl DfeState {
    /// The state as one map: `concat(residual, dense)`.
    pub fn merged(&self, f: &mut Forward<'_, '_>) -> Result<Var> {
        match self.dense {
            Some(d) => f.graph.concat_channels(self.residual, d),
            None => Ok(self.residual),
        }
    }
}

/// Deep feature enhancement: a shared bottleneck whose output splits into a
/// residual part (added to the, possibly projected, residual state) and a
/// dense part (concatenated onto the, possibly projected, dense state).
#[derive(Clone, Debug)]
pub struct DfeBlock {
    pub reduce: BnReluConv,
    pub conv: BnReluConv,
    pub expand: BnReluConv,
    pub projection: Option<BnReluConv>,
    pub config: DfeConfig,
}

impl DfeBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: DfeConfig) -> Result<Self> {
        cfg.validate(name)?;
        let input = cfg.in_residual + cfg.in_dense;
        let mut s = pb.scope(name);
        let projection = if cfg.has_projection() {
            Some(BnReluConv::new(
                &mut s,
                "projection",
                input,
                cfg.residual + cfg.proj_dense,
                1,
                ConvSpec::new(cfg.stride, 0, 1),
            )?)
        } else {
            None
        };
        Ok(Self {
            reduce: BnReluConv::without_bias(&mut s, "reduce", input, cfg.mid, 1, ConvSpec::unit())?,
            conv: BnReluConv::without_bias(&mut s, "conv", cfg.mid, cfg.mid, 3, ConvSpec::new(cfg.stride, 1, 1))?,
            expand: BnReluConv::new(&mut s, "expand", cfg.mid, cfg.residual + cfg.growth, 1, ConvSpec::unit())?,
            projection,
            config: cfg,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, state: DfeState) -> Result<DfeState> {
        let cfg = &self.config;
        let res_w = f.graph.value(state.residual).dims4("dfe_block")?.1;
        let dense_w = match state.dense {
            Some(d) => f.graph.value(d).dims4("dfe_block")?.1,
            None => 0,
        };
        if res_w != cfg.in_residual || dense_w != cfg.in_dense {
            return Err(Error::shape(
                "dfe_block",
                format!(
                    "state widths (residual {res_w}, dense {dense_w}) do not match declared ({}, {})",
                    cfg.in_residual, cfg.in_dense
                ),
            ));
        }
        let input = state.merged(f)?;
        let b = self.reduce.forward(f, input)?;
        let b = self.conv.forward(f, b)?;
        let b = self.expand.forward(f, b)?;
        let res_part = f.graph.slice_channels(b, 0, cfg.residual)?;
        let dense_part = f.graph.slice_channels(b, cfg.residual, cfg.growth)?;

        let (base_res, base_dense) = match &self.projection {
            Some(proj) => {
                let p = proj.forward(f, input)?;
                let pr = f.graph.slice_channels(p, 0, cfg.residual)?;
                let pd = if cfg.proj_dense > 0 {
                    Some(f.graph.slice_channels(p, cfg.residual, cfg.proj_dense)?)
                } else {
                    None
                };
                (pr, pd)
            }
            None => (state.residual, state.dense),
        };
        let residual = f.graph.add(base_res, res_part)?;
        let dense = match base_dense {
            Some(d) => f.graph.concat_channels(d, dense_part)?,
            None => dense_part,
        };
        Ok(DfeState { residual, dense: Some(dense) })
    }
}
