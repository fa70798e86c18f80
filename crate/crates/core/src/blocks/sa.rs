use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, Forward, Init, Linear, ParamBuilder};
use crate::tensor::{ConvSpec, Var};

/// Spatial attention gate operating at one fixed resolution.
#[derive(Clone, Debug)]
pub struct SaBlock {
    /// 1×1 Conv+BN+ReLU, `channels → 1`.
    pub collapse: ConvBnRelu,
    /// `(H·W) × (H·W)` fully connected layer over spatial positions.
    pub fc: Linear,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SaBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "{name}: spatial attention needs positive extents, got {channels}x{height}x{width}"
            )));
        }
        let mut s = pb.scope(name);
        let hw = height * width;
        Ok(Self {
            collapse: ConvBnRelu::with_bias(&mut s, "collapse", channels, 1, 1, ConvSpec::unit())?,
            fc: Linear::new(&mut s, "fc", hw, hw, Init::Normal(1.0 / hw as f64))?,
            channels,
            height,
            width,
        })
    }

    fn check(&self, f: &Forward<'_, '_>, v: Var, what: &str) -> Result<()> {
        let (_, c, h, w) = f.graph.value(v).dims4("sa_block")?;
        if (c, h, w) != (self.channels, self.height, self.width) {
            return Err(Error::shape(
                "sa_block",
                format!(
                    "{what} is {:?} but the block operates on {}x{}x{}",
                    f.graph.shape(v),
                    self.channels,
                    self.height,
                    self.width
                ),
            ));
        }
        Ok(())
    }

    /// The gate `S`, shaped `(n, 1, H, W)`, computed from `x`.
    pub fn gate(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        self.check(f, x, "x")?;
        let n = f.graph.shape(x)[0];
        let hw = self.height * self.width;
        let u = self.collapse.forward(f, x)?;
        let u = f.graph.reshape(u, vec![n, hw])?;
        let s = self.fc.forward(f, u)?;
        let s = f.graph.sigmoid(s);
        f.graph.reshape(s, vec![n, 1, self.height, self.width])
    }

    /// `y` reweighted by the gate computed from `x`.
    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var, y: Var) -> Result<Var> {
        self.check(f, y, "y")?;
        if f.graph.shape(x)[0] != f.graph.shape(y)[0] {
            return Err(Error::shape(
                "sa_block",
                format!("batch of x {:?} differs from y {:?}", f.graph.shape(x), f.graph.shape(y)),
            ));
        }
        let s = self.gate(f, x)?;
        f.graph.mul_broadcast_spatial(y, s)
    }
}
