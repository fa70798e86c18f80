use crate::error::{Error, Result};
use crate::nn::{Forward, Init, Linear, ParamBuilder};
use crate::tensor::Var;

/// Squeeze-and-excitation: per-channel scale
/// `sigmoid(fc2(relu(fc1(global_avg_pool(x)))))`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
    pub reduction: usize,
}

impl SeBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
            return Err(Error::Config(format!(
                "{name}: reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let mut s = pb.scope(name);
        Ok(Self {
            squeeze: Linear::new(&mut s, "squeeze", channels, hidden, Init::He { fan_in: channels })?,
            excite: Linear::new(&mut s, "excite", hidden, channels, Init::Normal((1.0 / hidden as f64).sqrt()))?,
            channels,
            reduction,
        })
    }

    /// Channel scales shaped `(n, channels)`.
    pub fn scales(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let (n, c, _, _) = f.graph.value(x).dims4("se_recalibrate")?;
        if c != self.channels {
            return Err(Error::shape(
                "se_recalibrate",
                format!("input {:?} but block expects {} channels", f.graph.shape(x), self.channels),
            ));
        }
        let pooled = f.graph.global_avg_pool(x)?;
        let pooled = f.graph.reshape(pooled, vec![n, c])?;
        let h = self.squeeze.forward(f, pooled)?;
        let h = f.graph.relu(h);
        let e = self.excite.forward(f, h)?;
        Ok(f.graph.sigmoid(e))
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let s = self.scales(f, x)?;
        f.graph.mul_broadcast_channel(x, s)
    }
}
