use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter name; absent entries are zero.
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// changes, so a non-finite gradient leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let name = store.name(*id);
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("sgd_step", format!("{name}: {:?} vs {:?}", g.shape(), store.get(*id).shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { name: format!("grad of {name}") });
            }
        }
        for (id, g) in grads {
            let name = store.name(*id).to_string();
            let theta = store.get_mut(*id);
            let v = self.velocity.entry(name).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((p, v), g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
