//! Parameter storage, the forward-pass context and the basic layers every
//! block is assembled from.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_substream;
use crate::tensor::{BnMode, ConvSpec, Graph, Tensor, Var};
use crate::tensor::BatchStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Trainable parameters receive gradients; buffers (running statistics) do not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|id| self.get(id).len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal(f64),
}

/// Registers parameters under a dotted name prefix. Each parameter is drawn
/// from its own substream keyed by its full name, so adding or removing a
/// subgraph never changes the initial values of the others.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, seed, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = self.full(name);
        ParamBuilder { store: self.store, seed: self.seed, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: Vec<usize>, init: Init, kind: ParamKind) -> Result<ParamId> {
        let full = self.full(name);
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(c) => Tensor::full(shape, c),
            Init::He { fan_in } => {
                let mut rng = named_substream(self.seed, "init", &full);
                Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), &mut rng)
            }
            Init::Normal(std) => {
                let mut rng = named_substream(self.seed, "init", &full);
                Tensor::randn(shape, std, &mut rng)
            }
        };
        self.store.add(full, value, kind)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: binds stored parameters onto a graph.
pub struct Forward<'g, 's> {
    pub graph: &'g mut Graph,
    store: &'s ParamStore,
    mode: Mode,
    track_params: bool,
    bound: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'g, 's> Forward<'g, 's> {
    /// Parameter gradients are tracked in [`Mode::Train`] only.
    pub fn new(graph: &'g mut Graph, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            track_params: mode == Mode::Train,
            bound: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn with_param_tracking(mut self, track: bool) -> Self {
        self.track_params = track;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Uses `var` for parameter `id` instead of a copy of the stored value.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let track = self.track_params && self.store.kind(id) == ParamKind::Trainable;
        let v = self.graph.leaf(self.store.get(id).clone(), track);
        self.bound.insert(id, v);
        v
    }

    /// Parameters bound so far, in id order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.bound.iter().map(|(&k, &v)| (k, v)).collect();
        v.sort();
        v
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Exponential moving-average update of batch-norm running statistics.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        Self::with_init(pb, name, in_ch, out_ch, kernel, spec, Init::He { fan_in: in_ch * kernel * kernel })
    }

    pub fn with_init(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let weight = s.param("weight", vec![out_ch, in_ch, kernel, kernel], init, ParamKind::Trainable)?;
        let bias = Some(s.param("bias", vec![out_ch], Init::Zeros, ParamKind::Trainable)?);
        Ok(Self { weight, bias, spec, in_ch, out_ch, kernel })
    }

    /// A He-initialized convolution without a bias, for use ahead of a
    /// normalization layer.
    pub fn without_bias(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let init = Init::He { fan_in: in_ch * kernel * kernel };
        let weight = s.param("weight", vec![out_ch, in_ch, kernel, kernel], init, ParamKind::Trainable)?;
        Ok(Self { weight, bias: None, spec, in_ch, out_ch, kernel })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            gamma: s.param("gamma", vec![channels], Init::Const(1.0), ParamKind::Trainable)?,
            beta: s.param("beta", vec![channels], Init::Zeros, ParamKind::Trainable)?,
            running_mean: s.param("running_mean", vec![channels], Init::Zeros, ParamKind::Buffer)?,
            running_var: s.param("running_var", vec![channels], Init::Const(1.0), ParamKind::Buffer)?,
            channels,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.graph.batch_norm(x, gamma, beta, BnMode::Train { eps: BN_EPS })?;
                f.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: BN_MOMENTUM,
                    stats: stats.expect("training mode reports batch statistics"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = f.store;
                let mode = BnMode::Infer {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                    eps: BN_EPS,
                };
                Ok(f.graph.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }
}

/// Fully connected layer with an `in × out` weight.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            weight: s.param("weight", vec![in_dim, out_dim], init, ParamKind::Trainable)?,
            bias: s.param("bias", vec![out_dim], Init::Zeros, ParamKind::Trainable)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.graph.linear(x, w, Some(b))
    }
}

/// Conv → BN → ReLU, with a bias-free convolution unless built by
/// [`ConvBnRelu::with_bias`].
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            conv: Conv2d::without_bias(&mut s, "conv", in_ch, out_ch, kernel, spec)?,
            bn: BatchNorm2d::new(&mut s, "bn", out_ch)?,
        })
    }

    /// As [`ConvBnRelu::new`] with a biased convolution.
    pub fn with_bias(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            conv: Conv2d::new(&mut s, "conv", in_ch, out_ch, kernel, spec)?,
            bn: BatchNorm2d::new(&mut s, "bn", out_ch)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(f.graph.relu(y))
    }
}

/// BN → ReLU → Conv (pre-activation).
#[derive(Clone, Debug)]
pub struct BnReluConv {
    pub bn: BatchNorm2d,
    pub conv: Conv2d,
}

impl BnReluConv {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            bn: BatchNorm2d::new(&mut s, "bn", in_ch)?,
            conv: Conv2d::new(&mut s, "conv", in_ch, out_ch, kernel, spec)?,
        })
    }

    /// As [`BnReluConv::new`] with a bias-free convolution, for units whose
    /// output feeds another normalization layer.
    pub fn without_bias(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            bn: BatchNorm2d::new(&mut s, "bn", in_ch)?,
            conv: Conv2d::without_bias(&mut s, "conv", in_ch, out_ch, kernel, spec)?,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_, '_>, x: Var) -> Result<Var> {
        let y = self.bn.forward(f, x)?;
        let y = f.graph.relu(y);
        self.conv.forward(f, y)
    }
}
