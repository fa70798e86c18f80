//! Reverse-mode gradient tape.
//!
//! A [`Graph`] owns every intermediate value. Nodes are appended in
//! evaluation order, which is therefore a topological order, and
//! [`Graph::backward`] walks it in reverse. Tracked values are never
//! mutated in place.

use super::ops::{self, ConvSpec};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with biased batch statistics.
    Train { eps: f64 },
    /// Normalise with the given running statistics.
    Infer { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    MulSpatial { y: Var, s: Var },
    MulChannel { x: Var, s: Var },
    GlobalAvgPool { x: Var },
    Upsample2x { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    SliceChannels { x: Var, start: usize },
    L2NormChannels { x: Var, scale: Var, norms: Vec<f64> },
    GatherPriors { levels: Vec<(Var, usize)>, d: usize },
    Sum { x: Var },
    Dot { x: Var, weights: Vec<f64> },
    Scale { x: Var, c: f64 },
    Precomputed { inputs: Vec<(Var, Vec<f64>)> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or is not tracked.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, or zeros of its shape.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf value; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, spec }, &inputs))
    }

    /// Batch normalisation. In [`BnMode::Train`] the observed batch statistics
    /// are returned so the caller can update its running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let input = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (value, xhat, inv_std, stats) = match mode {
            BnMode::Train { eps } => {
                let out = ops::bn_train_forward(input, g, b, eps)?;
                let stats = BatchStats { mean: out.mean, var: out.var };
                (out.y, out.xhat, out.inv_std, Some(stats))
            }
            BnMode::Infer { mean, var, eps } => {
                let y = ops::bn_infer_forward(input, g, b, mean, var, eps)?;
                let (_, c, h, w) = input.dims4("batch_norm")?;
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = input.data().to_vec();
                for (i, chunk) in xhat.chunks_mut(h * w).enumerate() {
                    let ch = i % c;
                    chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
                }
                (y, xhat, inv_std, None)
            }
        };
        let value = Tensor::from_parts(input.shape().to_vec(), value);
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::fully_connected(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul_broadcast_spatial(&mut self, y: Var, s: Var) -> Result<Var> {
        let out = ops::mul_broadcast_spatial(self.value(y), self.value(s))?;
        Ok(self.push(out, Op::MulSpatial { y, s }, &[y, s]))
    }

    pub fn mul_broadcast_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = ops::mul_broadcast_channel(self.value(x), self.value(s))?;
        Ok(self.push(out, Op::MulChannel { x, s }, &[x, s]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample_nearest2x(self.value(x))?;
        Ok(self.push(out, Op::Upsample2x { x }, &[x]))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool_with_argmax(self.value(x), k, stride)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Channels `start..start+len` of a rank-4 value.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} out of range for {:?}", start + len, self.shape(x)),
            ));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let out = Tensor::from_parts(vec![n, len, h, w], out);
        Ok(self.push(out, Op::SliceChannels { x, start }, &[x]))
    }

    /// Normalises each spatial position's channel vector to unit L2 norm and
    /// rescales channel `c` by `scale[c]`.
    pub fn l2_normalize_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("l2_normalize_channels")?;
        let s = self.value(scale);
        if s.len() != c {
            return Err(Error::shape(
                "l2_normalize_channels",
                format!("scale {:?} does not match {:?}", s.shape(), self.shape(x)),
            ));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut norms = vec![0.0; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let ss: f64 = (0..c).map(|ch| src[(b * c + ch) * hw + p].powi(2)).sum();
                norms[b * hw + p] = (ss + L2_EPS).sqrt();
            }
        }
        let mut out = src.to_vec();
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * c + ch) * hw + p] *= s.data()[ch] / norms[b * hw + p];
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(out, Op::L2NormChannels { x, scale, norms }, &[x, scale]))
    }

    /// Rearranges per-level head maps shaped `(n, boxes·d, h, w)` into a single
    /// `(n, Σ h·w·boxes, d)` value ordered by level, row, column, box.
    pub fn gather_priors(&mut self, levels: &[(Var, usize)], d: usize) -> Result<Var> {
        let mut n0 = None;
        let mut total = 0;
        for &(v, boxes) in levels {
            let (n, c, h, w) = self.value(v).dims4("gather_priors")?;
            if c != boxes * d || n0.is_some_and(|m| m != n) {
                return Err(Error::shape(
                    "gather_priors",
                    format!("level {:?} is not (n, {boxes}x{d}, h, w)", self.shape(v)),
                ));
            }
            n0 = Some(n);
            total += h * w * boxes;
        }
        let n = n0.ok_or_else(|| Error::shape("gather_priors", "no levels"))?;
        let mut out = vec![0.0; n * total * d];
        let mut offset = 0;
        for &(v, boxes) in levels {
            let (_, c, h, w) = self.value(v).dims4("gather_priors")?;
            let src = self.value(v).data();
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        for a in 0..boxes {
                            let prior = offset + (y * w + x) * boxes + a;
                            for j in 0..d {
                                out[(b * total + prior) * d + j] = src[((b * c + a * d + j) * h + y) * w + x];
                            }
                        }
                    }
                }
            }
            offset += h * w * boxes;
        }
        let inputs: Vec<Var> = levels.iter().map(|l| l.0).collect();
        let out = Tensor::from_parts(vec![n, total, d], out);
        Ok(self.push(out, Op::GatherPriors { levels: levels.to_vec(), d }, &inputs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    /// `Σ x·weights` with constant weights: a scalar probe of an arbitrary value.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "dot_const",
                format!("{:?} vs {:?}", self.shape(x), weights.shape()),
            ));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights: weights.data().to_vec() }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// A scalar computed outside the tape together with its gradient with
    /// respect to each input.
    pub fn precomputed_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.shape() != self.shape(*v) {
                return Err(Error::shape(
                    "precomputed_scalar",
                    format!("gradient {:?} for value {:?}", g.shape(), self.shape(*v)),
                ));
            }
        }
        let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
        let inputs = inputs.into_iter().map(|(v, g)| (v, g.into_data())).collect();
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { inputs }, &vars))
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut shapes: Vec<Vec<usize>> = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        // grads for untracked leaves are meaningless; drop them
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        shapes.truncate(grads.len());
        Ok(Gradients { grads, shapes })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), *spec, g, self.tracked(*x));
                if let Some(dx) = cg.input {
                    accum(grads, *x, dx);
                }
                if self.tracked(*w) {
                    accum(grads, *w, cg.kernel);
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        accum(grads, *b, cg.bias);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4("batch_norm").unwrap();
                let hw = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.tracked(*x) {
                    let mut dx = vec![0.0; g.len()];
                    if *batch_stats {
                        let m = (n * hw) as f64;
                        for b in 0..n {
                            for ch in 0..c {
                                let k = gam[ch] * inv_std[ch] / m;
                                let base = (b * c + ch) * hw;
                                for i in base..base + hw {
                                    dx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                let k = gam[ch] * inv_std[ch];
                                let base = (b * c + ch) * hw;
                                for i in base..base + hw {
                                    dx[i] = k * g[i];
                                }
                            }
                        }
                    }
                    accum(grads, *x, dx);
                }
                if self.tracked(*gamma) {
                    accum(grads, *gamma, dgamma);
                }
                if self.tracked(*beta) {
                    accum(grads, *beta, dbeta);
                }
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accum(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accum(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (rows, k) = ops::as_rows(xv);
                let m = self.value(*w).shape()[1];
                if self.tracked(*x) {
                    let mut dx = vec![0.0; rows * k];
                    ops::gemm(rows, m, k, g, (m, 1), self.value(*w).data(), (1, m), 0.0, &mut dx);
                    accum(grads, *x, dx);
                }
                if self.tracked(*w) {
                    let mut dw = vec![0.0; k * m];
                    ops::gemm(k, rows, m, xv.data(), (1, k), g, (m, 1), 0.0, &mut dw);
                    accum(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.tracked(*b)) {
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    accum(grads, b, db);
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4("concat").unwrap();
                let cb = self.value(*b).shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * sa);
                let mut db = Vec::with_capacity(n * sb);
                for chunk in g.chunks(sa + sb) {
                    da.extend_from_slice(&chunk[..sa]);
                    db.extend_from_slice(&chunk[sa..]);
                }
                if self.tracked(*a) {
                    accum(grads, *a, da);
                }
                if self.tracked(*b) {
                    accum(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.tracked(*a) {
                    accum(grads, *a, g.to_vec());
                }
                if self.tracked(*b) {
                    accum(grads, *b, g.to_vec());
                }
            }
            Op::MulSpatial { y, s } => {
                let (n, c, h, w) = self.value(*y).dims4("mul_spatial").unwrap();
                let hw = h * w;
                let (yv, sv) = (self.value(*y).data(), self.value(*s).data());
                if self.tracked(*y) {
                    let mut dy = g.to_vec();
                    for (i, chunk) in dy.chunks_mut(hw).enumerate() {
                        let gate = &sv[(i / c) * hw..(i / c + 1) * hw];
                        chunk.iter_mut().zip(gate).for_each(|(d, s)| *d *= s);
                    }
                    accum(grads, *y, dy);
                }
                if self.tracked(*s) {
                    let mut ds = vec![0.0; n * hw];
                    for (i, (gc, yc)) in g.chunks(hw).zip(yv.chunks(hw)).enumerate() {
                        let b = i / c;
                        for p in 0..hw {
                            ds[b * hw + p] += gc[p] * yc[p];
                        }
                    }
                    accum(grads, *s, ds);
                }
            }
            Op::MulChannel { x, s } => {
                let (_, _, h, w) = self.value(*x).dims4("mul_channel").unwrap();
                let hw = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.tracked(*x) {
                    let mut dx = g.to_vec();
                    for (i, chunk) in dx.chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|d| *d *= sv[i]);
                    }
                    accum(grads, *x, dx);
                }
                if self.tracked(*s) {
                    let ds = g
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    accum(grads, *s, ds);
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4("gap").unwrap();
                let hw = h * w;
                let mut dx = Vec::with_capacity(g.len() * hw);
                for gi in g {
                    dx.extend(std::iter::repeat_n(gi / hw as f64, hw));
                }
                accum(grads, *x, dx);
            }
            Op::Upsample2x { x } => {
                let (_, _, h, w) = self.value(*x).dims4("upsample").unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            plane[(yy / 2) * w + xx / 2] += gp[yy * ow + xx];
                        }
                    }
                }
                accum(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
                accum(grads, *x, dx);
            }
            Op::Reshape { x } => accum(grads, *x, g.to_vec()),
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4("slice").unwrap();
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for b in 0..n {
                    dx[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
                }
                accum(grads, *x, dx);
            }
            Op::L2NormChannels { x, scale, norms } => {
                let (n, c, h, w) = self.value(*x).dims4("l2norm").unwrap();
                let hw = h * w;
                let (xv, sv) = (self.value(*x).data(), self.value(*scale).data());
                let mut dx = vec![0.0; xv.len()];
                let mut ds = vec![0.0; c];
                for b in 0..n {
                    for p in 0..hw {
                        let norm = norms[b * hw + p];
                        let idx = |ch: usize| (b * c + ch) * hw + p;
                        // g' = g·s, u = x/norm, dx = (g' − u·Σ g'·u)/norm
                        let mut dotgu = 0.0;
                        for ch in 0..c {
                            let u = xv[idx(ch)] / norm;
                            ds[ch] += g[idx(ch)] * u;
                            dotgu += g[idx(ch)] * sv[ch] * u;
                        }
                        for ch in 0..c {
                            let u = xv[idx(ch)] / norm;
                            dx[idx(ch)] = (g[idx(ch)] * sv[ch] - u * dotgu) / norm;
                        }
                    }
                }
                if self.tracked(*x) {
                    accum(grads, *x, dx);
                }
                if self.tracked(*scale) {
                    accum(grads, *scale, ds);
                }
            }
            Op::GatherPriors { levels, d } => {
                let d = *d;
                let [n, total, _] = node.value.shape()[..] else { unreachable!() };
                let mut offset = 0;
                for &(v, boxes) in levels {
                    let (_, c, h, w) = self.value(v).dims4("gather").unwrap();
                    if self.tracked(v) {
                        let mut dv = vec![0.0; n * c * h * w];
                        for b in 0..n {
                            for y in 0..h {
                                for x in 0..w {
                                    for a in 0..boxes {
                                        let prior = offset + (y * w + x) * boxes + a;
                                        for j in 0..d {
                                            dv[((b * c + a * d + j) * h + y) * w + x] = g[(b * total + prior) * d + j];
                                        }
                                    }
                                }
                            }
                        }
                        accum(grads, v, dv);
                    }
                    offset += h * w * boxes;
                }
            }
            Op::Sum { x } => {
                let len = self.value(*x).len();
                accum(grads, *x, vec![g[0]; len]);
            }
            Op::Dot { x, weights } => {
                accum(grads, *x, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::Scale { x, c } => accum(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Precomputed { inputs } => {
                for (v, local) in inputs {
                    if self.tracked(*v) {
                        accum(grads, *v, local.iter().map(|l| l * g[0]).collect());
                    }
                }
            }
        }
    }
}

const L2_EPS: f64 = 1e-10;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input() {
        // loss = Σ (x · W) over the single output → dW[i,j] = x[i]
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.variable(Tensor::new(vec![3, 1], vec![0.3, 0.1, -0.7]).unwrap());
        let y = g.linear(x, w, None).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
