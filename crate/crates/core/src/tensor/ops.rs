//! Forward kernels on plain [`Tensor`] values, plus the backward kernels the
//! tape needs for the non-trivial ones (convolution, pooling, batch norm).

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Stride 1, no padding, no dilation.
    pub const fn unit() -> Self {
        Self::new(1, 0, 1)
    }

    /// Output extent for an input extent and kernel size, or `None` when the
    /// dilated kernel does not fit the padded input.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return None;
        }
        let padded = input + 2 * self.padding;
        let span = self.dilation * (kernel - 1) + 1;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Safe wrapper over `matrixmultiply::dgemm`:
/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n` row-major, and
/// `a`/`b` given by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, a_strides));
    assert!(b.len() >= last(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, spec: ConvSpec) -> Result<(usize, Self)> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, kcin, kh, kw) = kernel.dims4("conv2d")?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {cin} channels but kernel {:?} expects {kcin}",
                    input.shape(),
                    kernel.shape()
                ),
            ));
        }
        let (Some(oh), Some(ow)) = (spec.out_extent(h, kh), spec.out_extent(w, kw)) else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {:?} with {spec:?} does not fit input {:?}",
                    kernel.shape(),
                    input.shape()
                ),
            ));
        };
        Ok((n, Self { cin, h, w, cout, kh, kw, oh, ow, spec }))
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec == ConvSpec::unit()
    }

    /// Source row/column for output position `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize) -> isize {
        (o * self.spec.stride + t * self.spec.dilation) as isize - self.spec.padding as isize
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let sy = self.src(oy, ki);
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if sy < 0 || sy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src_row = &plane[sy as usize * self.w..(sy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let sx = self.src(ox, kj);
                            *v = if sx < 0 || sx >= self.w as isize {
                                0.0
                            } else {
                                src_row[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let sy = self.src(oy, ki);
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let sx = self.src(ox, kj);
                            if sx >= 0 && sx < self.w as isize {
                                plane[sy as usize * self.w + sx as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with stride, zero padding and dilation.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let (n, g) = ConvGeom::new(input, kernel, spec)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match kernel {:?}", b.shape(), kernel.shape()),
            ));
        }
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let x = input.data();
    let wt = kernel.data();
    let mut out = vec![0.0; n * g.cout * p];
    par_chunks_mut!(out, g.cout * p, |(i, y): (usize, &mut [f64])| {
        let xn = &x[i * in_stride..(i + 1) * in_stride];
        if let Some(b) = bias {
            for (co, row) in y.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(g.cout, k, p, wt, (k, 1), xn, (p, 1), beta, y);
        } else {
            let mut col = vec![0.0; k * p];
            g.im2col(xn, &mut col);
            gemm(g.cout, k, p, wt, (k, 1), &col, (p, 1), beta, y);
        }
    });
    Ok(Tensor::from_parts(vec![n, g.cout, g.oh, g.ow], out))
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    spec: ConvSpec,
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let (n, g) = ConvGeom::new(input, kernel, spec).expect("validated in forward");
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let x = input.data();
    let wt = kernel.data();
    let per_image = par_map!(0..n, |i: usize| {
        let xn = &x[i * in_stride..(i + 1) * in_stride];
        let dy = &grad_out[i * g.cout * p..(i + 1) * g.cout * p];
        let owned_col;
        let col: &[f64] = if g.is_pointwise() {
            xn
        } else {
            let mut c = vec![0.0; k * p];
            g.im2col(xn, &mut c);
            owned_col = c;
            &owned_col
        };
        // dW = dY · colᵀ
        let mut dw = vec![0.0; g.cout * k];
        gemm(g.cout, p, k, dy, (p, 1), col, (1, p), 0.0, &mut dw);
        let db: Vec<f64> = dy.chunks(p).map(|r| r.iter().sum()).collect();
        let dx = need_input.then(|| {
            // dcol = Wᵀ · dY
            let mut dcol = vec![0.0; k * p];
            gemm(k, g.cout, p, wt, (1, k), dy, (p, 1), 0.0, &mut dcol);
            if g.is_pointwise() {
                dcol
            } else {
                let mut dxn = vec![0.0; in_stride];
                g.col2im(&dcol, &mut dxn);
                dxn
            }
        });
        (dx, dw, db)
    });
    let mut dkernel = vec![0.0; g.cout * k];
    let mut dbias = vec![0.0; g.cout];
    let mut dinput = need_input.then(|| Vec::with_capacity(n * in_stride));
    for (dx, dw, db) in per_image {
        for (a, b) in dkernel.iter_mut().zip(&dw) {
            *a += b;
        }
        for (a, b) in dbias.iter_mut().zip(&db) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    ConvGrads { input: dinput, kernel: dkernel, bias: dbias }
}

/// Batch-norm parameters and running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    pub training: bool,
}

impl BatchNormParams {
    /// Unit scale, zero shift, zero mean and unit variance.
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("batch norm epsilon must be positive, got {epsilon}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("batch norm momentum must be in (0,1), got {momentum}")));
        }
        Ok(Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            epsilon,
            momentum,
            training: false,
        })
    }
}

/// Output of a training-mode batch-norm forward pass.
pub(crate) struct BnTrainOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check_bn(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4("batch_norm")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "input {:?} has {c} channels, gamma {:?}, beta {:?}",
                input.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((n, c, h * w))
}

/// Per-channel biased batch statistics, two-pass.
pub(crate) fn bn_train_forward(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<BnTrainOut> {
    let (n, c, hw) = check_bn(input, gamma, beta)?;
    let x = input.data();
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&xi| (xi - m) * (xi - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (g, bt, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in base..base + hw {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    Ok(BnTrainOut { y, xhat, mean, var, inv_std })
}

pub(crate) fn bn_infer_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let (n, c, hw) = check_bn(input, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape("batch_norm", "running statistics do not match channels"));
    }
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gamma.data()[ch] / (var[ch] + eps).sqrt();
            let shift = beta.data()[ch] - mean[ch] * scale;
            for i in base..base + hw {
                y[i] = x[i] * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Batch normalisation over (batch, height, width) per channel. In training
/// mode the running statistics are updated with the biased batch variance.
pub fn batch_norm(input: &Tensor, params: &mut BatchNormParams) -> Result<Tensor> {
    if params.training {
        let out = bn_train_forward(input, &params.gamma, &params.beta, params.epsilon)?;
        let m = params.momentum;
        for (r, b) in params.running_mean.data_mut().iter_mut().zip(&out.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in params.running_var.data_mut().iter_mut().zip(&out.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        Ok(Tensor::from_parts(input.shape().to_vec(), out.y))
    } else {
        let y = bn_infer_forward(
            input,
            &params.gamma,
            &params.beta,
            params.running_mean.data(),
            params.running_var.data(),
            params.epsilon,
        )?;
        Ok(Tensor::from_parts(input.shape().to_vec(), y))
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows and row length when treating `input` as a batch of flat vectors.
pub(crate) fn as_rows(input: &Tensor) -> (usize, usize) {
    if input.rank() == 1 {
        (1, input.len())
    } else {
        (input.shape()[0], input.len() / input.shape()[0])
    }
}

/// Affine map `x · W + b` applied to each batch row of `input`, where
/// `weight` is `in × out`.
pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, k) = as_rows(input);
    let [wk, m] = weight.shape()[..] else {
        return Err(Error::shape("fully_connected", format!("weight must be rank 2, got {:?}", weight.shape())));
    };
    if wk != k {
        return Err(Error::shape(
            "fully_connected",
            format!("input {:?} flattens to {k} but weight is {:?}", input.shape(), weight.shape()),
        ));
    }
    let mut out = vec![0.0; rows * m];
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::shape(
                "fully_connected",
                format!("bias {:?} does not match weight {:?}", b.shape(), weight.shape()),
            ));
        }
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(rows, k, m, input.data(), (k, 1), weight.data(), (m, 1), beta, &mut out);
    Ok(Tensor::from_parts(vec![rows, m], out))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} and {:?} differ outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, h, w], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// `z[n,c,h,w] = y[n,c,h,w] · s[n,h,w]`; `s` may be shaped `(n,1,h,w)` or
/// `(n, h·w)`.
pub fn mul_broadcast_spatial(y: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = y.dims4("mul_broadcast_spatial")?;
    let hw = h * w;
    if s.len() != n * hw || s.shape()[0] != n {
        return Err(Error::shape(
            "mul_broadcast_spatial",
            format!("gate {:?} does not match spatial extent of {:?}", s.shape(), y.shape()),
        ));
    }
    let mut out = y.data().to_vec();
    for b in 0..n {
        let gate = &s.data()[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (o, g) in out[base..base + hw].iter_mut().zip(gate) {
                *o *= g;
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

/// `z[n,c,h,w] = x[n,c,h,w] · s[n,c]`.
pub fn mul_broadcast_channel(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("mul_broadcast_channel")?;
    if s.len() != n * c || s.shape()[0] != n {
        return Err(Error::shape(
            "mul_broadcast_channel",
            format!("scale {:?} does not match channels of {:?}", s.shape(), x.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(hw).enumerate() {
        let g = s.data()[i];
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let hw = h * w;
    let data = input.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_parts(vec![n, c, 1, 1], data))
}

pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("upsample_nearest2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, src) in out.chunks_mut(oh * ow).zip(input.data().chunks(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                plane[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Max pooling; returns the output and, per output element, the flat input
/// index of the selected maximum (first occurrence on ties).
pub(crate) fn max_pool_with_argmax(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("max_pool")?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::shape(
            "max_pool",
            format!("window {k} (stride {stride}) does not fit input {:?}", input.shape()),
        ));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn max_pool(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    max_pool_with_argmax(input, k, stride).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn out_extent_formula() {
        let s = ConvSpec::new(2, 1, 1);
        assert_eq!(s.out_extent(19, 3), Some(10));
        assert_eq!(s.out_extent(300, 3), Some(150));
        assert_eq!(s.out_extent(75, 3), Some(38));
        assert_eq!(ConvSpec::unit().out_extent(3, 3), Some(1));
        assert_eq!(ConvSpec::unit().out_extent(2, 3), None);
        assert_eq!(ConvSpec::new(1, 2, 2).out_extent(10, 3), Some(10));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = substream(1, "t", &[]);
        let x = Tensor::randn(vec![1, 1, 3, 3], 1.0, &mut rng);
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, None, ConvSpec::unit()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let mut rng = substream(2, "t", &[]);
        let x = Tensor::zeros(vec![2, 3, 5, 5]);
        let k = Tensor::randn(vec![4, 3, 3, 3], 1.0, &mut rng);
        let y = conv2d(&x, &k, None, ConvSpec::new(1, 1, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(vec![1, 2, 5, 5]);
        let k = Tensor::zeros(vec![4, 3, 3, 3]);
        let err = conv2d(&x, &k, None, ConvSpec::unit()).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 5, 5]") && err.contains("[4, 3, 3, 3]"), "{err}");
        let big = Tensor::zeros(vec![1, 3, 7, 7]);
        let err = conv2d(&Tensor::zeros(vec![1, 3, 2, 2]), &big, None, ConvSpec::unit());
        assert!(err.is_err());
    }

    #[test]
    fn batch_norm_rejects_bad_epsilon() {
        assert!(BatchNormParams::new(3, 0.0, 0.1).is_err());
        assert!(BatchNormParams::new(3, -1e-5, 0.1).is_err());
        assert!(BatchNormParams::new(3, 1e-5, 1.5).is_err());
    }

    #[test]
    fn batch_norm_identity_in_inference() {
        let mut rng = substream(3, "t", &[]);
        let x = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
        // eps is tiny so that 1/sqrt(1+eps) rounds to 1
        let mut p = BatchNormParams::new(3, 1e-300, 0.1).unwrap();
        let y = batch_norm(&x, &mut p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn batch_norm_training_normalizes_and_updates_running_stats() {
        let mut rng = substream(4, "t", &[]);
        let x = Tensor::randn(vec![3, 2, 5, 5], 3.0, &mut rng).map(|v| v + 1.5);
        let mut p = BatchNormParams::new(2, 1e-5, 0.1).unwrap();
        p.training = true;
        let y = batch_norm(&x, &mut p).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| (0..25).map(move |i| (b, i)))
                .map(|(b, i)| y.data()[(b * 2 + ch) * 25 + i])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            // eps shrinks the variance slightly below one
            assert!((v - 1.0).abs() < 1e-5);
        }
        assert!(p.running_mean.data().iter().all(|&m| m != 0.0));
        assert!(p.running_var.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).data()[0], 0.5);
        let r = relu(&Tensor::new(vec![2], vec![-1.5, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 2.0]);
        let mut rng = substream(5, "t", &[]);
        let s = sigmoid(&Tensor::randn(vec![100], 10.0, &mut rng));
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(sigmoid_scalar(-800.0).is_finite() && sigmoid_scalar(800.0) == 1.0);
    }

    #[test]
    fn fully_connected_identity_and_constant() {
        let mut rng = substream(6, "t", &[]);
        let x = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(fully_connected(&x, &eye, Some(&Tensor::zeros(vec![3]))).unwrap(), x);
        let b = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = fully_connected(&x, &Tensor::zeros(vec![3, 3]), Some(&b)).unwrap();
        assert_eq!(&y.data()[..3], b.data());
        assert_eq!(&y.data()[3..], b.data());
        assert!(fully_connected(&x, &Tensor::zeros(vec![4, 3]), None).is_err());
    }

    #[test]
    fn concat_and_broadcasts() {
        let mut rng = substream(7, "t", &[]);
        let a = Tensor::randn(vec![2, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![2, 3, 3, 3], 1.0, &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 3, 3]);
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    for ch in 0..2 {
                        assert_eq!(c.at4(n, ch, h, w), a.at4(n, ch, h, w));
                    }
                    for ch in 0..3 {
                        assert_eq!(c.at4(n, 2 + ch, h, w), b.at4(n, ch, h, w));
                    }
                }
            }
        }
        assert!(concat_channels(&a, &Tensor::zeros(vec![2, 1, 4, 3])).is_err());
        let ones = Tensor::full(vec![2, 1, 3, 3], 1.0);
        assert_eq!(mul_broadcast_spatial(&b, &ones).unwrap(), b);
        assert!(mul_broadcast_spatial(&b, &Tensor::full(vec![2, 1, 2, 3], 1.0)).is_err());
    }

    #[test]
    fn pooling_and_upsampling() {
        let c = Tensor::full(vec![1, 2, 4, 4], 3.25);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 3.25));
        assert!(max_pool(&c, 2, 2).unwrap().data().iter().all(|&v| v == 3.25));
        assert!(upsample_nearest2x(&c).unwrap().data().iter().all(|&v| v == 3.25));
        assert!(max_pool(&c, 5, 1).is_err());

        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest2x(&x).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
