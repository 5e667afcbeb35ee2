//! Forward and backward kernels for the fixed layer catalog.
//!
//! Each backward function takes the forward inputs plus the upstream gradient
//! and returns exact gradients; layer structs in [`super::layers`] own the
//! caching and accumulation.

use crate::error::{Error, Result};
use crate::nn::scalar::{gemm, Op, Scratch};
use crate::nn::{Scalar, Tensor};

/// Upper bound on im2col buffer elements; larger batches are processed in
/// image chunks.
const COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &Tensor<impl Scalar>, weight: &Tensor<impl Scalar>, stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = input.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::dim("conv2d", "in_channels", cin, wcin));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", "kernel_width", kh, kw));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride", ">= 1", 0));
        }
        if kh > h + 2 * pad {
            return Err(Error::dim("conv2d", "height", format!(">= kernel {kh}"), h + 2 * pad));
        }
        if kw > w + 2 * pad {
            return Err(Error::dim("conv2d", "width", format!(">= kernel {kw}"), w + 2 * pad));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.plane()).max(1)).clamp(1, self.n)
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - kernel) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `ox * s + kx - p` is in bounds.
fn valid_cols(ow: usize, w: usize, s: usize, kx: usize, p: usize) -> (usize, usize) {
    // ix >= 0  <=>  ox * s >= p - kx
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // ix < w  <=>  ox * s < w + p - kx
    let hi = if w + p <= kx { 0 } else { (w + p - kx).div_ceil(s) };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

/// Fills `cols` (patch x nb*plane) for images `[n0, n0 + nb)`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], n0: usize, nb: usize, cols: &mut [T]) {
    let plane = g.plane();
    let width = nb * plane;
    let (k, s, p) = (g.k, g.stride, g.pad);
    for ci in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                let (lo, hi) = valid_cols(g.ow, g.w, s, kx, p);
                for b in 0..nb {
                    let src = &x[((n0 + b) * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if lo < hi {
                            let ix0 = lo * s + kx - p;
                            if s == 1 {
                                drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                            } else {
                                for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                                    *d = srow[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input-gradient buffer.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], n0: usize, nb: usize, dx: &mut [T]) {
    let plane = g.plane();
    let width = nb * plane;
    let (k, s, p) = (g.k, g.stride, g.pad);
    for ci in 0..g.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * width..(row + 1) * width];
                let (lo, hi) = valid_cols(g.ow, g.w, s, kx, p);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * s + kx - p;
                for b in 0..nb {
                    let dst = &mut dx[((n0 + b) * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                        if s == 1 {
                            drow[ix0..ix0 + hi - lo].iter_mut().zip(srow).for_each(|(d, v)| *d += *v);
                        } else {
                            for (j, v) in srow.iter().enumerate() {
                                drow[ix0 + j * s] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, NCHW input, `(C_out, C_in, k, k)` weights.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::dim("conv2d", "bias", g.cout, b.numel()));
        }
    }
    let plane = g.plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let chunk = g.chunk();
    let mut cols = Scratch::take(patch * chunk * plane);
    let mut res = Scratch::take(g.cout * chunk * plane);
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let width = nb * plane;
        im2col(&g, input.data(), n0, nb, &mut cols);
        gemm(g.cout, width, patch, T::one(), weight.data(), Op::N, &cols, Op::N, T::zero(), &mut res);
        for co in 0..g.cout {
            let bv = bias.map_or(T::zero(), |b| b.data()[co]);
            for b in 0..nb {
                let src = &res[co * width + b * plane..][..plane];
                let dst = &mut out[((n0 + b) * g.cout + co) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bv;
                }
            }
        }
        n0 += nb;
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`. The input gradient
/// is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Vec<T>, Vec<T>)> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::dim("conv2d_backward", "grad_out", format!("{:?}", [g.n, g.cout, g.oh, g.ow]), format!("{:?}", grad_out.shape())));
    }
    let plane = g.plane();
    let patch = g.patch();
    let chunk = g.chunk();
    let mut dw = vec![T::zero(); g.cout * patch];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut cols = Scratch::take(patch * chunk * plane);
    let mut dout = Scratch::take(g.cout * chunk * plane);
    let go = grad_out.data();
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let width = nb * plane;
        for co in 0..g.cout {
            for b in 0..nb {
                let src = &go[((n0 + b) * g.cout + co) * plane..][..plane];
                dout[co * width + b * plane..][..plane].copy_from_slice(src);
                db[co] += src.iter().copied().sum::<T>();
            }
        }
        im2col(&g, input.data(), n0, nb, &mut cols);
        gemm(g.cout, patch, width, T::one(), &dout, Op::N, &cols, Op::T, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(patch, width, g.cout, T::one(), weight.data(), Op::T, &dout, Op::N, T::zero(), &mut cols);
            col2im(&g, &cols, n0, nb, dx);
        }
        n0 += nb;
    }
    let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    Ok((dx, dw, db))
}

/// `input (N x D) . weight (D x K) + bias (K)`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, d) = input.dims2("linear")?;
    let (wd, k) = weight.dims2("linear")?;
    if wd != d {
        return Err(Error::dim("linear", "inner", d, wd));
    }
    let mut out = vec![T::zero(); n * k];
    if let Some(b) = bias {
        if b.numel() != k {
            return Err(Error::dim("linear", "bias", k, b.numel()));
        }
        for row in out.chunks_mut(k) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, k, d, T::one(), input.data(), Op::N, weight.data(), Op::N, T::one(), &mut out);
    Tensor::new(vec![n, k], out)
}

/// Gradients of [`linear`]: `(d_input, d_weight, d_bias)`.
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, d) = input.dims2("linear_backward")?;
    let (_, k) = weight.dims2("linear_backward")?;
    if grad_out.shape() != [n, k] {
        return Err(Error::dim("linear_backward", "grad_out", format!("{:?}", [n, k]), format!("{:?}", grad_out.shape())));
    }
    let go = grad_out.data();
    let mut dw = vec![T::zero(); d * k];
    gemm(d, k, n, T::one(), input.data(), Op::T, go, Op::N, T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in go.chunks(k) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
    }
    let mut dx = vec![T::zero(); n * d];
    gemm(n, d, k, T::one(), go, Op::N, weight.data(), Op::T, T::zero(), &mut dx);
    Ok((Tensor::new(vec![n, d], dx)?, dw, db))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.clear_grad();
    out.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::zero()) {
            *v = T::zero()
        }
    });
    out
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::dim("relu_backward", "shape", format!("{:?}", input.shape()), format!("{:?}", grad_out.shape())));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Non-overlapping `k x k` average pooling; trailing rows/columns that do not
/// fill a window are dropped (floor rule).
pub fn avg_pool<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avg_pool")?;
    if k == 0 {
        return Err(Error::dim("avg_pool", "kernel", ">= 1", 0));
    }
    if k > h {
        return Err(Error::dim("avg_pool", "height", format!(">= window {k}"), h));
    }
    if k > w {
        return Err(Error::dim("avg_pool", "width", format!(">= window {k}"), w));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let src = &x[nc * h * w..][..h * w];
        let dst = &mut out[nc * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward<T: Scalar>(input_shape: &[usize], k: usize, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim("avg_pool_backward", "rank", 4, input_shape.len())),
    };
    let (oh, ow) = (h / k, w / k);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::dim("avg_pool_backward", "grad_out", format!("{:?}", [n, c, oh, ow]), format!("{:?}", grad_out.shape())));
    }
    let scale = T::one() / T::of((k * k) as f64);
    let go = grad_out.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let dst = &mut dx[nc * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[(nc * oh + oy) * ow + ox] * scale;
                for dy in 0..k {
                    for dxx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dxx] = g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Mean over the spatial axes: `N x C x H x W -> N x C`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let scale = T::one() / T::of((h * w) as f64);
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim("global_avg_pool_backward", "rank", 4, input_shape.len())),
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::dim("global_avg_pool_backward", "grad_out", format!("{:?}", [n, c]), format!("{:?}", grad_out.shape())));
    }
    let scale = T::one() / T::of((h * w) as f64);
    let mut dx = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * scale, h * w));
    }
    Tensor::new(input_shape.to_vec(), dx)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics captured by a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Training-mode batch normalization. Returns the output plus the cache needed
/// by [`batch_norm_backward`]; the caller folds `mean`/`var` into its running
/// statistics.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = input.dims4("batch_norm")?;
    check_affine(c, gamma, beta)?;
    let count = n * h * w;
    if count < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "batch_norm in train mode needs at least 2 values per channel, got {count}"
        )));
    }
    let plane = h * w;
    let x = input.data();
    let inv_count = T::one() / T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            mean[ch] += x[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_count);
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += x[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_count);
    let eps = T::of(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, s, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x[i] - m) * s;
                normalized[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Evaluation-mode batch normalization with fixed statistics.
pub fn batch_norm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("batch_norm")?;
    check_affine(c, gamma, beta)?;
    let plane = h * w;
    let eps = T::of(BN_EPS);
    let mut out = input.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let s = gamma.data()[ch] / (running_var[ch] + eps).sqrt();
            let shift = beta.data()[ch] - running_mean[ch] * s;
            out[(b * c + ch) * plane..][..plane]
                .iter_mut()
                .for_each(|v| *v = *v * s + shift);
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != c {
        return Err(Error::dim("batch_norm", "gamma", c, gamma.numel()));
    }
    if beta.numel() != c {
        return Err(Error::dim("batch_norm", "beta", c, beta.numel()));
    }
    Ok(())
}

/// Gradients of training-mode batch norm: `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    shape: &[usize],
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = match shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim("batch_norm_backward", "rank", 4, shape.len())),
    };
    if grad_out.shape() != shape {
        return Err(Error::dim("batch_norm_backward", "grad_out", format!("{shape:?}"), format!("{:?}", grad_out.shape())));
    }
    let plane = h * w;
    let inv_count = T::one() / T::of((n * plane) as f64);
    let go = grad_out.data();
    let xh = &cache.normalized;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += go[i];
                dgamma[ch] += go[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); go.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma.data()[ch] * cache.inv_std[ch];
            let mb = dbeta[ch] * inv_count;
            let mg = dgamma[ch] * inv_count;
            for i in off..off + plane {
                dx[i] = k * (go[i] - mb - xh[i] * mg);
            }
        }
    }
    Ok((Tensor::new(shape.to_vec(), dx)?, dgamma, dbeta))
}

/// Mean softmax cross-entropy and its logits gradient `(softmax - onehot) / N`.
///
/// Uses the max-shifted log-sum-exp, so saturated logits do not overflow.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", "labels", n, labels.len()));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::Label {
                index: i,
                label: y,
                classes: k,
            });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = &mut grad[i * k..(i + 1) * k];
        let mut sum = T::zero();
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp();
            sum += *gj;
        }
        loss += sum.ln() + max - row[y];
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Row-wise softmax with the max shift.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(vec![n, k], out)
}

/// Cross-entropy against per-row target distributions; gradient
/// `(softmax - target) / N`.
pub fn soft_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2("soft_cross_entropy")?;
    if targets.shape() != logits.shape() {
        return Err(Error::dim("soft_cross_entropy", "targets", format!("{:?}", logits.shape()), format!("{:?}", targets.shape())));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * k];
    for ((row, t), g) in logits.data().chunks(k).zip(targets.data().chunks(k)).zip(grad.chunks_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp();
            sum += *gj;
        }
        let lse = sum.ln() + max;
        for ((gj, &z), &tj) in g.iter_mut().zip(row).zip(t) {
            loss += tj * (lse - z);
            *gj = (*gj / sum - tj) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, k], grad)?))
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2("argmax")?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
