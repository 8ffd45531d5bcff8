//! Forward and backward kernels for the network primitives.
//!
//! Every kernel is a pure function of its inputs. Reductions run in a fixed
//! order, so results are bitwise reproducible.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Momentum of the batch-norm running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance epsilon of batch norm.
pub const BN_EPS: f64 = 1e-5;

/// Output extent of a strided, padded window scan, `None` when empty.
pub fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits `(col_row, col_col, Some(input_index) | None-for-padding)`.
    #[inline]
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let p = self.col_cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            let col = oy * self.ow + ox;
                            let src = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                Some((ci * self.h + iy as usize) * self.w + ix as usize)
                            } else {
                                None
                            };
                            debug_assert!(col < p);
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_geom(
    op: &'static str,
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [_, c, h, w] = *x_shape else {
        return Err(Error::shape(op, format!("input must be NCHW, got {x_shape:?}")));
    };
    let [_, wc, kh, kw] = *w_shape else {
        return Err(Error::shape(op, format!("weight must be OIHW, got {w_shape:?}")));
    };
    if wc != c {
        return Err(Error::shape(
            op,
            format!("input has {c} channels but weight {w_shape:?} expects {wc}"),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv stride must be positive"));
    }
    let (Some(oh), Some(ow)) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)) else {
        return Err(Error::shape(
            op,
            format!("{h}x{w} input with {kh}x{kw} kernel, pad {pad} gives an empty output"),
        ));
    };
    Ok(ConvGeom { c, h, w, kh, kw, stride, pad, oh, ow })
}

/// Unfolds one C×H×W sample into a `(C·kh·kw) × (oh·ow)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.col_cols();
    g.for_each_tap(|row, c, src| {
        col[row * p + c] = match src {
            Some(i) => x[i],
            None => T::zero(),
        };
    });
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.col_cols();
    g.for_each_tap(|row, c, src| {
        if let Some(i) = src {
            dx[i] += col[row * p + c];
        }
    });
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// 2-D cross-correlation (no kernel flip). `x` is NCHW, `w` is OIHW.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom("conv2d", x.shape(), w.shape(), stride, pad)?;
    let n = x.shape()[0];
    let o = w.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {o} outputs", b.shape())));
        }
    }
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * o * p];
    let mut col = if is_pointwise(&g) { Vec::new() } else { vec![T::zero(); rows * p] };
    let wm = MatRef::row_major(w.data(), o, rows);
    for s in 0..n {
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        let cm = if is_pointwise(&g) {
            MatRef::row_major(xs, rows, p)
        } else {
            im2col(xs, &g, &mut col);
            MatRef::row_major(&col, rows, p)
        };
        let ys = &mut out[s * o * p..(s + 1) * o * p];
        gemm(T::one(), wm, cm, T::zero(), ys);
        if let Some(b) = bias {
            for (oc, chunk) in ys.chunks_exact_mut(p).enumerate() {
                let bv = b.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&[n, o, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom("conv2d_backward", x.shape(), w.shape(), stride, pad)?;
    let n = x.shape()[0];
    let o = w.shape()[0];
    if dy.shape() != [n, o, g.oh, g.ow] {
        return Err(Error::shape("conv2d_backward", format!("upstream gradient {:?}", dy.shape())));
    }
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.c * g.h * g.w;
    let mut dw = vec![T::zero(); o * rows];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut col = vec![T::zero(); rows * p];
    let wm = MatRef::row_major(w.data(), o, rows);
    for s in 0..n {
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        let dys = MatRef::row_major(&dy.data()[s * o * p..(s + 1) * o * p], o, p);
        if is_pointwise(&g) {
            gemm(T::one(), dys, MatRef::row_major(xs, rows, p).t(), T::one(), &mut dw);
        } else {
            im2col(xs, &g, &mut col);
            gemm(T::one(), dys, MatRef::row_major(&col, rows, p).t(), T::one(), &mut dw);
        }
        if need_dx {
            let dxs = &mut dx[s * in_stride..(s + 1) * in_stride];
            if is_pointwise(&g) {
                gemm(T::one(), wm.t(), dys, T::one(), dxs);
            } else {
                gemm(T::one(), wm.t(), dys, T::zero(), &mut col);
                col2im(&col, &g, dxs);
            }
        }
    }
    let db = if has_bias {
        let mut db = vec![T::zero(); o];
        for s in 0..n {
            for (oc, chunk) in dy.data()[s * o * p..(s + 1) * o * p].chunks_exact(p).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        Some(Tensor::new(&[o], db)?)
    } else {
        None
    };
    Ok(ConvGrads {
        dx: if need_dx { Some(Tensor::new(x.shape(), dx)?) } else { None },
        dw: Tensor::new(w.shape(), dw)?,
        db,
    })
}

/// Per-channel batch statistics (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_channel_vec<T: Scalar>(name: &str, t: &Tensor<T>, c: usize) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("{name} has shape {:?}, expected [{c}]", t.shape()),
        ));
    }
    Ok(())
}

fn channel_slices<T>(data: &[T], n: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = &[T]> {
    (0..n).map(move |s| &data[(s * c + ch) * hw..(s * c + ch + 1) * hw])
}

/// Two-pass per-channel mean and biased variance, accumulated in f64.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<BnStats<T>> {
    let (n, c, h, w) = x.dims4("batchnorm2d")?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let sum: f64 = channel_slices(x.data(), n, c, hw, ch)
            .flat_map(|s| s.iter())
            .map(|v| v.as_f64())
            .sum();
        let mu = sum / m;
        let sq: f64 = channel_slices(x.data(), n, c, hw, ch)
            .flat_map(|s| s.iter())
            .map(|v| {
                let d = v.as_f64() - mu;
                d * d
            })
            .sum();
        mean.push(T::from_f64_lossy(mu));
        var.push(T::from_f64_lossy(sq / m));
    }
    Ok(BnStats { mean, var })
}

fn inv_std<T: Scalar>(var: &[T], eps: f64) -> Result<Vec<T>> {
    var.iter()
        .enumerate()
        .map(|(ch, v)| {
            let d = v.as_f64() + eps;
            if d > 0.0 && d.is_finite() {
                Ok(T::from_f64_lossy(1.0 / libm::sqrt(d)))
            } else {
                Err(Error::NonPositiveVariance(format!("channel {ch}")))
            }
        })
        .collect()
}

fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    istd: &[T],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("batchnorm2d")?;
    let hw = h * w;
    let mut out = x.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * istd[ch];
            let (mu, b) = (mean[ch], beta.data()[ch]);
            for v in &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v = (*v - mu) * scale + b;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Training-mode batch norm: normalizes with batch statistics and returns
/// them so the caller can update its running averages.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnStats<T>)> {
    let (_, c, _, _) = x.dims4("batchnorm2d")?;
    check_channel_vec("gamma", gamma, c)?;
    check_channel_vec("beta", beta, c)?;
    let stats = channel_stats(x)?;
    let istd = inv_std(&stats.var, eps)?;
    Ok((bn_apply(x, gamma, beta, &stats.mean, &istd)?, stats))
}

/// Inference-mode batch norm over running statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4("batchnorm2d")?;
    check_channel_vec("gamma", gamma, c)?;
    check_channel_vec("beta", beta, c)?;
    check_channel_vec("running_mean", running_mean, c)?;
    check_channel_vec("running_var", running_var, c)?;
    let istd = inv_std(running_var.data(), eps)?;
    bn_apply(x, gamma, beta, running_mean.data(), &istd)
}

/// Moving-average update of running statistics; the running variance uses
/// the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    batch: &BnStats<T>,
    count: usize,
    momentum: f64,
) {
    let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
    for (rm, &m) in running_mean.data_mut().iter_mut().zip(&batch.mean) {
        *rm = T::from_f64_lossy((1.0 - momentum) * rm.as_f64() + momentum * m.as_f64());
    }
    for (rv, &v) in running_var.data_mut().iter_mut().zip(&batch.var) {
        *rv = T::from_f64_lossy((1.0 - momentum) * rv.as_f64() + momentum * v.as_f64() * unbias);
    }
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

/// Backward of batch norm. `train` selects whether `mean`/`var` were batch
/// statistics (and so depend on `x`) or constants.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
    dy: &Tensor<T>,
    train: bool,
) -> Result<BnGrads<T>> {
    let (n, c, h, w) = x.dims4("batchnorm2d_backward")?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("batchnorm2d_backward", format!("{:?} vs {:?}", dy.shape(), x.shape())));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let istd = inv_std(var, eps)?;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let (mu, is) = (mean[ch].as_f64(), istd[ch].as_f64());
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let g = dy.data()[i].as_f64();
                sum_dy += g;
                sum_dy_xhat += g * (x.data()[i].as_f64() - mu) * is;
            }
        }
        dgamma.push(T::from_f64_lossy(sum_dy_xhat));
        dbeta.push(T::from_f64_lossy(sum_dy));
        let gm = gamma.data()[ch].as_f64();
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let g = dy.data()[i].as_f64();
                let v = if train {
                    let xhat = (x.data()[i].as_f64() - mu) * is;
                    gm * is * (g - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    gm * is * g
                };
                dx[i] = T::from_f64_lossy(v);
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dgamma: Tensor::new(&[c], dgamma)?,
        dbeta: Tensor::new(&[c], dbeta)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("relu_backward", format!("{:?} vs {:?}", x.shape(), dy.shape())));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Max pooling; also returns, per output, the flat input index that won.
/// Ties resolve to the first maximal element in row-major window order and
/// padding never wins.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    if pad * 2 > kernel {
        return Err(Error::invalid(format!("maxpool padding {pad} exceeds half of kernel {kernel}")));
    }
    let (Some(oh), Some(ow)) = (out_extent(h, kernel, stride, pad), out_extent(w, kernel, stride, pad)) else {
        return Err(Error::shape("maxpool2d", format!("{h}x{w} input gives an empty output")));
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = x.data()[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.ok_or_else(|| Error::shape("maxpool2d", "window covers only padding"))?;
                out.push(v);
                arg.push(idx);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(x_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != dy.len() {
        return Err(Error::shape("maxpool2d_backward", "argmax/gradient length"));
    }
    let mut dx = Tensor::zeros(x_shape)?;
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}

/// Mean over the spatial axes: N×C×H×W → N×C.
pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avgpool")?;
    let hw = h * w;
    let inv = T::from_f64_lossy(1.0 / hw as f64);
    let data = x.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avgpool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = *x_shape else {
        return Err(Error::shape("global_avgpool_backward", format!("{x_shape:?}")));
    };
    if dy.shape() != [n, c] {
        return Err(Error::shape("global_avgpool_backward", format!("{:?}", dy.shape())));
    }
    let hw = h * w;
    let inv = T::from_f64_lossy(1.0 / hw as f64);
    let mut dx = Vec::with_capacity(n * c * hw);
    for &g in dy.data() {
        dx.extend(core::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(x_shape, dx)
}

/// `x (N×F) · wᵀ (F×G) + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2("linear")?;
    let (g, wf) = w.dims2("linear")?;
    if wf != f {
        return Err(Error::shape("linear", format!("input has {f} features, weight is {g}x{wf}")));
    }
    let mut out = vec![T::zero(); n * g];
    if let Some(b) = bias {
        if b.shape() != [g] {
            return Err(Error::shape("linear", format!("bias {:?} for {g} outputs", b.shape())));
        }
        for row in out.chunks_exact_mut(g) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        T::one(),
        MatRef::row_major(x.data(), n, f),
        MatRef::row_major(w.data(), g, f).t(),
        T::one(),
        &mut out,
    );
    Tensor::new(&[n, g], out)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, f) = x.dims2("linear_backward")?;
    let (g, _) = w.dims2("linear_backward")?;
    if dy.shape() != [n, g] {
        return Err(Error::shape("linear_backward", format!("{:?}", dy.shape())));
    }
    let dym = MatRef::row_major(dy.data(), n, g);
    let mut dx = vec![T::zero(); n * f];
    gemm(T::one(), dym, MatRef::row_major(w.data(), g, f), T::zero(), &mut dx);
    let mut dw = vec![T::zero(); g * f];
    gemm(T::one(), dym.t(), MatRef::row_major(x.data(), n, f), T::zero(), &mut dw);
    let mut db = vec![T::zero(); g];
    for row in dy.data().chunks_exact(g) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::new(&[n, f], dx)?,
        dw: Tensor::new(&[g, f], dw)?,
        db: Tensor::new(&[g], db)?,
    })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

/// Row-wise softmax over the class axis of an N×C matrix.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.dims2("softmax")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = y.dims2("softmax_backward")?;
    if dy.shape() != y.shape() {
        return Err(Error::shape("softmax_backward", format!("{:?} vs {:?}", dy.shape(), y.shape())));
    }
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&s, &g)| s * (g - dot)));
    }
    Tensor::new(y.shape(), dx)
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`,
/// together with the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = logits.dims2("cross_entropy")?;
    check_labels(labels, n, c)?;
    let mut total = 0.0f64;
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v.as_f64() - max)).sum::<f64>());
        total += lse - row[y].as_f64();
    }
    let probs = softmax(logits)?;
    Ok((T::from_f64_lossy(total / n as f64), probs))
}

/// `(softmax − onehot) / N`, scaled by the upstream gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize], dloss: T) -> Result<Tensor<T>> {
    let (n, c) = probs.dims2("cross_entropy_backward")?;
    check_labels(labels, n, c)?;
    let scale = dloss / T::from_f64_lossy(n as f64);
    let mut dx = probs.data().to_vec();
    for (row, &y) in dx.chunks_exact_mut(c).zip(labels) {
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::new(probs.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn one_by_one_conv_is_scalar_multiply() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.0f32]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![3.0f32]).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = random(&[1, 1, 6, 5], 1);
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        let w = Tensor::new(&[1, 1, 3, 3], k).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = random(&[1, 2, 5, 5], 2);
        let w = random(&[3, 4, 3, 3], 3);
        assert!(matches!(conv2d(&x, &w, None, 1, 1), Err(Error::Shape { .. })));
        let w = random(&[3, 2, 7, 7], 3);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_statistics_bn_is_identity() {
        let x = random(&[2, 3, 4, 4], 4);
        let ones = Tensor::full(&[3], 1.0f32).unwrap();
        let zeros = Tensor::zeros(&[3]).unwrap();
        // eps shifts the result by a factor 1/sqrt(1+eps); with eps=0 it is exact.
        let y = batchnorm_eval(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        assert_eq!(y, x);
        let y = batchnorm_eval(&x, &ones, &zeros, &zeros, &ones, BN_EPS).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs() + 1e-7);
        }
    }

    #[test]
    fn constant_channel_train_mode_outputs_beta() {
        let x = Tensor::full(&[2, 2, 3, 3], 3.7f32).unwrap();
        let gamma = Tensor::new(&[2], vec![2.0f32, -1.0]).unwrap();
        let beta = Tensor::new(&[2], vec![0.25f32, -4.0]).unwrap();
        let (y, stats) = batchnorm_train(&x, &gamma, &beta, BN_EPS).unwrap();
        assert_eq!(stats.var, vec![0.0, 0.0]);
        for s in 0..2 {
            assert!(y.data()[s * 18..s * 18 + 9].iter().all(|&v| v == 0.25));
            assert!(y.data()[s * 18 + 9..s * 18 + 18].iter().all(|&v| v == -4.0));
        }
    }

    #[test]
    fn negative_variance_rejected() {
        let x = random(&[1, 1, 2, 2], 5);
        let one = Tensor::full(&[1], 1.0f32).unwrap();
        let neg = Tensor::full(&[1], -1.0f32).unwrap();
        let r = batchnorm_eval(&x, &one, &one, &one, &neg, BN_EPS);
        assert!(matches!(r, Err(Error::NonPositiveVariance(_))));
    }

    #[test]
    fn relu_and_softmax_basics() {
        let x = Tensor::new(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let z = Tensor::full(&[2, 6], 0.3f32).unwrap();
        for &p in softmax(&z).unwrap().data() {
            assert!((p - 1.0 / 6.0).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0f32).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let z = Tensor::full(&[3, 6], 0.0f64).unwrap();
        let (loss, _) = softmax_cross_entropy(&z, &[0, 3, 5]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        let mut d = vec![0.0f32; 6];
        d[2] = 30.0;
        let z = Tensor::new(&[1, 6], d).unwrap();
        let (loss, _) = softmax_cross_entropy(&z, &[2]).unwrap();
        assert!(loss < 1e-9);
        assert!(softmax_cross_entropy(&z, &[6]).is_err());
    }
}
