//! Forward and backward kernels on flat slices.
//!
//! Sequence activations are laid out `[batch, channels, length]`, flat ones
//! `[batch, features]`. Convolution is cross-correlation (no kernel flip)
//! with zero padding.

use super::Float;
use crate::error::{Error, Result};

/// Geometry of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        conv_out_len(self.len, self.kernel, self.stride, self.padding).unwrap_or(0)
    }

    /// Output positions `t` whose tap `k` reads inside the input.
    fn valid_range(&self, k: usize, out_len: usize) -> (usize, usize) {
        let (s, p, l) = (self.stride, self.padding, self.len);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if l + p <= k {
            return (0, 0);
        }
        let hi = ((l + p - 1 - k) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * padding < kernel {
        None
    } else {
        Some((len + 2 * padding - kernel) / stride + 1)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

/// Eight-lane dot product; fixed summation order, so results are
/// deterministic while still vectorizing.
pub(crate) fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: F = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

fn axpy<F: Float>(y: &mut [F], a: F, x: &[F]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Gathers the input seen by each tap of one sample:
/// `cols[c, k, t] = x[c, t*stride + k - padding]`, zero outside the input.
fn gather_taps<F: Float>(x: &[F], d: &ConvDims, lo_len: usize, cols: &mut [F]) {
    for c in 0..d.in_ch {
        let xr = &x[c * d.len..][..d.len];
        for k in 0..d.kernel {
            let col = &mut cols[(c * d.kernel + k) * lo_len..][..lo_len];
            let (t0, t1) = d.valid_range(k, lo_len);
            col[..t0].iter_mut().for_each(|v| *v = F::zero());
            col[t1..].iter_mut().for_each(|v| *v = F::zero());
            if d.stride == 1 {
                let off = t0 + k - d.padding;
                col[t0..t1].copy_from_slice(&xr[off..off + (t1 - t0)]);
            } else {
                for t in t0..t1 {
                    col[t] = xr[t * d.stride + k - d.padding];
                }
            }
        }
    }
}

/// Adds tap gradients back onto the input positions they were read from.
fn scatter_taps<F: Float>(gcols: &[F], d: &ConvDims, lo_len: usize, gx: &mut [F]) {
    for c in 0..d.in_ch {
        let gxr = &mut gx[c * d.len..][..d.len];
        for k in 0..d.kernel {
            let col = &gcols[(c * d.kernel + k) * lo_len..][..lo_len];
            let (t0, t1) = d.valid_range(k, lo_len);
            if d.stride == 1 {
                let off = t0 + k - d.padding;
                for (g, &v) in gxr[off..off + (t1 - t0)].iter_mut().zip(&col[t0..t1]) {
                    *g += v;
                }
            } else {
                for t in t0..t1 {
                    gxr[t * d.stride + k - d.padding] += col[t];
                }
            }
        }
    }
}

/// `out[b,o,t] = bias[o] + sum_{c,k} x[b,c,t*stride+k-padding] * w[o,c,k]`.
pub fn conv1d_forward<F: Float>(x: &[F], w: &[F], bias: &[F], d: ConvDims) -> Result<Vec<F>> {
    let lo_len = conv_out_len(d.len, d.kernel, d.stride, d.padding)
        .ok_or_else(|| Error::Shape(format!("conv input length {} too short for {d:?}", d.len)))?;
    check_len("conv input", x.len(), d.batch * d.in_ch * d.len)?;
    check_len("conv weight", w.len(), d.out_ch * d.in_ch * d.kernel)?;
    check_len("conv bias", bias.len(), d.out_ch)?;
    let taps = d.in_ch * d.kernel;
    let mut cols = vec![F::zero(); taps * lo_len];
    let mut out = vec![F::zero(); d.batch * d.out_ch * lo_len];
    for b in 0..d.batch {
        gather_taps(&x[b * d.in_ch * d.len..][..d.in_ch * d.len], &d, lo_len, &mut cols);
        for o in 0..d.out_ch {
            let row = &mut out[(b * d.out_ch + o) * lo_len..][..lo_len];
            row.iter_mut().for_each(|v| *v = bias[o]);
            for (j, &wj) in w[o * taps..][..taps].iter().enumerate() {
                axpy(row, wj, &cols[j * lo_len..][..lo_len]);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<F> {
    pub x: Option<Vec<F>>,
    pub w: Vec<F>,
    pub bias: Vec<F>,
}

/// Exact gradients of [`conv1d_forward`]. `need_x = false` skips the input
/// gradient (e.g. for the first layer).
pub fn conv1d_backward<F: Float>(x: &[F], w: &[F], grad_out: &[F], d: ConvDims, need_x: bool) -> Result<ConvGrads<F>> {
    let lo_len = d.out_len();
    check_len("conv input", x.len(), d.batch * d.in_ch * d.len)?;
    check_len("conv weight", w.len(), d.out_ch * d.in_ch * d.kernel)?;
    check_len("conv grad", grad_out.len(), d.batch * d.out_ch * lo_len)?;
    let taps = d.in_ch * d.kernel;
    let mut cols = vec![F::zero(); taps * lo_len];
    let mut gcols = vec![F::zero(); if need_x { taps * lo_len } else { 0 }];
    let mut gw = vec![F::zero(); w.len()];
    let mut gb = vec![F::zero(); d.out_ch];
    let mut gx = need_x.then(|| vec![F::zero(); x.len()]);
    for b in 0..d.batch {
        gather_taps(&x[b * d.in_ch * d.len..][..d.in_ch * d.len], &d, lo_len, &mut cols);
        gcols.iter_mut().for_each(|v| *v = F::zero());
        for o in 0..d.out_ch {
            let g = &grad_out[(b * d.out_ch + o) * lo_len..][..lo_len];
            gb[o] += g.iter().copied().sum::<F>();
            for j in 0..taps {
                gw[o * taps + j] += dot(g, &cols[j * lo_len..][..lo_len]);
                if need_x {
                    axpy(&mut gcols[j * lo_len..][..lo_len], w[o * taps + j], g);
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            scatter_taps(&gcols, &d, lo_len, &mut gx[b * d.in_ch * d.len..][..d.in_ch * d.len]);
        }
    }
    Ok(ConvGrads { x: gx, w: gw, bias: gb })
}

/// Per-channel moments of a `[batch, channels, len]` activation (population variance).
pub fn channel_moments<F: Float>(x: &[F], batch: usize, ch: usize, len: usize) -> (Vec<F>, Vec<F>) {
    let n = F::of_usize(batch * len);
    let mut mean = vec![F::zero(); ch];
    let mut var = vec![F::zero(); ch];
    for c in 0..ch {
        let mut s = F::zero();
        for b in 0..batch {
            s += x[(b * ch + c) * len..][..len].iter().copied().sum::<F>();
        }
        let m = s / n;
        let mut v = F::zero();
        for b in 0..batch {
            for &xv in &x[(b * ch + c) * len..][..len] {
                let dlt = xv - m;
                v += dlt * dlt;
            }
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

/// What a batch-norm forward keeps for its backward.
#[derive(Debug, Clone)]
pub struct BnCache<F> {
    pub x_hat: Vec<F>,
    pub inv_std: Vec<F>,
    /// Whether the moments came from this batch (and so depend on `x`).
    pub batch_moments: bool,
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta` per channel, using the
/// supplied moments.
pub fn batchnorm_apply<F: Float>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    mean: &[F],
    var: &[F],
    eps: F,
    dims: (usize, usize, usize),
    batch_moments: bool,
) -> (Vec<F>, BnCache<F>) {
    let (batch, ch, len) = dims;
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![F::zero(); x.len()];
    let mut y = vec![F::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * len;
            for i in base..base + len {
                let h = (x[i] - mean[c]) * inv_std[c];
                x_hat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        y,
        BnCache {
            x_hat,
            inv_std,
            batch_moments,
        },
    )
}

/// Gradients `(x, gamma, beta)` of [`batchnorm_apply`]. With batch moments the
/// dependence of mean and variance on `x` is included.
pub fn batchnorm_backward<F: Float>(
    grad_out: &[F],
    gamma: &[F],
    cache: &BnCache<F>,
    dims: (usize, usize, usize),
    need_x: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let (batch, ch, len) = dims;
    let n = F::of_usize(batch * len);
    let mut gg = vec![F::zero(); ch];
    let mut gbeta = vec![F::zero(); ch];
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * len;
            for i in base..base + len {
                gbeta[c] += grad_out[i];
                gg[c] += grad_out[i] * cache.x_hat[i];
            }
        }
    }
    let gx = need_x.then(|| {
        let mut gx = vec![F::zero(); grad_out.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * len;
                let k = gamma[c] * cache.inv_std[c];
                for i in base..base + len {
                    gx[i] = if cache.batch_moments {
                        k * (grad_out[i] - gbeta[c] / n - cache.x_hat[i] * gg[c] / n)
                    } else {
                        k * grad_out[i]
                    };
                }
            }
        }
        gx
    });
    (gx, gg, gbeta)
}

pub fn relu<F: Float>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect()
}

/// Passes gradient where the forward output was positive.
pub fn relu_backward<F: Float>(out: &[F], grad_out: &[F]) -> Vec<F> {
    out.iter()
        .zip(grad_out)
        .map(|(&o, &g)| if o > F::zero() { g } else { F::zero() })
        .collect()
}

/// Max pooling without padding; returns outputs and the flat argmax index of
/// each output (first index on ties).
pub fn maxpool1d<F: Float>(x: &[F], rows: usize, len: usize, width: usize, stride: usize) -> (Vec<F>, Vec<usize>) {
    let out_len = conv_out_len(len, width, stride, 0).unwrap_or(0);
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        for t in 0..out_len {
            let start = r * len + t * stride;
            let mut best = start;
            for i in start + 1..start + width {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

pub fn maxpool1d_backward<F: Float>(argmax: &[usize], grad_out: &[F], input_len: usize) -> Vec<F> {
    let mut gx = vec![F::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gx[i] += g;
    }
    gx
}

/// Mean over the length axis: `[B, C, L] -> [B, C]`.
pub fn global_avg_pool<F: Float>(x: &[F], rows: usize, len: usize) -> Vec<F> {
    let n = F::of_usize(len);
    (0..rows).map(|r| x[r * len..][..len].iter().copied().sum::<F>() / n).collect()
}

pub fn global_avg_pool_backward<F: Float>(grad_out: &[F], len: usize) -> Vec<F> {
    let n = F::of_usize(len);
    grad_out.iter().flat_map(|&g| std::iter::repeat_n(g / n, len)).collect()
}

/// `y[b,o] = bias[o] + sum_i w[o,i] * x[b,i]`; `w` is `[out, in]`.
pub fn fc_forward<F: Float>(x: &[F], w: &[F], bias: &[F], batch: usize, inputs: usize, outputs: usize) -> Result<Vec<F>> {
    check_len("fc input", x.len(), batch * inputs)?;
    check_len("fc weight", w.len(), outputs * inputs)?;
    check_len("fc bias", bias.len(), outputs)?;
    let mut y = Vec::with_capacity(batch * outputs);
    for b in 0..batch {
        let xr = &x[b * inputs..][..inputs];
        for o in 0..outputs {
            let wr = &w[o * inputs..][..inputs];
            let mut acc = bias[o];
            for (&wv, &xv) in wr.iter().zip(xr) {
                acc += wv * xv;
            }
            y.push(acc);
        }
    }
    Ok(y)
}

/// Gradients `(x, w, bias)` of [`fc_forward`].
pub fn fc_backward<F: Float>(
    x: &[F],
    w: &[F],
    grad_out: &[F],
    batch: usize,
    inputs: usize,
    outputs: usize,
    need_x: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let mut gw = vec![F::zero(); w.len()];
    let mut gb = vec![F::zero(); outputs];
    let mut gx = need_x.then(|| vec![F::zero(); x.len()]);
    for b in 0..batch {
        let xr = &x[b * inputs..][..inputs];
        for o in 0..outputs {
            let g = grad_out[b * outputs + o];
            gb[o] += g;
            let gwr = &mut gw[o * inputs..][..inputs];
            for (gwv, &xv) in gwr.iter_mut().zip(xr) {
                *gwv += g * xv;
            }
            if let Some(gx) = gx.as_mut() {
                let wr = &w[o * inputs..][..inputs];
                for (gxv, &wv) in gx[b * inputs..][..inputs].iter_mut().zip(wr) {
                    *gxv += g * wv;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Row-wise softmax of `[batch, classes]` logits.
pub fn softmax<F: Float>(logits: &[F], classes: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: F = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

/// Mean negative log-likelihood and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<F: Float>(logits: &[F], labels: &[usize], classes: usize) -> Result<(F, Vec<F>)> {
    let batch = labels.len();
    check_len("logits", logits.len(), batch * classes)?;
    if batch == 0 {
        return Err(Error::EmptyInput("cross-entropy over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let bf = F::of_usize(batch);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        loss += (lse - row[label]).max(F::zero());
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == label { F::one() } else { F::zero() };
            grad.push((p - onehot) / bf);
        }
    }
    Ok((loss / bf, grad))
}

/// Gradient reversal: identity forward, `-lambda * g` backward.
pub fn grl_forward<F: Float>(x: &[F]) -> Vec<F> {
    x.to_vec()
}

pub fn grl_backward<F: Float>(grad_out: &[F], lambda: F) -> Vec<F> {
    let k = -lambda;
    grad_out.iter().map(|&g| k * g).collect()
}
