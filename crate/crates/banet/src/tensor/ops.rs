//! Kernel set: convolution, normalizations, attention primitives, resampling.
//!
//! Numeric semantics, pinned:
//! - zero-fill padding for convolution
//! - reductions accumulate in f64, results rounded to the element type
//! - softmax is stabilized by max subtraction
//! - bilinear upsampling uses half-pixel-center source coordinates with edge
//!   clamping; nearest copies source pixel `floor(dst / factor)`
//!
//! All functions are pure and deterministic. Heavy kernels parallelize over
//! output elements with rayon; every output element is written by exactly one
//! task, so results are bit-stable across runs and thread counts.

use rayon::prelude::*;

use super::{dims3, dims4, Element, TensorOf};
use crate::error::{ensure, Result};

/// Below this many output elements the sequential path avoids rayon overhead.
const PAR_THRESHOLD: usize = 4096;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Parameters of a 2-D convolution layer.
///
/// `weight` is [outC, inC/groups, kH, kW]. Depthwise convolution is the
/// `groups == inC == outC` case.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Element = f32> {
    pub weight: TensorOf<T>,
    pub bias: Option<TensorOf<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn apply(&self, x: &TensorOf<T>) -> Result<TensorOf<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups)
    }
}

/// Output spatial size of a convolution: floor((s + 2p - k)/stride) + 1.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// 2-D convolution with zero padding and channel groups.
pub fn conv2d<T: Element>(
    x: &TensorOf<T>,
    weight: &TensorOf<T>,
    bias: Option<&TensorOf<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<TensorOf<T>> {
    let (n, c, h, w) = dims4(x, "conv2d input")?;
    let (out_c, wc, kh, kw) = dims4(weight, "conv2d weight")?;
    ensure!(stride >= 1, "conv2d stride must be >= 1, got {stride}");
    ensure!(groups >= 1, "conv2d groups must be >= 1, got {groups}");
    ensure!(
        c % groups == 0 && out_c % groups == 0,
        "conv2d channels not divisible by groups: inC={c} outC={out_c} groups={groups}"
    );
    ensure!(
        wc == c / groups,
        "conv2d weight expects {} input channels per group, input has {} (groups={})",
        wc,
        c / groups,
        groups
    );
    ensure!(
        h + 2 * padding >= kh && w + 2 * padding >= kw,
        "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
        h + 2 * padding,
        w + 2 * padding
    );
    if let Some(b) = bias {
        ensure!(
            b.shape() == [out_c],
            "conv2d bias shape {:?} does not match outC {}",
            b.shape(),
            out_c
        );
    }

    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let mut out = TensorOf::<T>::zeros(&[n, out_c, oh, ow]);

    if groups == c && out_c == c && wc == 1 {
        depthwise_conv(x, weight, bias, stride, padding, &mut out, kh, kw);
        return Ok(out);
    }

    // im2col + matmul per (image, group).
    let cg = c / groups;
    let ocg = out_c / groups;
    let k_len = cg * kh * kw;
    let plane = oh * ow;
    let mut col = vec![T::zero(); k_len * plane];
    for ni in 0..n {
        for g in 0..groups {
            im2col(x, ni, g * cg, kh, kw, stride, padding, oh, ow, &mut col);
            let wslab = &weight.data()[g * ocg * k_len..(g + 1) * ocg * k_len];
            let oslab = &mut out.data_mut()
                [ni * out_c * plane + g * ocg * plane..ni * out_c * plane + (g + 1) * ocg * plane];
            matmul_2d_into(wslab, &col, oslab, ocg, k_len, plane);
        }
    }

    if let Some(b) = bias {
        let bd = b.data();
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, chunk)| {
                let add = bd[i % out_c];
                for v in chunk {
                    *v += add;
                }
            });
    }
    Ok(out)
}

/// Gathers the receptive fields of one image's channel group into a
/// [cg*kh*kw, oh*ow] column matrix. Out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Element>(
    x: &TensorOf<T>,
    ni: usize,
    c0: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let (_, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xd = x.data();
    let plane = oh * ow;
    col.par_chunks_mut(plane).enumerate().for_each(|(row, dst)| {
        let ci = c0 + row / (kh * kw);
        let ky = (row / kw) % kh;
        let kx = row % kw;
        let src_base = (ni * c + ci) * h * w;
        for oy in 0..oh {
            let iy = (oy * stride + ky) as isize - padding as isize;
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            if iy < 0 || iy >= h as isize {
                for v in drow.iter_mut() {
                    *v = T::zero();
                }
                continue;
            }
            let src_row = src_base + iy as usize * w;
            for (ox, v) in drow.iter_mut().enumerate() {
                let ix = (ox * stride + kx) as isize - padding as isize;
                *v = if ix < 0 || ix >= w as isize {
                    T::zero()
                } else {
                    xd[src_row + ix as usize]
                };
            }
        }
    });
}

fn depthwise_conv<T: Element>(
    x: &TensorOf<T>,
    weight: &TensorOf<T>,
    bias: Option<&TensorOf<T>>,
    stride: usize,
    padding: usize,
    out: &mut TensorOf<T>,
    kh: usize,
    kw: usize,
) {
    let (_, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let xd = x.data();
    let wd = weight.data();
    let plane = oh * ow;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(nc, dst)| {
            let ci = nc % c;
            let src_base = nc * h * w;
            let kern = &wd[ci * kh * kw..(ci + 1) * kh * kw];
            let b = bias.map_or(0.0, |b| b.data()[ci].f64());
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = src_base + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[row + ix as usize].f64() * kern[ky * kw + kx].f64();
                        }
                    }
                    dst[oy * ow + ox] = T::from64(acc);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

/// Batched matrix product: [..., M, K] x [..., K, P] -> [..., M, P].
/// Leading batch dimensions must match exactly.
pub fn matmul<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    ensure!(
        a.rank() >= 2 && b.rank() >= 2,
        "matmul needs rank >= 2, got {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let (ar, br) = (a.rank(), b.rank());
    ensure!(
        a.shape()[..ar - 2] == b.shape()[..br - 2] && ar == br,
        "matmul batch dims differ: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (k2, p) = (b.shape()[br - 2], b.shape()[br - 1]);
    ensure!(
        k == k2,
        "matmul inner dims disagree: {:?} x {:?} (K {k} vs {k2})",
        a.shape(),
        b.shape()
    );
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.extend([m, p]);
    let mut out = TensorOf::<T>::zeros(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    out.data_mut()
        .par_chunks_mut(p)
        .enumerate()
        .for_each_init(
            || vec![0.0f64; p.min(ACC_BLOCK)],
            |acc, (row, orow)| {
                let bi = row / m;
                let i = row % m;
                let arow = &ad[(bi * m + i) * k..(bi * m + i + 1) * k];
                let bmat = &bd[bi * k * p..(bi + 1) * k * p];
                matmul_row(arow, bmat, orow, k, p, acc);
            },
        );
    let _ = batch;
    Ok(out)
}

const ACC_BLOCK: usize = 512;

/// One output row: orow[j] = sum_k arow[k] * b[k, j], f64 accumulation,
/// blocked over j so the accumulator stays in cache.
fn matmul_row<T: Element>(arow: &[T], bmat: &[T], orow: &mut [T], k: usize, p: usize, acc: &mut [f64]) {
    let mut j0 = 0;
    while j0 < p {
        let jb = (p - j0).min(ACC_BLOCK);
        let acc = &mut acc[..jb];
        acc.fill(0.0);
        for (kk, &av) in arow.iter().enumerate().take(k) {
            let av = av.f64();
            let brow = &bmat[kk * p + j0..kk * p + j0 + jb];
            for (a, &bv) in acc.iter_mut().zip(brow) {
                *a += av * bv.f64();
            }
        }
        for (o, &a) in orow[j0..j0 + jb].iter_mut().zip(acc.iter()) {
            *o = T::from64(a);
        }
        j0 += jb;
    }
}

/// Scatter-adds a [cg*kh*kw, oh*ow] column matrix back onto the input
/// gradient of one image's channel group; exact adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Element>(
    gx: &mut TensorOf<T>,
    ni: usize,
    c0: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &[T],
) {
    let (c, h, w) = (gx.shape()[1], gx.shape()[2], gx.shape()[3]);
    let plane = oh * ow;
    let base = (ni * c + c0) * h * w;
    gx.data_mut()[base..base + cg * h * w]
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ci, dst)| {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = &col[((ci * kh + ky) * kw + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[drow + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        });
}

/// out[M, K2] = a[M, P] x b[K2, P]^T (rows of `b` as columns).
pub(crate) fn matmul_2d_abt<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, k2: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), k2 * p);
    debug_assert_eq!(out.len(), m * k2);
    out.par_chunks_mut(k2).enumerate().for_each(|(i, orow)| {
        let arow = &a[i * p..(i + 1) * p];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0f64;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x.f64() * y.f64();
            }
            *o = T::from64(acc);
        }
    });
}

/// out[K, P] = a[M, K]^T x b[M, P].
pub(crate) fn matmul_2d_atb<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(out.len(), k * p);
    out.par_chunks_mut(p).enumerate().for_each_init(
        || vec![0.0f64; p.min(ACC_BLOCK)],
        |acc, (kk, orow)| {
            let mut j0 = 0;
            while j0 < p {
                let jb = (p - j0).min(ACC_BLOCK);
                let acc = &mut acc[..jb];
                acc.fill(0.0);
                for i in 0..m {
                    let av = a[i * k + kk].f64();
                    let brow = &b[i * p + j0..i * p + j0 + jb];
                    for (s, &bv) in acc.iter_mut().zip(brow) {
                        *s += av * bv.f64();
                    }
                }
                for (o, &s) in orow[j0..j0 + jb].iter_mut().zip(acc.iter()) {
                    *o = T::from64(s);
                }
                j0 += jb;
            }
        },
    );
}

/// out[M, P] = a[M, K] x b[K, P] over raw slices.
pub(crate) fn matmul_2d_into<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    out.par_chunks_mut(p).enumerate().for_each_init(
        || vec![0.0f64; p.min(ACC_BLOCK)],
        |acc, (i, orow)| {
            matmul_row(&a[i * k..(i + 1) * k], b, orow, k, p, acc);
        },
    );
}

/// Token-wise linear map: x[..., C] . w[C, F] + b[F].
pub fn linear<T: Element>(x: &TensorOf<T>, w: &TensorOf<T>, b: Option<&TensorOf<T>>) -> Result<TensorOf<T>> {
    ensure!(w.rank() == 2, "linear weight must be [C, F], got {:?}", w.shape());
    let c = *x.shape().last().unwrap();
    ensure!(
        w.shape()[0] == c,
        "linear weight expects {} input features, tokens have {c}",
        w.shape()[0]
    );
    let f = w.shape()[1];
    let q = x.len() / c;
    let mut out = TensorOf::<T>::zeros(&[q, f]);
    matmul_2d_into(x.data(), w.data(), out.data_mut(), q, c, f);
    if let Some(b) = b {
        ensure!(b.shape() == [f], "linear bias shape {:?} vs F={f}", b.shape());
        let bd = b.data();
        for row in out.data_mut().chunks_mut(f) {
            for (o, &bb) in row.iter_mut().zip(bd) {
                *o = *o + bb;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = f;
    out.reshape(&shape)
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

fn check_norm_params<T: Element>(c: usize, gamma: &TensorOf<T>, beta: &TensorOf<T>, eps: f64) -> Result<()> {
    ensure!(eps > 0.0, "normalization eps must be > 0, got {eps}");
    ensure!(
        gamma.len() == c && beta.len() == c,
        "per-channel parameter length ({} / {}) does not match C={c}",
        gamma.len(),
        beta.len()
    );
    Ok(())
}

/// Inference-mode batch norm: running statistics, per-channel affine.
pub fn batch_norm_infer<T: Element>(
    x: &TensorOf<T>,
    gamma: &TensorOf<T>,
    beta: &TensorOf<T>,
    running_mean: &TensorOf<T>,
    running_var: &TensorOf<T>,
    eps: f64,
) -> Result<TensorOf<T>> {
    let (_, c, _, _) = dims4(x, "batch_norm input")?;
    check_norm_params(c, gamma, beta, eps)?;
    ensure!(
        running_mean.len() == c && running_var.len() == c,
        "running stats length ({} / {}) does not match C={c}",
        running_mean.len(),
        running_var.len()
    );
    let plane = x.shape()[2] * x.shape()[3];
    let mut out = TensorOf::<T>::zeros(x.shape());
    let (g, b, mu, var) = (gamma.data(), beta.data(), running_mean.data(), running_var.data());
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(nc, dst)| {
            let ci = nc % c;
            let inv = (var[ci].f64() + eps).sqrt().recip();
            let (m, gc, bc) = (mu[ci].f64(), g[ci].f64(), b[ci].f64());
            for (o, &v) in dst.iter_mut().zip(&xd[nc * plane..(nc + 1) * plane]) {
                *o = T::from64((v.f64() - m) * inv * gc + bc);
            }
        });
    Ok(out)
}

/// Training-mode batch norm over (N, H, W) per channel.
///
/// Returns the normalized tensor plus the batch mean and (biased) variance,
/// which the caller folds into the running statistics.
pub fn batch_norm_train<T: Element>(
    x: &TensorOf<T>,
    gamma: &TensorOf<T>,
    beta: &TensorOf<T>,
    eps: f64,
) -> Result<(TensorOf<T>, TensorOf<T>, TensorOf<T>)> {
    let (n, c, h, w) = dims4(x, "batch_norm input")?;
    check_norm_params(c, gamma, beta, eps)?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let xd = x.data();

    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for &v in &xd[base..base + plane] {
                    let v = v.f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            (mean, var)
        })
        .collect();

    let mut out = TensorOf::<T>::zeros(x.shape());
    let (g, b) = (gamma.data(), beta.data());
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(nc, dst)| {
            let ci = nc % c;
            let (mean, var) = stats[ci];
            let inv = (var + eps).sqrt().recip();
            let (gc, bc) = (g[ci].f64(), b[ci].f64());
            for (o, &v) in dst.iter_mut().zip(&xd[nc * plane..(nc + 1) * plane]) {
                *o = T::from64((v.f64() - mean) * inv * gc + bc);
            }
        });

    let mean_t = TensorOf::from_fn(&[c], |i| T::from64(stats[i].0));
    let var_t = TensorOf::from_fn(&[c], |i| T::from64(stats[i].1));
    Ok((out, mean_t, var_t))
}

/// running <- (1 - momentum) * running + momentum * batch, elementwise.
pub fn update_running_stat<T: Element>(running: &mut TensorOf<T>, batch: &TensorOf<T>, momentum: f64) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = T::from64(r.f64() * (1.0 - momentum) + b.f64() * momentum);
    }
}

/// Layer norm over the channel axis of a token tensor [N, L, C].
pub fn layer_norm<T: Element>(
    x: &TensorOf<T>,
    gamma: &TensorOf<T>,
    beta: &TensorOf<T>,
    eps: f64,
) -> Result<TensorOf<T>> {
    let (_, _, c) = dims3(x, "layer_norm input")?;
    check_norm_params(c, gamma, beta, eps)?;
    let mut out = TensorOf::<T>::zeros(x.shape());
    let (g, b) = (gamma.data(), beta.data());
    let xd = x.data();
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(tok, dst)| {
            let src = &xd[tok * c..(tok + 1) * c];
            let mean = src.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = (var + eps).sqrt().recip();
            for ((o, &v), (gc, bc)) in dst.iter_mut().zip(src).zip(g.iter().zip(b)) {
                *o = T::from64((v.f64() - mean) * inv * gc.f64() + bc.f64());
            }
        });
    Ok(out)
}

/// Instance norm: each (n, c) spatial plane to zero mean, unit variance.
/// No affine parameters.
pub fn instance_norm<T: Element>(x: &TensorOf<T>, eps: f64) -> Result<TensorOf<T>> {
    ensure!(eps > 0.0, "normalization eps must be > 0, got {eps}");
    let (_, _, h, w) = dims4(x, "instance_norm input")?;
    let plane = h * w;
    let xd = x.data();
    let mut out = TensorOf::<T>::zeros(x.shape());
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(nc, dst)| {
            let src = &xd[nc * plane..(nc + 1) * plane];
            let mean = src.iter().map(|v| v.f64()).sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / plane as f64;
            let inv = (var + eps).sqrt().recip();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = T::from64((v.f64() - mean) * inv);
            }
        });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Softmax and activations
// ---------------------------------------------------------------------------

/// Softmax along `axis`, stabilized by max subtraction. Slices along the
/// axis sum to 1.
pub fn softmax<T: Element>(x: &TensorOf<T>, axis: usize) -> Result<TensorOf<T>> {
    ensure!(
        axis < x.rank(),
        "softmax axis {axis} out of range for shape {:?}",
        x.shape()
    );
    let a = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let xd = x.data();
    let mut out = TensorOf::<T>::zeros(x.shape());
    let od = out.data_mut();
    let slice_fn = |o: usize, i: usize, od: &mut [T]| {
        let base = o * a * inner + i;
        let mut mx = f64::NEG_INFINITY;
        for j in 0..a {
            mx = mx.max(xd[base + j * inner].f64());
        }
        let mut sum = 0.0f64;
        for j in 0..a {
            let e = (xd[base + j * inner].f64() - mx).exp();
            od[base + j * inner] = T::from64(e);
            sum += e;
        }
        for j in 0..a {
            od[base + j * inner] = T::from64(od[base + j * inner].f64() / sum);
        }
    };
    if outer * inner >= 64 && inner == 1 {
        od.par_chunks_mut(a).enumerate().for_each(|(o, chunk)| {
            let mut mx = f64::NEG_INFINITY;
            let src = &xd[o * a..(o + 1) * a];
            for v in src {
                mx = mx.max(v.f64());
            }
            let mut sum = 0.0f64;
            for (c, &v) in chunk.iter_mut().zip(src) {
                let e = (v.f64() - mx).exp();
                *c = T::from64(e);
                sum += e;
            }
            for c in chunk.iter_mut() {
                *c = T::from64(c.f64() / sum);
            }
        });
    } else {
        for o in 0..outer {
            for i in 0..inner {
                slice_fn(o, i, od);
            }
        }
    }
    Ok(out)
}

fn map<T: Element>(x: &TensorOf<T>, f: impl Fn(T) -> T + Sync + Send) -> TensorOf<T> {
    let mut out = TensorOf::<T>::zeros(x.shape());
    if x.len() >= PAR_THRESHOLD {
        out.data_mut()
            .par_iter_mut()
            .zip(x.data().par_iter())
            .for_each(|(o, &v)| *o = f(v));
    } else {
        for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
            *o = f(v);
        }
    }
    out
}

pub fn relu<T: Element>(x: &TensorOf<T>) -> TensorOf<T> {
    map(x, |v| v.max(T::zero()))
}

pub fn sigmoid<T: Element>(x: &TensorOf<T>) -> TensorOf<T> {
    map(x, |v| T::from64(sigmoid64(v.f64())))
}

pub(crate) fn sigmoid64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2))).
pub fn gelu<T: Element>(x: &TensorOf<T>) -> TensorOf<T> {
    map(x, |v| {
        let v64 = v.f64();
        T::from64(0.5 * v64 * (1.0 + super::element::erf64(v64 / std::f64::consts::SQRT_2)))
    })
}

pub fn sqrt_elem<T: Element>(x: &TensorOf<T>) -> TensorOf<T> {
    map(x, |v| v.sqrt())
}

// ---------------------------------------------------------------------------
// Elementwise pairs, scalars, broadcasting
// ---------------------------------------------------------------------------

fn zip<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>, what: &str, f: impl Fn(T, T) -> T + Sync + Send) -> Result<TensorOf<T>> {
    ensure!(
        a.shape() == b.shape(),
        "{what} requires identical shapes, got {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = TensorOf::<T>::zeros(a.shape());
    if a.len() >= PAR_THRESHOLD {
        out.data_mut()
            .par_iter_mut()
            .zip(a.data().par_iter().zip(b.data().par_iter()))
            .for_each(|(o, (&x, &y))| *o = f(x, y));
    } else {
        for (o, (&x, &y)) in out.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
            *o = f(x, y);
        }
    }
    Ok(out)
}

pub fn add<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    zip(a, b, "add", |x, y| x + y)
}

/// Elementwise product.
pub fn hadamard<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    zip(a, b, "hadamard", |x, y| x * y)
}

pub fn scale<T: Element>(x: &TensorOf<T>, s: f64) -> TensorOf<T> {
    map(x, |v| T::from64(v.f64() * s))
}

pub fn add_scalar<T: Element>(x: &TensorOf<T>, s: f64) -> TensorOf<T> {
    map(x, |v| T::from64(v.f64() + s))
}

/// Strides of a shape, row-major.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Elementwise binary op where `b` may have size-1 dims broadcast against `a`.
fn zip_broadcast<T: Element>(
    a: &TensorOf<T>,
    b: &TensorOf<T>,
    what: &str,
    f: impl Fn(T, T) -> T + Sync + Send,
) -> Result<TensorOf<T>> {
    ensure!(
        a.rank() == b.rank(),
        "{what}: rank mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    for (i, (&da, &db)) in a.shape().iter().zip(b.shape()).enumerate() {
        ensure!(
            db == da || db == 1,
            "{what}: dim {i} of {:?} is not broadcastable against {:?}",
            b.shape(),
            a.shape()
        );
    }
    let ast = strides(a.shape());
    let bst = strides(b.shape());
    // stride 0 on broadcast axes
    let bst: Vec<usize> = bst
        .iter()
        .zip(b.shape())
        .map(|(&s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = TensorOf::<T>::zeros(a.shape());
    let (ad, bd) = (a.data(), b.data());
    let shape = a.shape().to_vec();
    out.data_mut().par_iter_mut().enumerate().for_each(|(lin, o)| {
        let mut rem = lin;
        let mut bidx = 0;
        for (i, &st) in ast.iter().enumerate() {
            let coord = rem / st;
            rem %= st;
            bidx += coord * bst[i];
            let _ = shape[i];
        }
        *o = f(ad[lin], bd[bidx]);
    });
    Ok(out)
}

pub fn bcast_add<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    zip_broadcast(a, b, "bcast_add", |x, y| x + y)
}

pub fn bcast_mul<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    zip_broadcast(a, b, "bcast_mul", |x, y| x * y)
}

pub fn bcast_div<T: Element>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    zip_broadcast(a, b, "bcast_div", |x, y| x / y)
}

/// Sum over one axis, keeping it as size 1.
pub fn sum_axis<T: Element>(x: &TensorOf<T>, axis: usize) -> Result<TensorOf<T>> {
    ensure!(
        axis < x.rank(),
        "sum_axis axis {axis} out of range for shape {:?}",
        x.shape()
    );
    let a = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    let xd = x.data();
    let mut out = TensorOf::<T>::zeros(&shape);
    out.data_mut().par_iter_mut().enumerate().for_each(|(lin, o)| {
        let oi = lin / inner;
        let ii = lin % inner;
        let base = oi * a * inner + ii;
        let mut acc = 0.0f64;
        for j in 0..a {
            acc += xd[base + j * inner].f64();
        }
        *o = T::from64(acc);
    });
    let _ = outer;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Layout: permute, token reshape, concat
// ---------------------------------------------------------------------------

/// Permutes axes: out[idx] = in[idx mapped through perm].
pub fn permute<T: Element>(x: &TensorOf<T>, perm: &[usize]) -> Result<TensorOf<T>> {
    ensure!(
        perm.len() == x.rank(),
        "permute {:?} does not match rank of {:?}",
        perm,
        x.shape()
    );
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        ensure!(p < perm.len() && !seen[p], "permute {:?} is not a permutation", perm);
        seen[p] = true;
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = TensorOf::<T>::zeros(&out_shape);
    let xd = x.data();
    out.data_mut().par_iter_mut().enumerate().for_each(|(lin, o)| {
        let mut rem = lin;
        let mut src = 0;
        for (i, &st) in out_strides.iter().enumerate() {
            let coord = rem / st;
            rem %= st;
            src += coord * in_strides[perm[i]];
        }
        *o = xd[src];
    });
    Ok(out)
}

/// [N, C, H, W] -> [N, H*W, C] token layout.
pub fn nchw_to_tokens<T: Element>(x: &TensorOf<T>) -> Result<TensorOf<T>> {
    let (n, c, h, w) = dims4(x, "nchw_to_tokens input")?;
    permute(x, &[0, 2, 3, 1])?.reshape(&[n, h * w, c])
}

/// [N, H*W, C] -> [N, C, H, W]; inverse of [`nchw_to_tokens`].
pub fn tokens_to_nchw<T: Element>(x: &TensorOf<T>, h: usize, w: usize) -> Result<TensorOf<T>> {
    let (n, l, c) = dims3(x, "tokens_to_nchw input")?;
    ensure!(
        l == h * w,
        "token count {l} does not factor into spatial shape {h}x{w}"
    );
    permute(&x.reshape(&[n, h, w, c])?, &[0, 3, 1, 2])
}

/// Concatenation along `axis`; all other dims must agree.
pub fn concat<T: Element>(xs: &[&TensorOf<T>], axis: usize) -> Result<TensorOf<T>> {
    ensure!(!xs.is_empty(), "concat of an empty list");
    let rank = xs[0].rank();
    ensure!(axis < rank, "concat axis {axis} out of range for rank {rank}");
    for x in xs {
        ensure!(x.rank() == rank, "concat rank mismatch");
        for i in 0..rank {
            ensure!(
                i == axis || x.shape()[i] == xs[0].shape()[i],
                "concat dim {i} mismatch: {:?} vs {:?}",
                x.shape(),
                xs[0].shape()
            );
        }
    }
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let outer: usize = out_shape[..axis].iter().product();
    let mut out = TensorOf::<T>::zeros(&out_shape);
    let od = out.data_mut();
    let mut dst = 0;
    for o in 0..outer {
        for x in xs {
            let slab = x.shape()[axis] * inner;
            od[dst..dst + slab].copy_from_slice(&x.data()[o * slab..(o + 1) * slab]);
            dst += slab;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Upsampling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for UpsampleMode {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(crate::error::Error::InvalidArgument(format!(
                "unknown upsample mode '{other}' (expected nearest|bilinear)"
            ))),
        }
    }
}

/// Integer-factor upsampling of [N, C, H, W].
///
/// Nearest copies source pixel floor(dst/f). Bilinear samples the source at
/// (dst + 0.5)/f - 0.5 with edge clamping.
pub fn upsample<T: Element>(x: &TensorOf<T>, factor: usize, mode: UpsampleMode) -> Result<TensorOf<T>> {
    ensure!(factor >= 1, "upsample factor must be >= 1, got {factor}");
    let (n, c, h, w) = dims4(x, "upsample input")?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = TensorOf::<T>::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let f = factor as f64;
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(nc, dst)| {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            match mode {
                UpsampleMode::Nearest => {
                    for oy in 0..oh {
                        let iy = oy / factor;
                        for ox in 0..ow {
                            dst[oy * ow + ox] = src[iy * w + ox / factor];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for oy in 0..oh {
                        let sy = ((oy as f64 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f64);
                        let y0 = sy.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let wy = sy - y0 as f64;
                        for ox in 0..ow {
                            let sx = ((ox as f64 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f64);
                            let x0 = sx.floor() as usize;
                            let x1 = (x0 + 1).min(w - 1);
                            let wx = sx - x0 as f64;
                            let v00 = src[y0 * w + x0].f64();
                            let v01 = src[y0 * w + x1].f64();
                            let v10 = src[y1 * w + x0].f64();
                            let v11 = src[y1 * w + x1].f64();
                            let top = v00 * (1.0 - wx) + v01 * wx;
                            let bot = v10 * (1.0 - wx) + v11 * wx;
                            dst[oy * ow + ox] = T::from64(top * (1.0 - wy) + bot * wy);
                        }
                    }
                }
            }
        });
    Ok(out)
}
