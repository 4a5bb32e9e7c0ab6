//! Backward rules for every recorded operation.

use super::{accumulate, loss, Node, Op, Var};
use crate::error::Result;
use crate::tensor::ops::{self, UpsampleMode};
use crate::tensor::{Element, TensorOf};

/// Propagates `gout` (d loss / d node `i`) into the gradients of node `i`'s
/// inputs.
pub(crate) fn apply<T: Element>(
    nodes: &[Node<T>],
    i: usize,
    gout: &TensorOf<T>,
    grads: &mut [Option<TensorOf<T>>],
) -> Result<()> {
    let value = |v: Var| &nodes[v.0].value;
    let acc = |grads: &mut [Option<TensorOf<T>>], v: Var, t: TensorOf<T>| accumulate(grads, nodes, v, t);

    match &nodes[i].op {
        Op::Leaf => {}

        Op::Conv2d { x, w, b, stride, padding, groups } => {
            let (gx, gw, gb) = conv2d_backward(
                value(*x),
                value(*w),
                gout,
                *stride,
                *padding,
                *groups,
                b.is_some(),
            );
            acc(grads, *x, gx);
            acc(grads, *w, gw);
            if let (Some(bv), Some(gb)) = (b, gb) {
                acc(grads, *bv, gb);
            }
        }

        Op::BatchNorm { x, gamma, beta, mean, var, eps } => {
            let (gx, gg, gb) = batch_norm_backward(value(*x), value(*gamma), gout, mean, var, *eps);
            acc(grads, *x, gx);
            acc(grads, *gamma, gg);
            acc(grads, *beta, gb);
        }

        Op::LayerNorm { x, gamma, beta, eps } => {
            let (gx, gg, gb) = layer_norm_backward(value(*x), value(*gamma), gout, *eps);
            acc(grads, *x, gx);
            acc(grads, *gamma, gg);
            acc(grads, *beta, gb);
        }

        Op::InstanceNorm { x, eps } => {
            acc(grads, *x, instance_norm_backward(value(*x), gout, *eps));
        }

        Op::Softmax { x, axis } => {
            acc(grads, *x, softmax_backward(&nodes[i].value, gout, *axis));
        }

        Op::Relu { x } => {
            let mut g = gout.clone();
            for (gv, &xv) in g.data_mut().iter_mut().zip(value(*x).data()) {
                if xv <= T::zero() {
                    *gv = T::zero();
                }
            }
            acc(grads, *x, g);
        }

        Op::Sigmoid { x } => {
            let mut g = gout.clone();
            for (gv, &s) in g.data_mut().iter_mut().zip(nodes[i].value.data()) {
                let s = s.f64();
                *gv = T::from64(gv.f64() * s * (1.0 - s));
            }
            acc(grads, *x, g);
        }

        Op::Gelu { x } => {
            let mut g = gout.clone();
            for (gv, &xv) in g.data_mut().iter_mut().zip(value(*x).data()) {
                let x64 = xv.f64();
                let phi = 0.5 * (1.0 + crate::tensor::erf64(x64 / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x64 * x64).exp() / (2.0 * std::f64::consts::PI).sqrt();
                *gv = T::from64(gv.f64() * (phi + x64 * pdf));
            }
            acc(grads, *x, g);
        }

        Op::Sqrt { x } => {
            let mut g = gout.clone();
            for (gv, &s) in g.data_mut().iter_mut().zip(nodes[i].value.data()) {
                *gv = T::from64(gv.f64() * 0.5 / s.f64());
            }
            acc(grads, *x, g);
        }

        Op::Matmul { a, b } => {
            let (av, bv) = (value(*a), value(*b));
            let rank = av.rank();
            let (m, k) = (av.shape()[rank - 2], av.shape()[rank - 1]);
            let p = bv.shape()[rank - 1];
            let batch: usize = av.shape()[..rank - 2].iter().product();
            let mut ga = TensorOf::zeros(av.shape());
            let mut gb = TensorOf::zeros(bv.shape());
            for bi in 0..batch {
                let go = &gout.data()[bi * m * p..(bi + 1) * m * p];
                // dA = dY x B^T
                ops::matmul_2d_abt(
                    go,
                    &bv.data()[bi * k * p..(bi + 1) * k * p],
                    &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k],
                    m,
                    p,
                    k,
                );
                // dB = A^T x dY
                ops::matmul_2d_atb(
                    &av.data()[bi * m * k..(bi + 1) * m * k],
                    go,
                    &mut gb.data_mut()[bi * k * p..(bi + 1) * k * p],
                    m,
                    k,
                    p,
                );
            }
            acc(grads, *a, ga);
            acc(grads, *b, gb);
        }

        Op::Linear { x, w, b } => {
            let (xv, wv) = (value(*x), value(*w));
            let c = *xv.shape().last().unwrap();
            let f = wv.shape()[1];
            let q = xv.len() / c;
            let mut gx = TensorOf::zeros(xv.shape());
            let mut gw = TensorOf::zeros(wv.shape());
            // dX = dY x W^T ; dW = X^T x dY
            ops::matmul_2d_abt(gout.data(), wv.data(), gx.data_mut(), q, f, c);
            ops::matmul_2d_atb(xv.data(), gout.data(), gw.data_mut(), q, c, f);
            acc(grads, *x, gx);
            acc(grads, *w, gw);
            if let Some(bv) = b {
                let mut gb = TensorOf::zeros(&[f]);
                for row in gout.data().chunks(f) {
                    for (g, &v) in gb.data_mut().iter_mut().zip(row) {
                        *g += v;
                    }
                }
                acc(grads, *bv, gb);
            }
        }

        Op::Upsample { x, factor, mode } => {
            acc(grads, *x, upsample_backward(value(*x), gout, *factor, *mode));
        }

        Op::Concat { xs, axis } => {
            let axis = *axis;
            let out_shape = nodes[i].value.shape();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..axis].iter().product();
            let total_axis = out_shape[axis];
            let mut offset = 0;
            for &xv in xs {
                let part_axis = value(xv).shape()[axis];
                let mut g = TensorOf::zeros(value(xv).shape());
                for o in 0..outer {
                    let src = (o * total_axis + offset) * inner;
                    let dst = o * part_axis * inner;
                    g.data_mut()[dst..dst + part_axis * inner]
                        .copy_from_slice(&gout.data()[src..src + part_axis * inner]);
                }
                offset += part_axis;
                acc(grads, xv, g);
            }
        }

        Op::Add { a, b } => {
            acc(grads, *a, gout.clone());
            acc(grads, *b, gout.clone());
        }

        Op::Hadamard { a, b } => {
            acc(grads, *a, ops::hadamard(gout, value(*b))?);
            acc(grads, *b, ops::hadamard(gout, value(*a))?);
        }

        Op::BcastAdd { a, b } => {
            acc(grads, *a, gout.clone());
            acc(grads, *b, reduce_to_shape(gout, value(*b).shape())?);
        }

        Op::BcastMul { a, b } => {
            acc(grads, *a, ops::bcast_mul(gout, value(*b))?);
            let gb_full = ops::hadamard(gout, value(*a))?;
            acc(grads, *b, reduce_to_shape(&gb_full, value(*b).shape())?);
        }

        Op::BcastDiv { a, b } => {
            acc(grads, *a, ops::bcast_div(gout, value(*b))?);
            // d/db (a / b) = -a / b^2
            let t = ops::hadamard(gout, value(*a))?;
            let t = ops::bcast_div(&t, value(*b))?;
            let t = ops::bcast_div(&t, value(*b))?;
            let t = ops::scale(&t, -1.0);
            acc(grads, *b, reduce_to_shape(&t, value(*b).shape())?);
        }

        Op::SumAxis { x, axis } => {
            let zeros = TensorOf::zeros(value(*x).shape());
            let _ = axis;
            acc(grads, *x, ops::bcast_add(&zeros, gout)?);
        }

        Op::Permute { x, perm } => {
            let mut inverse = vec![0usize; perm.len()];
            for (to, &from) in perm.iter().enumerate() {
                inverse[from] = to;
            }
            acc(grads, *x, ops::permute(gout, &inverse)?);
        }

        Op::Reshape { x } => {
            acc(grads, *x, gout.reshape(value(*x).shape())?);
        }

        Op::Scale { x, s } => {
            acc(grads, *x, ops::scale(gout, *s));
        }

        Op::AddScalar { x } => {
            acc(grads, *x, gout.clone());
        }

        Op::CrossEntropy { logits, probs, labels, ignore, scored } => {
            let g = loss::cross_entropy_backward(probs, labels, *ignore, *scored, gout.data()[0]);
            acc(grads, *logits, g);
        }
    }
    Ok(())
}

fn conv2d_backward<T: Element>(
    x: &TensorOf<T>,
    w: &TensorOf<T>,
    gout: &TensorOf<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    has_bias: bool,
) -> (TensorOf<T>, TensorOf<T>, Option<TensorOf<T>>) {
    let (n, c, _h, _w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oc, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (oh, ow) = (gout.dim(2), gout.dim(3));
    let plane = oh * ow;
    let cg = c / groups;
    let ocg = oc / groups;
    let k_len = cg * kh * kw;

    let mut gx = TensorOf::zeros(x.shape());
    let mut gw = TensorOf::zeros(w.shape());
    let mut col = vec![T::zero(); k_len * plane];
    let mut gcol = vec![T::zero(); k_len * plane];
    let mut gw_acc = vec![T::zero(); ocg * k_len];
    for ni in 0..n {
        for g in 0..groups {
            ops::im2col(x, ni, g * cg, kh, kw, stride, padding, oh, ow, &mut col);
            let go = &gout.data()[ni * oc * plane + g * ocg * plane..][..ocg * plane];
            // dW += dY x col^T
            ops::matmul_2d_abt(go, &col, &mut gw_acc, ocg, plane, k_len);
            let gw_slab = &mut gw.data_mut()[g * ocg * k_len..(g + 1) * ocg * k_len];
            for (dst, &src) in gw_slab.iter_mut().zip(&gw_acc) {
                *dst += src;
            }
            // d(col) = W^T x dY, scattered back through the gather.
            let w_slab = &w.data()[g * ocg * k_len..(g + 1) * ocg * k_len];
            ops::matmul_2d_atb(w_slab, go, &mut gcol, ocg, k_len, plane);
            ops::col2im_add(&mut gx, ni, g * cg, cg, kh, kw, stride, padding, oh, ow, &gcol);
        }
    }

    let gb = has_bias.then(|| {
        let mut gb = TensorOf::zeros(&[oc]);
        for ni in 0..n {
            for o in 0..oc {
                let s: f64 = gout.data()[(ni * oc + o) * plane..][..plane]
                    .iter()
                    .map(|&v| v.f64())
                    .sum();
                gb.data_mut()[o] += T::from64(s);
            }
        }
        gb
    });
    (gx, gw, gb)
}

/// d/dx of y = gamma * (x - mu) / sqrt(var + eps) + beta, where mu and var
/// are batch statistics over (N, H, W) per channel.
fn batch_norm_backward<T: Element>(
    x: &TensorOf<T>,
    gamma: &TensorOf<T>,
    gout: &TensorOf<T>,
    mean: &TensorOf<T>,
    var: &TensorOf<T>,
    eps: f64,
) -> (TensorOf<T>, TensorOf<T>, TensorOf<T>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut gx = TensorOf::zeros(x.shape());
    let mut gg = TensorOf::zeros(&[c]);
    let mut gb = TensorOf::zeros(&[c]);
    for ci in 0..c {
        let mu = mean.data()[ci].f64();
        let inv = (var.data()[ci].f64() + eps).sqrt().recip();
        let gam = gamma.data()[ci].f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for idx in base..base + plane {
                let dy = gout.data()[idx].f64();
                let xhat = (x.data()[idx].f64() - mu) * inv;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        gb.data_mut()[ci] = T::from64(sum_dy);
        gg.data_mut()[ci] = T::from64(sum_dy_xhat);
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for idx in base..base + plane {
                let dy = gout.data()[idx].f64();
                let xhat = (x.data()[idx].f64() - mu) * inv;
                gx.data_mut()[idx] =
                    T::from64(gam * inv * (dy - sum_dy / m - xhat * sum_dy_xhat / m));
            }
        }
    }
    (gx, gg, gb)
}

fn layer_norm_backward<T: Element>(
    x: &TensorOf<T>,
    gamma: &TensorOf<T>,
    gout: &TensorOf<T>,
    eps: f64,
) -> (TensorOf<T>, TensorOf<T>, TensorOf<T>) {
    let c = *x.shape().last().unwrap();
    let tokens = x.len() / c;
    let mut gx = TensorOf::zeros(x.shape());
    let mut gg = TensorOf::zeros(&[c]);
    let mut gb = TensorOf::zeros(&[c]);
    for t in 0..tokens {
        let xs = &x.data()[t * c..(t + 1) * c];
        let dys = &gout.data()[t * c..(t + 1) * c];
        let mu = xs.iter().map(|&v| v.f64()).sum::<f64>() / c as f64;
        let var = xs.iter().map(|&v| (v.f64() - mu).powi(2)).sum::<f64>() / c as f64;
        let inv = (var + eps).sqrt().recip();
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for j in 0..c {
            let xhat = (xs[j].f64() - mu) * inv;
            let dy = dys[j].f64();
            gg.data_mut()[j] += T::from64(dy * xhat);
            gb.data_mut()[j] += dys[j];
            let dxhat = dy * gamma.data()[j].f64();
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        for j in 0..c {
            let xhat = (xs[j].f64() - mu) * inv;
            let dxhat = dys[j].f64() * gamma.data()[j].f64();
            gx.data_mut()[t * c + j] =
                T::from64(inv * (dxhat - sum_dxhat / c as f64 - xhat * sum_dxhat_xhat / c as f64));
        }
    }
    (gx, gg, gb)
}

fn instance_norm_backward<T: Element>(x: &TensorOf<T>, gout: &TensorOf<T>, eps: f64) -> TensorOf<T> {
    let (h, w) = (x.dim(2), x.dim(3));
    let plane = h * w;
    let planes = x.len() / plane;
    let mut gx = TensorOf::zeros(x.shape());
    for pidx in 0..planes {
        let xs = &x.data()[pidx * plane..(pidx + 1) * plane];
        let dys = &gout.data()[pidx * plane..(pidx + 1) * plane];
        let mu = xs.iter().map(|&v| v.f64()).sum::<f64>() / plane as f64;
        let var = xs.iter().map(|&v| (v.f64() - mu).powi(2)).sum::<f64>() / plane as f64;
        let inv = (var + eps).sqrt().recip();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for j in 0..plane {
            let xhat = (xs[j].f64() - mu) * inv;
            sum_dy += dys[j].f64();
            sum_dy_xhat += dys[j].f64() * xhat;
        }
        for j in 0..plane {
            let xhat = (xs[j].f64() - mu) * inv;
            gx.data_mut()[pidx * plane + j] = T::from64(
                inv * (dys[j].f64() - sum_dy / plane as f64 - xhat * sum_dy_xhat / plane as f64),
            );
        }
    }
    gx
}

/// dx = s * (dy - sum(dy * s)) per slice along the softmax axis.
fn softmax_backward<T: Element>(s: &TensorOf<T>, gout: &TensorOf<T>, axis: usize) -> TensorOf<T> {
    let a = s.shape()[axis];
    let inner: usize = s.shape()[axis + 1..].iter().product();
    let outer: usize = s.shape()[..axis].iter().product();
    let mut gx = TensorOf::zeros(s.shape());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * a * inner + i;
            let mut dot = 0.0f64;
            for j in 0..a {
                let idx = base + j * inner;
                dot += gout.data()[idx].f64() * s.data()[idx].f64();
            }
            for j in 0..a {
                let idx = base + j * inner;
                gx.data_mut()[idx] =
                    T::from64(s.data()[idx].f64() * (gout.data()[idx].f64() - dot));
            }
        }
    }
    gx
}

fn upsample_backward<T: Element>(
    x: &TensorOf<T>,
    gout: &TensorOf<T>,
    factor: usize,
    mode: UpsampleMode,
) -> TensorOf<T> {
    let (h, w) = (x.dim(2), x.dim(3));
    let (oh, ow) = (gout.dim(2), gout.dim(3));
    let planes = x.len() / (h * w);
    let mut gx = TensorOf::zeros(x.shape());
    let f = factor as f64;
    for p in 0..planes {
        let src = &gout.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        match mode {
            UpsampleMode::Nearest => {
                for oy in 0..oh {
                    let iy = oy / factor;
                    for ox in 0..ow {
                        dst[iy * w + ox / factor] += src[oy * ow + ox];
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
                        let g = src[oy * ow + ox].f64();
                        dst[y0 * w + x0] += T::from64(g * (1.0 - wy) * (1.0 - wx));
                        dst[y0 * w + x1] += T::from64(g * (1.0 - wy) * wx);
                        dst[y1 * w + x0] += T::from64(g * wy * (1.0 - wx));
                        dst[y1 * w + x1] += T::from64(g * wy * wx);
                    }
                }
            }
        }
    }
    gx
}

/// Sums `t` down to `shape`, which must differ only by size-1 axes.
fn reduce_to_shape<T: Element>(t: &TensorOf<T>, shape: &[usize]) -> Result<TensorOf<T>> {
    let mut cur = t.clone();
    for axis in 0..shape.len() {
        if shape[axis] == 1 && cur.shape()[axis] != 1 {
            cur = ops::sum_axis(&cur, axis)?;
        }
    }
    Ok(cur)
}
