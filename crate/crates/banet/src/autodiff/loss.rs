//! Pixelwise cross-entropy with optional ignore label.

use crate::error::{ensure, invalid, Result};
use crate::map::ClassMap;
use crate::tensor::{ops, Element, Tensor, TensorOf};

/// Returns (mean loss over scored pixels, softmax probabilities, scored count).
pub(crate) fn cross_entropy_forward<T: Element>(
    logits: &TensorOf<T>,
    labels: &[ClassMap],
    ignore: Option<u8>,
) -> Result<(T, TensorOf<T>, usize)> {
    ensure!(
        logits.rank() == 4,
        "cross_entropy logits must be [N,K,H,W], got {:?}",
        logits.shape()
    );
    let (n, k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    ensure!(
        labels.len() == n,
        "cross_entropy got {} label maps for batch of {n}",
        labels.len()
    );
    ensure!(k <= 256, "cross_entropy supports at most 256 classes, got {k}");
    for (ni, m) in labels.iter().enumerate() {
        ensure!(
            m.height() == h && m.width() == w,
            "label map {ni} is {}x{}, logits are {h}x{w}",
            m.height(),
            m.width()
        );
        for y in 0..h {
            for x in 0..w {
                let v = m.get(y, x);
                if Some(v) == ignore {
                    continue;
                }
                if v as usize >= k {
                    invalid!(
                        "label {v} at image {ni} pixel (y={y}, x={x}) is outside [0, {k})"
                    );
                }
            }
        }
    }

    let probs = ops::softmax(logits, 1)?;
    let plane = h * w;
    let ld = logits.data();
    let mut total = 0.0f64;
    let mut scored = 0usize;
    for (ni, m) in labels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = m.get(y, x);
                if Some(v) == ignore {
                    continue;
                }
                // -log softmax via logsumexp for stability.
                let base = ni * k * plane + y * w + x;
                let mut mx = f64::NEG_INFINITY;
                for c in 0..k {
                    mx = mx.max(ld[base + c * plane].f64());
                }
                let mut lse = 0.0f64;
                for c in 0..k {
                    lse += (ld[base + c * plane].f64() - mx).exp();
                }
                let lse = mx + lse.ln();
                total += lse - ld[base + v as usize * plane].f64();
                scored += 1;
            }
        }
    }
    let loss = if scored == 0 {
        T::zero()
    } else {
        T::from64(total / scored as f64)
    };
    Ok((loss, probs, scored))
}

/// Gradient of the mean cross-entropy: (softmax - onehot)/scored at scored
/// pixels, zero at ignored ones, scaled by the incoming scalar gradient.
pub(crate) fn cross_entropy_backward<T: Element>(
    probs: &TensorOf<T>,
    labels: &[ClassMap],
    ignore: Option<u8>,
    scored: usize,
    gout: T,
) -> TensorOf<T> {
    let mut grad = TensorOf::zeros(probs.shape());
    if scored == 0 {
        return grad;
    }
    let (k, h, w) = (probs.dim(1), probs.dim(2), probs.dim(3));
    let plane = h * w;
    let scale = gout.f64() / scored as f64;
    let pd = probs.data();
    let gd = grad.data_mut();
    for (ni, m) in labels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = m.get(y, x);
                if Some(v) == ignore {
                    continue;
                }
                let base = ni * k * plane + y * w + x;
                for c in 0..k {
                    let p = pd[base + c * plane].f64();
                    let target = if c == v as usize { 1.0 } else { 0.0 };
                    gd[base + c * plane] += T::from64((p - target) * scale);
                }
            }
        }
    }
    grad
}

/// Inference-path loss value (no tape).
pub fn cross_entropy_value(logits: &Tensor, labels: &[ClassMap], ignore: Option<u8>) -> Result<f32> {
    cross_entropy_forward(logits, labels, ignore).map(|(l, _, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[1, 4, 2, 2]);
        let labels = vec![ClassMap::filled(2, 2, 1)];
        let (loss, _, scored) = cross_entropy_forward(&logits, &labels, None).unwrap();
        assert_eq!(scored, 4);
        assert!((loss - (4.0f32).ln()).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut prev = f32::INFINITY;
        for margin in [1.0f32, 4.0, 16.0] {
            let mut logits = Tensor::zeros(&[1, 3, 1, 1]);
            logits.data_mut()[2] = margin; // class 2 everywhere
            let labels = vec![ClassMap::filled(1, 1, 2)];
            let (loss, _, _) = cross_entropy_forward(&logits, &labels, None).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn random_case_matches_per_pixel_softmax_oracle() {
        use rand::{Rng, SeedableRng};
        let mut r = rand::rngs::StdRng::seed_from_u64(7);
        let logits = Tensor::from_fn(&[1, 3, 2, 2], |_| r.gen_range(-2.0f32..2.0));
        let labels = vec![ClassMap::new(2, 2, vec![0, 2, 1, 1]).unwrap()];
        let (loss, _, _) = cross_entropy_forward(&logits, &labels, None).unwrap();

        let mut want = 0.0f64;
        for y in 0..2 {
            for x in 0..2 {
                let lab = labels[0].get(y, x) as usize;
                let vals: Vec<f64> = (0..3)
                    .map(|c| logits.data()[c * 4 + y * 2 + x] as f64)
                    .collect();
                let sum: f64 = vals.iter().map(|v| v.exp()).sum();
                want -= (vals[lab].exp() / sum).ln();
            }
        }
        want /= 4.0;
        assert!((loss as f64 - want).abs() < 1e-6, "loss {loss} want {want}");
    }

    #[test]
    fn out_of_range_label_names_the_pixel() {
        let logits = Tensor::zeros(&[1, 2, 2, 2]);
        let labels = vec![ClassMap::new(2, 2, vec![0, 1, 5, 0]).unwrap()];
        let err = cross_entropy_forward(&logits, &labels, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("y=1") && msg.contains("x=0"), "{msg}");
    }

    #[test]
    fn all_ignored_is_zero_loss() {
        let logits = Tensor::zeros(&[1, 2, 2, 2]);
        let labels = vec![ClassMap::filled(2, 2, 9)];
        let (loss, probs, scored) = cross_entropy_forward(&logits, &labels, Some(9)).unwrap();
        assert_eq!((loss, scored), (0.0, 0));
        let grad = cross_entropy_backward(&probs, &labels, Some(9), scored, 1.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }
}
