//! Model-level entry points: weight initialization, pure forward passes,
//! parameter counting, prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{banet_forward, ModelConfig};
use crate::map::ClassMap;
use crate::nn::{Build, Infer, Probe, Weights};
use crate::tensor::{Element, Tensor, TensorOf};

/// Creates a fresh weight store for `cfg` by tracing one forward pass on a
/// minimal input. Parameter creation order depends only on the
/// architecture, so equal seeds give byte-identical stores.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights<f32>> {
    cfg.validate()?;
    let mut store = Weights::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = Build::new(&mut store, &mut rng);
    let image = Tensor::zeros(&[1, 3, 32, 32]);
    banet_forward(&mut ctx, &image, cfg, None)?;
    Ok(store)
}

/// Pure forward pass. `training` selects batch statistics inside batch
/// norm; running statistics are left untouched either way.
pub fn forward<T: Element>(
    image: &TensorOf<T>,
    weights: &Weights<T>,
    cfg: &ModelConfig,
    training: bool,
    probe: Option<&mut Probe<TensorOf<T>>>,
) -> Result<TensorOf<T>> {
    let mut ctx = Infer { weights, training };
    banet_forward(&mut ctx, image, cfg, probe)
}

/// Trainable parameters of the whole model.
pub fn param_count(weights: &Weights<f32>) -> usize {
    weights.param_count()
}

/// Trainable parameters of the dependency-path backbone alone; this is the
/// number checked against the published backbone size.
pub fn backbone_param_count(weights: &Weights<f32>) -> usize {
    weights.param_count_under("backbone.")
}

/// Argmax over the class axis of [N, K, H, W] logits; ties break toward the
/// lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Vec<ClassMap> {
    let (n, k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let plane = h * w;
    let mut maps = Vec::with_capacity(n);
    for ni in 0..n {
        let mut m = ClassMap::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let base = ni * k * plane + y * w + x;
                let mut best = 0usize;
                let mut best_v = logits.data()[base];
                for c in 1..k {
                    let v = logits.data()[base + c * plane];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                m.set(y, x, best as u8);
            }
        }
        maps.push(m);
    }
    maps
}

/// Converts an 8-bit RGB image buffer (interleaved, row-major) to a
/// [1, 3, H, W] tensor scaled to [0, 1].
pub fn image_to_tensor(rgb: &[u8], width: usize, height: usize) -> Result<Tensor> {
    crate::error::ensure!(
        rgb.len() == width * height * 3,
        "rgb buffer has {} bytes, expected {}",
        rgb.len(),
        width * height * 3
    );
    let mut t = Tensor::zeros(&[1, 3, height, width]);
    let plane = width * height;
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data_mut()[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::micro(3);
        let a = init_weights(&cfg, 7).unwrap();
        let b = init_weights(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn micro_model_is_small_enough_for_finite_differences() {
        let cfg = ModelConfig::micro(2);
        let w = init_weights(&cfg, 1).unwrap();
        let count = param_count(&w);
        assert!(count <= 5000, "micro model has {count} trainable params");
    }

    #[test]
    fn toy_model_is_under_a_million_params() {
        let cfg = ModelConfig::toy(4);
        let w = init_weights(&cfg, 1).unwrap();
        let count = param_count(&w);
        assert!(count < 1_000_000, "toy model has {count} trainable params");
    }

    #[test]
    fn toy_shape_contract() {
        let cfg = ModelConfig::toy(4);
        let w = init_weights(&cfg, 3).unwrap();
        let img = Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 17) as f32 / 17.0);
        let mut probe = Probe::new();
        let logits = forward(&img, &w, &cfg, false, Some(&mut probe)).unwrap();
        assert_eq!(logits.shape(), &[2, 4, 64, 64]);
        assert_eq!(probe.get("backbone.ldf3").unwrap().shape(), &[2, 64, 4, 4]);
        assert_eq!(probe.get("backbone.ldf4").unwrap().shape(), &[2, 128, 2, 2]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::micro(2);
        let w = init_weights(&cfg, 5).unwrap();
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 31) % 101) as f32 / 101.0);
        let a = forward(&img, &w, &cfg, false, None).unwrap();
        let b = forward(&img, &w, &cfg, false, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fusion_modes_produce_distinct_full_resolution_logits() {
        let img = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 7) % 23) as f32 / 23.0);
        let mut outputs = Vec::new();
        for mode in [FusionMode::Fam, FusionMode::Sum, FusionMode::Cat, FusionMode::None] {
            let mut cfg = ModelConfig::micro(3);
            cfg.fusion_mode = mode;
            let w = init_weights(&cfg, 11).unwrap();
            let logits = forward(&img, &w, &cfg, false, None).unwrap();
            assert_eq!(logits.shape(), &[1, 3, 64, 64], "mode {mode}");
            outputs.push(logits);
        }
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                assert!(
                    outputs[i].max_abs_diff(&outputs[j]) > 1e-6,
                    "fusion modes {i} and {j} alias each other"
                );
            }
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        // Swapping batch elements swaps outputs; no cross-batch leakage in
        // inference mode.
        let cfg = ModelConfig::micro(2);
        let w = init_weights(&cfg, 9).unwrap();
        let a = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 13) % 37) as f32 / 37.0);
        let b = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 29) % 41) as f32 / 41.0);
        let ab = crate::tensor::ops::concat(&[&a, &b], 0).unwrap();
        let ba = crate::tensor::ops::concat(&[&b, &a], 0).unwrap();
        let out_ab = forward(&ab, &w, &cfg, false, None).unwrap();
        let out_ba = forward(&ba, &w, &cfg, false, None).unwrap();
        let half = out_ab.len() / 2;
        assert_eq!(&out_ab.data()[..half], &out_ba.data()[half..]);
        assert_eq!(&out_ab.data()[half..], &out_ba.data()[..half]);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let mut logits = Tensor::zeros(&[1, 3, 1, 2]);
        // pixel 0: all equal -> class 0; pixel 1: class 2 wins
        logits.data_mut()[2 * 2 + 1] = 1.0;
        let maps = argmax_classes(&logits);
        assert_eq!(maps[0].data(), &[0, 2]);
    }
}
