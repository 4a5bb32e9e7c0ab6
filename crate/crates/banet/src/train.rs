//! Toy-scale trainer: full forward on the tape, cross-entropy, Adam, and
//! running-stat updates, over the synthetic dataset.

use crate::autodiff::{adam_step, AdamState, Tape};
use crate::error::{ensure, Result};
use crate::fusion::{banet_forward, ModelConfig};
use crate::io::pnm::RgbImage;
use crate::map::ClassMap;
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax_classes, forward, image_to_tensor};
use crate::nn::{is_buffer, Train, Weights, BN_MOMENTUM};
use crate::tensor::ops::{concat, update_running_stat};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Loss log interval in steps.
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 500, lr: 3e-4, batch: 8, log_every: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<f32>,
    /// Overall accuracy on the training set, inference mode.
    pub train_oa: f64,
}

/// Trains in place over `dataset`, batching images round-robin. Deterministic
/// given the initial weights and options.
pub fn train(
    weights: &mut Weights<f32>,
    cfg: &ModelConfig,
    dataset: &[(RgbImage, ClassMap)],
    opts: &TrainOptions,
    mut log: impl FnMut(usize, f32),
) -> Result<TrainOutcome> {
    ensure!(!dataset.is_empty(), "empty training dataset");
    ensure!(opts.batch >= 1, "batch size must be >= 1");
    let tensors: Vec<Tensor> = dataset
        .iter()
        .map(|(img, _)| image_to_tensor(&img.data, img.width, img.height))
        .collect::<Result<_>>()?;

    let param_names: Vec<String> = weights
        .iter()
        .filter(|(n, _)| !is_buffer(n))
        .map(|(n, _)| n.to_string())
        .collect();
    let shapes: Vec<&[usize]> = param_names
        .iter()
        .map(|n| weights.get(n).expect("param").shape())
        .collect();
    let mut adam = AdamState::new(opts.lr, &shapes);

    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        // Deterministic round-robin batch.
        let idx: Vec<usize> = (0..opts.batch)
            .map(|j| (step * opts.batch + j) % dataset.len())
            .collect();
        let views: Vec<&Tensor> = idx.iter().map(|&i| &tensors[i]).collect();
        let batch = concat(&views, 0)?;
        let labels: Vec<ClassMap> = idx.iter().map(|&i| dataset[i].1.clone()).collect();

        let mut tape = Tape::new();
        let mut ctx = Train::new(&mut tape, weights);
        let input = ctx.tape.leaf(batch);
        let logits = banet_forward(&mut ctx, &input, cfg, None)?;
        let bn_stats = std::mem::take(&mut ctx.bn_stats);
        let order: Vec<_> = ctx.params().map(|(n, v)| (n.to_string(), v)).collect();
        let loss = tape.cross_entropy(logits, &labels, None)?;
        tape.backward(loss)?;

        let loss_val = tape.value(loss).data()[0];
        losses.push(loss_val);
        if step % opts.log_every == 0 {
            log(step, loss_val);
        }

        let mut params: Vec<Tensor> = Vec::with_capacity(order.len());
        let mut grads: Vec<Tensor> = Vec::with_capacity(order.len());
        for (name, var) in &order {
            params.push(weights.get(name).expect("param").clone());
            grads.push(tape.grad_or_zero(*var));
        }
        adam_step(&mut params, &grads, &mut adam)?;
        for ((name, _), updated) in order.iter().zip(params) {
            *weights.get_mut(name).expect("param") = updated;
        }
        for st in bn_stats {
            if let Some(rm) = weights.get_mut(&format!("{}.running_mean", st.prefix)) {
                update_running_stat(rm, &st.mean, BN_MOMENTUM);
            }
            if let Some(rv) = weights.get_mut(&format!("{}.running_var", st.prefix)) {
                update_running_stat(rv, &st.var, BN_MOMENTUM);
            }
        }
    }

    let train_oa = evaluate_oa(weights, cfg, dataset)?;
    Ok(TrainOutcome { losses, train_oa })
}

/// Inference-mode overall accuracy over a labeled set.
pub fn evaluate_oa(
    weights: &Weights<f32>,
    cfg: &ModelConfig,
    dataset: &[(RgbImage, ClassMap)],
) -> Result<f64> {
    let names: Vec<String> = (0..cfg.num_classes).map(|i| format!("class{i}")).collect();
    let mut cm = ConfusionMatrix::new(&names, None)?;
    for (img, label) in dataset {
        let x = image_to_tensor(&img.data, img.width, img.height)?;
        let logits = forward(&x, weights, cfg, false, None)?;
        let pred = argmax_classes(&logits);
        cm.accumulate(&pred[0], label)?;
    }
    Ok(cm.overall_accuracy().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth_dataset;
    use crate::model::init_weights;

    #[test]
    fn zero_steps_leave_weights_at_initialization() {
        let cfg = ModelConfig::micro(3);
        let mut w = init_weights(&cfg, 5).unwrap();
        let orig = w.clone();
        let data = synth_dataset(2, 32, 3, 1).unwrap();
        let opts = TrainOptions { steps: 0, batch: 2, ..Default::default() };
        train(&mut w, &cfg, &data, &opts, |_, _| {}).unwrap();
        assert_eq!(w, orig);
    }

    #[test]
    fn a_few_steps_reduce_the_loss() {
        let cfg = ModelConfig::micro(3);
        let mut w = init_weights(&cfg, 5).unwrap();
        let data = synth_dataset(2, 32, 3, 1).unwrap();
        let opts = TrainOptions { steps: 30, lr: 3e-3, batch: 2, log_every: 1000 };
        let out = train(&mut w, &cfg, &data, &opts, |_, _| {}).unwrap();
        let first = out.losses[0];
        let last = *out.losses.last().unwrap();
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig::micro(3);
        let data = synth_dataset(2, 32, 3, 9).unwrap();
        let opts = TrainOptions { steps: 5, batch: 2, ..Default::default() };
        let mut w1 = init_weights(&cfg, 5).unwrap();
        train(&mut w1, &cfg, &data, &opts, |_, _| {}).unwrap();
        let mut w2 = init_weights(&cfg, 5).unwrap();
        train(&mut w2, &cfg, &data, &opts, |_, _| {}).unwrap();
        assert_eq!(w1, w2);
    }
}
