//! Adam optimizer with bias correction.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Optimizer state: one pair of moment tensors per parameter, in parameter
/// order, plus the shared step counter and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Defaults beyond the learning rate: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One bias-corrected Adam update over a parameter list.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.first_moment.len(),
        "adam_step got {} params, {} grads, state for {}",
        params.len(),
        grads.len(),
        state.first_moment.len()
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        ensure!(
            p.shape() == g.shape() && p.shape() == state.first_moment[pi].shape(),
            "adam_step parameter {pi}: shape {:?} vs grad {:?}",
            p.shape(),
            g.shape()
        );
        let m = state.first_moment[pi].data_mut();
        let v = state.second_moment[pi].data_mut();
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g64 = gv as f64;
            let m64 = state.beta1 * *mv as f64 + (1.0 - state.beta1) * g64;
            let v64 = state.beta2 * *vv as f64 + (1.0 - state.beta2) * g64 * g64;
            *mv = m64 as f32;
            *vv = v64 as f32;
            let mhat = m64 / bc1;
            let vhat = v64 / bc2;
            *pv = (*pv as f64 - state.lr * mhat / (vhat.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(0.1, &[&[3]]);
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params[0].data(), before.data());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_against_gradient_sign() {
        // With bias correction, mhat/sqrt(vhat) = sign(g) exactly at step 1.
        let lr = 0.05;
        let mut params = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let grads = vec![Tensor::new(vec![2], vec![3.0, -0.2]).unwrap()];
        let mut st = AdamState::new(lr, &[&[2]]);
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert!((params[0].data()[0] - (1.0 - lr as f32)).abs() < 1e-5);
        assert!((params[0].data()[1] - (-1.0 + lr as f32)).abs() < 1e-5);
    }

    #[test]
    fn hundred_steps_on_quadratic_reach_near_zero_and_match_scalar_oracle() {
        // Oracle: the same recurrence simulated in f64 arithmetic.
        let lr = 0.1;
        let mut params = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut st = AdamState::new(lr, &[&[1]]);

        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * params[0].data()[0];
            adam_step(&mut params, &[Tensor::new(vec![1], vec![g]).unwrap()], &mut st).unwrap();

            let g64 = 2.0 * w;
            m = 0.9 * m + 0.1 * g64;
            v = 0.999 * v + 0.001 * g64 * g64;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mhat / (vhat.sqrt() + 1e-8);

            assert!(
                (params[0].data()[0] as f64 - w).abs() < 1e-4,
                "step {t}: impl {} vs oracle {w}",
                params[0].data()[0]
            );
        }
        assert!(params[0].data()[0].abs() < 0.05, "final w = {}", params[0].data()[0]);
    }
}
