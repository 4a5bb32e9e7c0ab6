//! Reverse-mode differentiation over the tensor kernel set.
//!
//! A [`Tape`] records every operation as it runs; [`Tape::backward`] walks
//! the records in reverse creation order (a topological order by
//! construction) and accumulates gradients. Gradients persist across
//! backward calls until [`Tape::zero_grads`], so two backward passes over
//! the same graph double every gradient.

mod adam;
mod backward;
mod loss;

pub use adam::{adam_step, AdamState};
pub use loss::cross_entropy_value;

use crate::error::{ensure, Result};
use crate::map::ClassMap;
use crate::tensor::ops::{self, UpsampleMode};
use crate::tensor::{Element, Tensor, TensorOf};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) struct Node<T: Element> {
    pub value: TensorOf<T>,
    pub op: Op<T>,
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    /// Training-mode batch norm; differentiates through the batch statistics.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: TensorOf<T>,
        var: TensorOf<T>,
        eps: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    InstanceNorm {
        x: Var,
        eps: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Upsample {
        x: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    BcastAdd {
        a: Var,
        b: Var,
    },
    BcastMul {
        a: Var,
        b: Var,
    },
    BcastDiv {
        a: Var,
        b: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        /// Per-pixel softmax probabilities, saved for the backward rule.
        probs: TensorOf<T>,
        labels: Vec<ClassMap>,
        ignore: Option<u8>,
        scored: usize,
    },
}

/// Records a computation for reverse-mode differentiation.
pub struct TapeOf<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<TensorOf<T>>>,
}

/// The f32 tape the trainer uses.
pub type Tape = TapeOf<f32>;

impl<T: Element> Default for TapeOf<T> {
    fn default() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }
}

impl<T: Element> TapeOf<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: TensorOf<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor (parameter or data) as a graph leaf.
    pub fn leaf(&mut self, value: TensorOf<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &TensorOf<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&TensorOf<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, with unused leaves reading as zero.
    pub fn grad_or_zero(&self, v: Var) -> TensorOf<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| TensorOf::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Drops all recorded nodes and gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    // -- recorded operations ------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
            groups,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, padding, groups }))
    }

    /// Batch norm over batch statistics. Returns the output plus the batch
    /// mean/variance for the caller's running-stat update.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, TensorOf<T>, TensorOf<T>)> {
        let (out, mean, var) =
            ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), var: var.clone(), eps },
        );
        Ok((v, mean, var))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let out = ops::instance_norm(self.value(x), eps)?;
        Ok(self.push(out, Op::InstanceNorm { x, eps }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = ops::sqrt_elem(self.value(x));
        self.push(out, Op::Sqrt { x })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Token-wise linear map: x[..., C] . w[C, F] + b[F].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let out = ops::upsample(self.value(x), factor, mode)?;
        Ok(self.push(out, Op::Upsample { x, factor, mode }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&TensorOf<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&tensors, axis)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Hadamard { a, b }))
    }

    pub fn bcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bcast_add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::BcastAdd { a, b }))
    }

    pub fn bcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bcast_mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::BcastMul { a, b }))
    }

    pub fn bcast_div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bcast_div(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::BcastDiv { a, b }))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::sum_axis(self.value(x), axis)?;
        Ok(self.push(out, Op::SumAxis { x, axis }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), perm)?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = ops::scale(self.value(x), s);
        self.push(out, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = ops::add_scalar(self.value(x), s);
        self.push(out, Op::AddScalar { x })
    }

    /// Mean cross-entropy over non-ignored pixels of -log softmax(logits)[label].
    ///
    /// All-ignored input yields a zero loss with zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[ClassMap],
        ignore: Option<u8>,
    ) -> Result<Var> {
        let (loss, probs, scored) = loss::cross_entropy_forward(self.value(logits), labels, ignore)?;
        Ok(self.push(
            TensorOf::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                ignore,
                scored,
            },
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Accumulates d(loss)/d(node) for every ancestor of `loss`.
    ///
    /// Each call propagates through a fresh working buffer and then adds its
    /// result into the persistent gradients, so calling backward twice on the
    /// same graph doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut work: Vec<Option<TensorOf<T>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(TensorOf::full(&[1], T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gout) = work[i].clone() else { continue };
            backward::apply(&self.nodes, i, &gout, &mut work)?;
        }
        for (slot, w) in self.grads.iter_mut().zip(work) {
            let Some(w) = w else { continue };
            match slot {
                Some(g) => {
                    for (a, &b) in g.data_mut().iter_mut().zip(w.data()) {
                        *a += b;
                    }
                }
                none => *none = Some(w),
            }
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient slot of `v`.
pub(crate) fn accumulate<T: Element>(
    grads: &mut [Option<TensorOf<T>>],
    nodes: &[Node<T>],
    v: Var,
    delta: TensorOf<T>,
) {
    debug_assert_eq!(nodes[v.0].value.shape(), delta.shape(), "gradient shape mismatch");
    match &mut grads[v.0] {
        Some(g) => {
            for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        // reduce to scalar: sum = ones . r via linear-free route: sum_axis
        let s = tape.sum_axis(r, 0).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn hadamard_gradients_swap_operands() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let p = tape.hadamard(a, b).unwrap();
        let s = tape.sum_axis(p, 0).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.5]).unwrap());
        let y = tape.hadamard(x, x).unwrap();
        let s = tape.sum_axis(y, 0).unwrap();
        tape.backward(s).unwrap();
        let once: Vec<f32> = tape.grad(x).unwrap().data().to_vec();
        tape.backward(s).unwrap();
        let twice: Vec<f32> = tape.grad(x).unwrap().data().to_vec();
        assert_eq!(twice, once.iter().map(|v| v * 2.0).collect::<Vec<_>>());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unused_leaf_reads_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
        let unused = tape.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.hadamard(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zero(unused).data(), &[0.0, 0.0, 0.0]);
    }
}
