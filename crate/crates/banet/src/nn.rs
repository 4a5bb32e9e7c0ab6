//! Network construction layer.
//!
//! The architecture is written once against the [`Ctx`] trait and evaluated
//! three ways:
//!
//! - [`Infer`] runs the pure kernels over a [`Weights`] store (f32 or f64);
//! - [`Train`] records the same computation on an autodiff [`Tape`];
//! - [`Build`] creates parameters on first use, which is how weight stores
//!   are initialized and counted.
//!
//! Parameters are addressed by hierarchical names ("backbone.stem.conv1.weight"
//! style). Batch-norm running statistics live in the same store but are
//! buffers, not trainable parameters.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, invalid, Result};
use crate::tensor::ops::{self, UpsampleMode};
use crate::tensor::{Element, Tensor, TensorOf};

/// Epsilon used by every normalization in the network.
pub const NORM_EPS: f64 = 1e-5;

/// Momentum for batch-norm running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Ordered named-parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights<T: Element = f32> {
    map: IndexMap<String, TensorOf<T>>,
}

/// Running statistics are state, not parameters; they are skipped by the
/// optimizer and by parameter counts.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Element> Weights<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: TensorOf<T>) -> Result<()> {
        ensure!(
            !self.map.contains_key(name),
            "duplicate weight name '{name}'"
        );
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorOf<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorOf<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorOf<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Trainable scalar count (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Trainable scalar count under a name prefix.
    pub fn param_count_under(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix) && !is_buffer(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> Weights<U> {
        Weights {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// How a parameter is filled at creation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    /// Fan-in-scaled Gaussian for conv kernels: std = sqrt(2 / fan_in).
    ConvFanIn,
    /// Gaussian with std 0.02 for transformer linear layers.
    Gauss002,
}

/// Collects named intermediate values during a forward pass; the debug
/// hook for tests and inspection tooling.
#[derive(Debug, Default)]
pub struct Probe<V> {
    pub entries: Vec<(String, V)>,
}

impl<V> Probe<V> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn record(&mut self, name: impl Into<String>, v: V) {
        self.entries.push((name.into(), v));
    }

    pub fn get(&self, name: &str) -> Option<&V> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

/// Evaluation context; see the module docs.
pub trait Ctx {
    type V: Clone;

    fn shape(&self, v: &Self::V) -> Vec<usize>;
    fn training(&self) -> bool;
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Self::V>;
    /// Batch norm resolves `{prefix}.gamma/.beta/.running_mean/.running_var`.
    fn batch_norm(&mut self, prefix: &str, x: &Self::V) -> Result<Self::V>;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V>;
    fn instance_norm(&mut self, x: &Self::V) -> Result<Self::V>;
    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn sqrt(&mut self, x: &Self::V) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn upsample(&mut self, x: &Self::V, factor: usize, mode: UpsampleMode) -> Result<Self::V>;
    fn concat(&mut self, xs: &[&Self::V], axis: usize) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn bcast_add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn bcast_mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn bcast_div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sum_axis(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    fn permute(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, s: f64) -> Result<Self::V>;
    fn add_scalar(&mut self, x: &Self::V, s: f64) -> Result<Self::V>;
}

// ---------------------------------------------------------------------------
// Inference over a weight store
// ---------------------------------------------------------------------------

/// Pure evaluation; `training` selects batch statistics inside batch norm
/// (without updating the stored running stats).
pub struct Infer<'w, T: Element = f32> {
    pub weights: &'w Weights<T>,
    pub training: bool,
}

impl<'w, T: Element> Infer<'w, T> {
    pub fn new(weights: &'w Weights<T>) -> Self {
        Self { weights, training: false }
    }
}

impl<T: Element> Ctx for Infer<'_, T> {
    type V = TensorOf<T>;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn training(&self) -> bool {
        self.training
    }

    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Self::V> {
        let Some(t) = self.weights.get(name) else {
            invalid!("missing weight '{name}'");
        };
        ensure!(
            t.shape() == shape,
            "weight '{name}' has shape {:?}, expected {:?}",
            t.shape(),
            shape
        );
        Ok(t.clone())
    }

    fn batch_norm(&mut self, prefix: &str, x: &Self::V) -> Result<Self::V> {
        let c = x.dim(1);
        let gamma = self.param(&format!("{prefix}.gamma"), &[c], Init::Ones)?;
        let beta = self.param(&format!("{prefix}.beta"), &[c], Init::Zeros)?;
        if self.training {
            let (y, _, _) = ops::batch_norm_train(x, &gamma, &beta, NORM_EPS)?;
            Ok(y)
        } else {
            let mean = self.param(&format!("{prefix}.running_mean"), &[c], Init::Zeros)?;
            let var = self.param(&format!("{prefix}.running_var"), &[c], Init::Ones)?;
            ops::batch_norm_infer(x, &gamma, &beta, &mean, &var, NORM_EPS)
        }
    }

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self::V> {
        ops::conv2d(x, w, b, stride, padding, groups)
    }

    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V> {
        ops::layer_norm(x, gamma, beta, NORM_EPS)
    }

    fn instance_norm(&mut self, x: &Self::V) -> Result<Self::V> {
        ops::instance_norm(x, NORM_EPS)
    }

    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        ops::softmax(x, axis)
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::relu(x))
    }

    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::sigmoid(x))
    }

    fn gelu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::gelu(x))
    }

    fn sqrt(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::sqrt_elem(x))
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::matmul(a, b)
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        ops::linear(x, w, b)
    }

    fn upsample(&mut self, x: &Self::V, factor: usize, mode: UpsampleMode) -> Result<Self::V> {
        ops::upsample(x, factor, mode)
    }

    fn concat(&mut self, xs: &[&Self::V], axis: usize) -> Result<Self::V> {
        ops::concat(xs, axis)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::add(a, b)
    }

    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::hadamard(a, b)
    }

    fn bcast_add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::bcast_add(a, b)
    }

    fn bcast_mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::bcast_mul(a, b)
    }

    fn bcast_div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::bcast_div(a, b)
    }

    fn sum_axis(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        ops::sum_axis(x, axis)
    }

    fn permute(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V> {
        ops::permute(x, perm)
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        x.reshape(shape)
    }

    fn scale(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        Ok(ops::scale(x, s))
    }

    fn add_scalar(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        Ok(ops::add_scalar(x, s))
    }
}

// ---------------------------------------------------------------------------
// Tape-recorded training forward
// ---------------------------------------------------------------------------

/// A batch-norm layer's batch statistics from one training forward, to be
/// folded into the stored running stats.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub prefix: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Records the forward on a [`Tape`]; every non-buffer weight becomes a
/// trainable leaf.
pub struct Train<'t> {
    pub tape: &'t mut Tape,
    vars: IndexMap<String, Var>,
    pub bn_stats: Vec<BnStats>,
}

impl<'t> Train<'t> {
    pub fn new(tape: &'t mut Tape, weights: &Weights<f32>) -> Self {
        let mut vars = IndexMap::new();
        for (name, tensor) in weights.iter() {
            if !is_buffer(name) {
                vars.insert(name.to_string(), tape.leaf(tensor.clone()));
            }
        }
        Self { tape, vars, bn_stats: Vec::new() }
    }

    /// Trainable parameters in store order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl Ctx for Train<'_> {
    type V = Var;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.tape.value(*v).shape().to_vec()
    }

    fn training(&self) -> bool {
        true
    }

    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Self::V> {
        let Some(&v) = self.vars.get(name) else {
            invalid!("missing weight '{name}' on the tape");
        };
        ensure!(
            self.tape.value(v).shape() == shape,
            "weight '{name}' has shape {:?}, expected {:?}",
            self.tape.value(v).shape(),
            shape
        );
        Ok(v)
    }

    fn batch_norm(&mut self, prefix: &str, x: &Self::V) -> Result<Self::V> {
        let c = self.tape.value(*x).dim(1);
        let gamma = self.param(&format!("{prefix}.gamma"), &[c], Init::Ones)?;
        let beta = self.param(&format!("{prefix}.beta"), &[c], Init::Zeros)?;
        let (y, mean, var) = self.tape.batch_norm_train(*x, gamma, beta, NORM_EPS)?;
        self.bn_stats.push(BnStats { prefix: prefix.to_string(), mean, var });
        Ok(y)
    }

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self::V> {
        self.tape.conv2d(*x, *w, b.copied(), stride, padding, groups)
    }

    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V> {
        self.tape.layer_norm(*x, *gamma, *beta, NORM_EPS)
    }

    fn instance_norm(&mut self, x: &Self::V) -> Result<Self::V> {
        self.tape.instance_norm(*x, NORM_EPS)
    }

    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        self.tape.softmax(*x, axis)
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(self.tape.relu(*x))
    }

    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(self.tape.sigmoid(*x))
    }

    fn gelu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(self.tape.gelu(*x))
    }

    fn sqrt(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(self.tape.sqrt(*x))
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.tape.matmul(*a, *b)
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        self.tape.linear(*x, *w, b.copied())
    }

    fn upsample(&mut self, x: &Self::V, factor: usize, mode: UpsampleMode) -> Result<Self::V> {
        self.tape.upsample(*x, factor, mode)
    }

    fn concat(&mut self, xs: &[&Self::V], axis: usize) -> Result<Self::V> {
        let vars: Vec<Var> = xs.iter().map(|&&v| v).collect();
        self.tape.concat(&vars, axis)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.tape.add(*a, *b)
    }

    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.tape.hadamard(*a, *b)
    }

    fn bcast_add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.tape.bcast_add(*a, *b)
    }

    fn bcast_mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.tape.bcast_mul(*a, *b)
    }

    fn bcast_div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.tape.bcast_div(*a, *b)
    }

    fn sum_axis(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        self.tape.sum_axis(*x, axis)
    }

    fn permute(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V> {
        self.tape.permute(*x, perm)
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        self.tape.reshape(*x, shape)
    }

    fn scale(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        Ok(self.tape.scale(*x, s))
    }

    fn add_scalar(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        Ok(self.tape.add_scalar(*x, s))
    }
}

// ---------------------------------------------------------------------------
// Parameter creation
// ---------------------------------------------------------------------------

/// Creates parameters on first use while tracing the network over a small
/// real input. Creation order (and therefore the RNG stream) depends only
/// on the architecture, so equal seeds give byte-identical stores.
pub struct Build<'s> {
    pub store: &'s mut Weights<f32>,
    pub rng: &'s mut ChaCha8Rng,
    inner_training: bool,
}

impl<'s> Build<'s> {
    pub fn new(store: &'s mut Weights<f32>, rng: &'s mut ChaCha8Rng) -> Self {
        Self { store, rng, inner_training: false }
    }

    fn create(&mut self, shape: &[usize], init: Init) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::ConvFanIn => {
                // weight [outC, inC/groups, kH, kW]; fan_in over the last 3 dims
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let rng = &mut *self.rng;
                Tensor::from_fn(shape, |_| (gauss(rng) * std) as f32)
            }
            Init::Gauss002 => {
                let rng = &mut *self.rng;
                Tensor::from_fn(shape, |_| (gauss(rng) * 0.02) as f32)
            }
        }
    }
}

/// Standard normal draw via Box-Muller; two uniforms per call keeps the
/// stream length deterministic per element.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Ctx for Build<'_> {
    type V = Tensor;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn training(&self) -> bool {
        self.inner_training
    }

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Self::V> {
        if let Some(existing) = self.store.get(name) {
            ensure!(
                existing.shape() == shape,
                "weight '{name}' requested with shape {:?} but created as {:?}",
                shape,
                existing.shape()
            );
            return Ok(existing.clone());
        }
        let t = self.create(shape, init);
        self.store.insert(name, t.clone())?;
        Ok(t)
    }

    fn batch_norm(&mut self, prefix: &str, x: &Self::V) -> Result<Self::V> {
        let c = x.dim(1);
        let gamma = self.param(&format!("{prefix}.gamma"), &[c], Init::Ones)?;
        let beta = self.param(&format!("{prefix}.beta"), &[c], Init::Zeros)?;
        let mean = self.param(&format!("{prefix}.running_mean"), &[c], Init::Zeros)?;
        let var = self.param(&format!("{prefix}.running_var"), &[c], Init::Ones)?;
        ops::batch_norm_infer(x, &gamma, &beta, &mean, &var, NORM_EPS)
    }

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        b: Option<&Self::V>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self::V> {
        ops::conv2d(x, w, b, stride, padding, groups)
    }

    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V> {
        ops::layer_norm(x, gamma, beta, NORM_EPS)
    }

    fn instance_norm(&mut self, x: &Self::V) -> Result<Self::V> {
        ops::instance_norm(x, NORM_EPS)
    }

    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        ops::softmax(x, axis)
    }

    fn relu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::relu(x))
    }

    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::sigmoid(x))
    }

    fn gelu(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::gelu(x))
    }

    fn sqrt(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(ops::sqrt_elem(x))
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::matmul(a, b)
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        ops::linear(x, w, b)
    }

    fn upsample(&mut self, x: &Self::V, factor: usize, mode: UpsampleMode) -> Result<Self::V> {
        ops::upsample(x, factor, mode)
    }

    fn concat(&mut self, xs: &[&Self::V], axis: usize) -> Result<Self::V> {
        ops::concat(xs, axis)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::add(a, b)
    }

    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::hadamard(a, b)
    }

    fn bcast_add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::bcast_add(a, b)
    }

    fn bcast_mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::bcast_mul(a, b)
    }

    fn bcast_div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        ops::bcast_div(a, b)
    }

    fn sum_axis(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        ops::sum_axis(x, axis)
    }

    fn permute(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V> {
        ops::permute(x, perm)
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        x.reshape(shape)
    }

    fn scale(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        Ok(ops::scale(x, s))
    }

    fn add_scalar(&mut self, x: &Self::V, s: f64) -> Result<Self::V> {
        Ok(ops::add_scalar(x, s))
    }
}

// ---------------------------------------------------------------------------
// Shared layer helpers
// ---------------------------------------------------------------------------

/// Convolution layer with parameters under `{prefix}.weight/.bias`.
#[allow(clippy::too_many_arguments)]
pub fn conv_layer<C: Ctx>(
    ctx: &mut C,
    prefix: &str,
    x: &C::V,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    bias: bool,
) -> Result<C::V> {
    let in_c = ctx.shape(x)[1];
    let w = ctx.param(
        &format!("{prefix}.weight"),
        &[out_c, in_c / groups, kernel, kernel],
        Init::ConvFanIn,
    )?;
    let b = if bias {
        Some(ctx.param(&format!("{prefix}.bias"), &[out_c], Init::Zeros)?)
    } else {
        None
    };
    ctx.conv2d(x, &w, b.as_ref(), stride, padding, groups)
}

/// Conv + batch norm + ReLU; the conv carries no bias.
#[allow(clippy::too_many_arguments)]
pub fn conv_bn_relu<C: Ctx>(
    ctx: &mut C,
    prefix: &str,
    x: &C::V,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<C::V> {
    let y = conv_layer(ctx, &format!("{prefix}.conv"), x, out_c, kernel, stride, padding, 1, false)?;
    let y = ctx.batch_norm(&format!("{prefix}.bn"), &y)?;
    ctx.relu(&y)
}

/// Token linear layer with parameters under `{prefix}.weight/.bias`.
pub fn linear_layer<C: Ctx>(ctx: &mut C, prefix: &str, x: &C::V, out_f: usize, bias: bool) -> Result<C::V> {
    let in_f = *ctx.shape(x).last().unwrap();
    let w = ctx.param(&format!("{prefix}.weight"), &[in_f, out_f], Init::Gauss002)?;
    let b = if bias {
        Some(ctx.param(&format!("{prefix}.bias"), &[out_f], Init::Zeros)?)
    } else {
        None
    };
    ctx.linear(x, &w, b.as_ref())
}

/// Layer norm with parameters under `{prefix}.gamma/.beta`.
pub fn layer_norm_layer<C: Ctx>(ctx: &mut C, prefix: &str, x: &C::V) -> Result<C::V> {
    let c = *ctx.shape(x).last().unwrap();
    let gamma = ctx.param(&format!("{prefix}.gamma"), &[c], Init::Ones)?;
    let beta = ctx.param(&format!("{prefix}.beta"), &[c], Init::Zeros)?;
    ctx.layer_norm(x, &gamma, &beta)
}

/// [N, C, H, W] -> [N, H*W, C].
pub fn to_tokens<C: Ctx>(ctx: &mut C, x: &C::V) -> Result<C::V> {
    let s = ctx.shape(x);
    let t = ctx.permute(x, &[0, 2, 3, 1])?;
    ctx.reshape(&t, &[s[0], s[2] * s[3], s[1]])
}

/// [N, H*W, C] -> [N, C, H, W].
pub fn to_nchw<C: Ctx>(ctx: &mut C, x: &C::V, h: usize, w: usize) -> Result<C::V> {
    let s = ctx.shape(x);
    let t = ctx.reshape(x, &[s[0], h, w, s[2]])?;
    ctx.permute(&t, &[0, 3, 1, 2])
}

/// [N, L, C] -> [N*heads, L, C/heads].
pub fn split_heads<C: Ctx>(ctx: &mut C, x: &C::V, heads: usize) -> Result<C::V> {
    let s = ctx.shape(x);
    let (n, l, c) = (s[0], s[1], s[2]);
    ensure!(c % heads == 0, "C={c} not divisible by heads={heads}");
    let t = ctx.reshape(x, &[n, l, heads, c / heads])?;
    let t = ctx.permute(&t, &[0, 2, 1, 3])?;
    ctx.reshape(&t, &[n * heads, l, c / heads])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<C: Ctx>(ctx: &mut C, x: &C::V, heads: usize) -> Result<C::V> {
    let s = ctx.shape(x);
    let (nh, l, dk) = (s[0], s[1], s[2]);
    let n = nh / heads;
    let t = ctx.reshape(x, &[n, heads, l, dk])?;
    let t = ctx.permute(&t, &[0, 2, 1, 3])?;
    ctx.reshape(&t, &[n, l, heads * dk])
}

/// Channel-wise L2 normalization of tokens [N, L, C]: x / sqrt(sum x^2 + eps).
pub fn l2_normalize_tokens<C: Ctx>(ctx: &mut C, x: &C::V, eps: f64) -> Result<C::V> {
    let sq = ctx.hadamard(x, x)?;
    let s = ctx.sum_axis(&sq, 2)?;
    let s = ctx.add_scalar(&s, eps)?;
    let n = ctx.sqrt(&s)?;
    ctx.bcast_div(x, &n)
}
