//! Dense row-major tensors and the kernel set the network is built from.
//!
//! Everything here is a pure function: inputs are borrowed, outputs are
//! freshly allocated, and identical inputs produce bit-identical outputs.
//! Feature maps follow the NCHW convention; token tensors are [N, L, C].
//!
//! Ops are generic over [`Element`] so the same kernels can be instantiated
//! at f64 for finite-difference verification. The artifact type is
//! [`Tensor`] (= `TensorOf<f32>`).

mod element;
pub mod ops;
pub mod serial;

pub use element::Element;
pub(crate) use element::erf64;

use crate::error::{ensure, Result};

/// Dense rank-N array, flat row-major buffer.
///
/// Invariant: `data.len() == shape.iter().product()`. Rank is at most 4
/// everywhere this crate uses it.
#[derive(Clone, PartialEq)]
pub struct TensorOf<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The 32-bit float tensor used throughout the artifact.
pub type Tensor = TensorOf<f32>;

impl<T: Element> TensorOf<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor shape {:?} has a zero dimension",
            shape
        );
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            expected,
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    /// Dimension `i`, or 1 past the rank (handy for treating [N,C] like [N,C,1,1]).
    pub fn dim(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(1)
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            "reshape to {:?} ({} elements) from {:?} ({} elements)",
            shape,
            n,
            self.shape,
            self.data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Converts the element type, rounding through f64.
    pub fn cast<U: Element>(&self) -> TensorOf<U> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from64(v.f64())).collect(),
        }
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Element> std::fmt::Debug for TensorOf<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TensorOf{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ... {} elements]", &self.data[..8], self.data.len())
        }
    }
}

/// Checks that a feature map is rank 4 and returns (n, c, h, w).
pub(crate) fn dims4<T: Element>(x: &TensorOf<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    ensure!(
        x.rank() == 4,
        "{what} must be rank 4 [N,C,H,W], got shape {:?}",
        x.shape()
    );
    Ok((x.shape[0], x.shape[1], x.shape[2], x.shape[3]))
}

/// Checks that a token tensor is rank 3 and returns (n, l, c).
pub(crate) fn dims3<T: Element>(x: &TensorOf<T>, what: &str) -> Result<(usize, usize, usize)> {
    ensure!(
        x.rank() == 3,
        "{what} must be rank 3 [N,L,C], got shape {:?}",
        x.shape()
    );
    Ok((x.shape[0], x.shape[1], x.shape[2]))
}
