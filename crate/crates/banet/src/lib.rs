//! Bilateral segmentation network with a transformer dependency path, a
//! convolutional texture path, and linear-attention feature aggregation,
//! plus the surrounding machinery: a minimal dense-tensor kernel set,
//! reverse-mode autodiff with Adam, segmentation metrics, portable image
//! and weight formats, tiled inference, and a toy-scale trainer.

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod map;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod texture;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorOf};
