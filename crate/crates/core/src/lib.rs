//! Gaussian kernel attention engine.

pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod gka;
pub mod gradcheck;
pub mod mask;
pub mod mha;
pub mod model;
pub mod nn;
pub mod streaming;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::{LayerMask, MaskKind, MaskSpec};
pub use tensor::{Precision, Scalar, Tensor};
