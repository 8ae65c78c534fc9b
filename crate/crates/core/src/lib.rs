//! Gaussian-mask convolution (GMConv) engine.
//!
//! A small `f64` tensor engine with reverse-mode gradients, Gaussian
//! receptive-field masks, static and dynamic GMConv layers, declarative model
//! specs, effective-receptive-field probing and a CIFAR-style training harness.

// `!(x > 0.0)` checks are written that way so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod erf;
pub mod error;
pub mod layers;
pub mod mask;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
