//! Direct binary embedding.
//!
//! A small convolutional network ends in a layer computing
//! `tanh(relu(batchnorm(x W + b)))`, whose activations sit near 0 or 1 and are
//! thresholded into binary codes. The crate covers the autodiff engine, the
//! network, its training objectives and loop, code packing, Hamming
//! retrieval, and the evaluation metrics.

pub mod autodiff;
pub mod binarizer;
mod binio;
pub mod config;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod network;
pub mod par;
#[cfg(test)]
mod properties;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
