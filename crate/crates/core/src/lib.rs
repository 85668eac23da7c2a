//! Convolutional networks with trainable SVD factors, structure and
//! compression regularizers, and dynamic rank pruning.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod regularization;
pub mod svd;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Precision, Tensor};
