// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod coord_sgd;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod l2o;
pub mod nets;
pub mod proxy;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
