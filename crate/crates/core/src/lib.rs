//! Score-based weight pruning during fine-tuning.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod optim;
pub mod oracles;
pub mod pruners;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
