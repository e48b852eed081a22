//! Expert-level sparsification of small mixture-of-experts language models.

pub mod calibration;
pub mod checkpoint;
pub mod corpus;
pub mod criteria;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod linalg;
pub mod model;
pub mod persistence;
pub mod pipeline;
pub mod pruning;

pub use error::{Error, ErrorClass, Result};
