//! Capsule networks and comparison baselines on a small reverse-mode tensor
//! engine, with the data pipeline and harness needed to benchmark them.

pub mod autodiff;
pub mod baselines;
pub mod capsnet;
pub mod data;
mod error;
pub mod harness;
pub mod init;
pub mod model;
mod tensor;

pub use error::{Error, Result};
pub use tensor::{shape_str, Tensor};
