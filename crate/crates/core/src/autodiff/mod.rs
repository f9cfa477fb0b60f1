//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive op as it executes. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and yields a
//! gradient per parameter.

mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckEntry, GradCheckOptions, GradCheckReport, HasParams};
pub use kernels::Padding;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{
    softmax_tensor, squash_tensor, squash_vec, Activation, BackwardFault, BatchNormMode, BatchNormOutput, Gradients,
    Tape, Var,
};
pub(crate) use tape::margin_loss_value;
