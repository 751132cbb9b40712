// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal reverse-mode automatic differentiation over dense arrays.

mod real;
mod tape;
mod tensor;

pub use real::Real;
pub(crate) use tape::{log_softmax_at, silu as silu_scalar, softmax_row};
pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;
