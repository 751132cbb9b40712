// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching, gradient-bridge steering and patched generation on a
//! toy decoder-only transformer.
//!
//! The pipeline runs two copies of one model. The *encoder* reads a dialogue
//! and exposes its residual stream at layer `ℓ`. The *decoder* reads a
//! placeholder span whose layer-`ℓ` activations are replaced by the encoder's,
//! followed by a question or task instruction. Tracing measures what the
//! decoder can answer from those activations. Steering trains low-rank
//! adapters in encoder layers `0..=ℓ` through the frozen decoder. Generation
//! conditions the decoder on the steered activations.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod digest;
pub mod error;
pub mod model;
pub mod optim;
pub mod steering;
pub mod taskgen;
pub mod tracing;

pub use error::{Error, Result};
