// SPDX-License-Identifier: MIT OR Apache-2.0

//! Configurable decoder-only transformer with residual-stream taps and an
//! injection hook.
//!
//! Layer `ℓ` always means the residual stream *after* block `ℓ` (0-based).
//! An injection at `ℓ` replaces that stream at the chosen positions, so the
//! payload is what block `ℓ + 1` reads.

mod config;
mod forward;
mod infer;
mod pretrain;
mod weights;

pub use config::{ModelConfig, Site};
pub(crate) use forward::head;
pub use forward::{
    forward, forward_on_tape, run_blocks, BoundAdapters, BoundLayer, BoundWeights, ForwardOutput, Injection,
    TapeInjection,
};
pub use infer::{generate, Decoding, Session};
pub use pretrain::{next_token_loss, pretrain_lm, PretrainOutcome, Schedule};
pub use weights::{init_weights, LayerWeights, Weights};
