//! Delta-pruned multi-head self-attention for keyword-spotting transformers.
//!
//! The engine runs a KWT-style encoder in two modes: a dense reference
//! forward pass and a delta forward pass that threshold-encodes the
//! differences between consecutive tokens at six sites of the attention
//! block. Every matrix product reports executed and dense-equivalent
//! multiplications so the savings can be measured per stage and per layer.
//!
//! Module map:
//! - [`tensor`]: dense kernels and the [`MacCounter`].
//! - [`delta`]: row encoding, delta-regular and delta-delta products, and the
//!   incremental softmax.
//! - [`model`]: configuration, weights and both forward passes.
//! - [`accounting`]: closed-form bounds and report assembly.
//! - [`analysis`]: token-correlation statistics.
//! - [`io`]: container formats, generators and report emission.
//! - [`sweep`]: threshold sweeps and the run/compare/analyze drivers used by
//!   the command line.

pub mod accounting;
pub mod analysis;
pub mod delta;
mod error;
pub mod io;
pub mod model;
pub mod par;
mod real;
pub mod sweep;
pub mod tensor;

pub use accounting::{MacReport, StageId};
pub use error::{Error, Result};
pub use model::{EncoderWeights, ModelConfig, NormPlacement, Precision, ThresholdConfig};
pub use real::Real;
pub use tensor::{MacCounter, Matrix};
