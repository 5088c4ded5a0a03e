//! Coverage-guaranteed interval prediction for post-fault voltage
//! trajectories.
//!
//! The pipeline, end to end:
//!
//! 1. [`data`] — a surrogate three-stage fault generator produces voltage
//!    trajectories per bus, segments each into an observed window and an
//!    unobserved tail, and assembles (input, query time, target) triplets.
//! 2. [`model`] — a deep operator network with an attention branch, a
//!    random-Fourier trunk, and shared-basis quantile heads predicts raw
//!    lower/upper quantile bounds, trained with the joint pinball loss on
//!    the reverse-mode [`tape`] with [`adam`].
//! 3. [`fed`] — neighbor buses pre-train collaboratively by periodic
//!    parameter averaging; only parameter vectors cross client boundaries.
//!    The target bus then fine-tunes with early stopping.
//! 4. [`conformal`] — split conformal calibration widens the raw intervals
//!    by the ⌈(n+1)(1−α)⌉-th smallest calibration score, giving finite-sample
//!    marginal coverage under exchangeability.
//! 5. [`eval`] — PICP/PINAW metrics over dense query grids of held-out
//!    trajectories, report and sweep emission.
//!
//! The `qafdon` binary exposes each stage as a subcommand; [`pipeline`]
//! holds the stage implementations the CLI calls, so library users can run
//! the same flows programmatically.

pub mod adam;
pub mod conformal;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{QafError, Result};
