//! Differentiable nonparametric belief propagation for articulated 2-D
//! keypoint tracking.
//!
//! The crate bundles a small reverse-mode autodiff engine, learned MRF
//! potential networks, the pull message-passing inference loop, training with
//! the partial-belief likelihood, deterministic simulators for the pendulum
//! and spider tasks, and the evaluation/metrics pipeline. The `dnbp` binary
//! exposes it all behind `generate` / `train` / `track` / `eval` / `inspect`.

pub mod diffcore;
pub mod error;
pub mod rng;

pub use error::DnbpError;
