//! Dual recursive feedback (DRF) guidance for diffusion samplers.
//!
//! The crate is organised around a small set of shared types: [`Latent`] arrays,
//! a [`NoiseSchedule`] with its inference [`StepGrid`], and the [`ScoreModel`]
//! trait. Samplers, the controllable denoise step, the DRF refinement loop, the
//! proxy metrics and the toy fusion benchmark build on those.

// Range checks are written `!(x >= 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod control;
pub mod drf;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{DrfError, Result};
pub use latent::{Latent, Shape};
pub use schedule::{NoiseSchedule, StepGrid};
pub use score::{Condition, ScoreModel};
