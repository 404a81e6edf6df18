//! Timestep-aware post-training quantization for diffusion transformers.
//!
//! The crate ships a small deterministic diffusion-transformer denoiser and the
//! machinery to quantize it:
//!
//! * [`fisher`] estimates per-layer, per-timestep Fisher sensitivity and turns it
//!   into temporal importance weights,
//! * [`calib`] builds importance-weighted Hessians and runs GPTQ-style weight rounding,
//! * [`search`] allocates per-timestep activation bit-widths with a Pareto beam search,
//! * [`pipeline`] wires the stages together and persists the artifacts.

pub mod calib;
pub mod error;
pub mod fisher;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quant;
pub mod search;

pub use error::{Error, Result};
