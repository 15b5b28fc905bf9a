//! Desk-scale reference-conditioned video diffusion transformer.
//!
//! The crate trains and analyzes a small DiT-style denoiser on synthetic
//! hand-object videos. Reference-object information is injected through
//! three cooperating mechanisms: channel-level condition assembly (masked
//! reference video, pooled mask and noisy latent concatenated per cell),
//! head-sliding rotary offsets that spread reference tokens across the
//! temporal axis, and a two-level spatial attention gate (a hard
//! information-flow mask plus a learned per-token soft gate).
//!
//! Everything is deterministic: random values are counter-based functions
//! of seeds, kernels are shared between traced and untraced execution, and
//! every analytic gradient is verifiable against central differences.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod hcu;
pub mod io;
pub mod metrics;
pub mod model;
pub mod kernels;
pub mod mask;
pub mod ops;
pub mod parallel;
pub mod rng;
pub mod rope;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
