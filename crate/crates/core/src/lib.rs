//! Two-hand motion synthesis from body dynamics and text prompts.
//!
//! The pipeline runs two condition-specific diffusion denoisers in
//! parallel (body-conditioned and text-conditioned), projects the
//! text-conditioned wrist-local hands into the body's global frame with
//! forward kinematics, and fuses the two streams with a cross-attention
//! blending transformer. The crate also ships the evaluation-metric suite
//! and a procedural toy gesture dataset so the whole thing trains and
//! evaluates offline.

pub mod autodiff;
pub mod blender;
pub mod checkpoint;
pub mod data_io;
pub mod diffusion;
pub mod error;
pub mod kinematics;
pub mod metrics;
pub mod motion_repr;
pub mod denoisers;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
