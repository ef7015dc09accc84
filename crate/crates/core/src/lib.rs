//! Value-sign-flip negative guidance for joint-attention diffusion transformers,
//! with baselines, a toy rectified-flow model and an evaluation harness.

pub mod error;
pub mod eval;
pub mod flow;
pub mod guidance;
pub mod mmdit;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Mask, Matrix, Rng};
