//! Goal-driven trajectory prediction.
//!
//! A dual-channel recurrent model: a goal channel ranks the destinations of a
//! scene, and a trajectory channel decodes future positions while attending
//! over goal-modulated destination features at every step.

pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod scene;
pub mod tensor;

pub use error::{GtpError, Result};
