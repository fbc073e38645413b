//! Dialogue-level multimodal emotion recognition with parallel interaction
//! attention, dual-gated fusion, and self-distillation, on a from-scratch
//! f64 reverse-mode tape.

pub mod baseline;
pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{LpgError, Result};
