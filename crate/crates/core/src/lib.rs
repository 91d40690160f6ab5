//! Target-aware joint spatio-temporal grounding (TJSTG) for audio-visual
//! question answering, built on a small f64 tensor library with tape-based
//! reverse-mode differentiation.

pub mod attn;
pub mod check;
pub mod checkpoint;
pub mod error;
pub mod head;
pub mod jtg;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;
pub mod tensor;
pub mod tsg;

pub use error::{Error, Result};
pub use tensor::Tensor;
