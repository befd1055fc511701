//! Streaming long-sequence encoding with fixed-length propagated memories
//! and question-conditioned memory selection.

pub mod autograd;
mod binio;
pub mod clip;
pub mod config;
pub mod error;
pub mod eval;
pub mod lm;
pub mod mask;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod selector;
pub mod streaming;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use mask::AttentionMask;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
