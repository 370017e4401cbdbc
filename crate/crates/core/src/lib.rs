//! A single transformer trained on two tasks at once: autoregressive
//! recognition of synthetic frame sequences under a causal mask, and
//! flow-matching infilling of frames under a bidirectional mask.
//!
//! Module map:
//! - [`numerics`]: tensors and the reverse-mode tape.
//! - [`model`]: shared backbone, embeddings, heads, packing and masks.
//! - [`flow`]: conditional flow matching loss, guidance and ODE sampling.
//! - [`tasks`]: recognition and synthesis pipelines on top of the backbone.
//! - [`data`]: synthetic paired corpus, oracle decoder and metrics.
//! - [`train`]: joint objective, AdamW, schedule, checkpoints and the run loop.
//! - [`eval`]: test-split evaluation shared by the CLI and the acceptance suite.

pub mod data;
pub mod eval;
pub mod flow;
pub mod frames;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod tokens;
pub mod train;

pub use frames::FrameMatrix;

use numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("sequence of {len} positions exceeds max_positions = {max}")]
    Capacity { len: usize, max: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite gradient at step {step} in `{param}` (norm {norm})")]
    NonFinite { step: u64, param: String, norm: f64 },
    #[error("interrupted at step {step}")]
    Interrupted { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
