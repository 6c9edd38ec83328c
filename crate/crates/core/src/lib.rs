//! Miniature decoder-only transformers for studying first-token attention
//! dominance and outlier activations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! - [`model`]: the transformer, its attention/normalisation/position
//!   switches, capture buffers and checkpoints.
//! - [`optim`]: SGD, Adam, RMSProp and OrthoAdam with its orthogonal
//!   transforms.
//! - [`diagnostics`]: kurtosis, norm ratios, attention statistics and the
//!   closed-form outlier model.
//! - [`quant`]: absmax / zeropoint fake quantisation of linear layers.
//! - [`harness`]: data, schedules, configuration, training, evaluation and
//!   ablation grids.

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{Tape, Tensor, Var};

/// Compiles and runs the guide's snippets.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/tape.md")]
    struct Tape;
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/orthoadam.md")]
    struct OrthoAdam;
    #[doc = include_str!("../../../book/src/theory.md")]
    struct Theory;
    #[doc = include_str!("../../../book/src/quantisation.md")]
    struct Quantisation;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
}
