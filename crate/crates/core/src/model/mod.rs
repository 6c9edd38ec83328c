//! Decoder-only transformer with switchable attention normalisation,
//! normalisation layers, positional encodings and biases.

pub mod attention;
pub mod checkpoint;
pub mod norm;
mod params;
mod transformer;

pub use attention::{allowed_keys, softmax_causal, AttentionVariant};
pub use norm::{normalize, NormVariant, NORM_EPS};
pub use params::{name_seed, ParamStore};
pub use transformer::{loss_mask, ActivationHook, CaptureBuffers, Forward, LinearSite, Model};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionVariant {
    LearnedAbsolute,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attention: AttentionVariant,
    pub norm: NormVariant,
    pub position: PositionVariant,
    pub use_biases: bool,
    /// Number of leading positions that attend bidirectionally among
    /// themselves. Zero means strictly causal.
    pub causal_relax_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            max_seq_len: 64,
            attention: AttentionVariant::Softmax,
            norm: NormVariant::LayerNorm,
            position: PositionVariant::LearnedAbsolute,
            use_biases: true,
            causal_relax_k: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.causal_relax_k > self.max_seq_len {
            return Err(Error::config("causal_relax_k exceeds max_seq_len"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}
