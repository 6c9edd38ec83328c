//! Run configuration in a flat `dotted.key = value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.d_model = 64
//! model.attention = softmax1
//! optimizer.kind = orthoadam
//! schedule.total_steps = 2000
//! ```
//!
//! Later assignments win, so command-line `--set key=value` overrides are
//! applied with [`RunConfig::set`] after the file. `RUN_SEED` overrides
//! `seed` last.

use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::model::{AttentionVariant, ModelConfig, NormVariant, PositionVariant};
use crate::optim::{OptimizerConfig, OptimizerKind, OrthoBackend, DEFAULT_BLOCK_SIZE};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `eta` and `seed` are overwritten from `schedule.peak_lr` and `seed`.
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seq_len: usize,
    pub corpus_path: Option<PathBuf>,
    pub seed: u64,
    /// Steps between validation evaluations and checkpoints; 0 disables both.
    pub eval_interval: u64,
    /// Validation windows used per evaluation; 0 means all of them.
    pub eval_windows: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            batch_size: 8,
            seq_len: 64,
            corpus_path: None,
            seed: 0,
            eval_interval: 200,
            eval_windows: 64,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

pub fn parse_attention(value: &str) -> Result<AttentionVariant> {
    match value.to_ascii_lowercase().as_str() {
        "softmax" => Ok(AttentionVariant::Softmax),
        "softmax1" | "softmax+1" | "softmax_plus_one" => Ok(AttentionVariant::SoftmaxPlusOne),
        _ => Err(Error::config(format!("unknown attention variant `{value}`"))),
    }
}

pub fn parse_norm(value: &str) -> Result<NormVariant> {
    match value.to_ascii_lowercase().as_str() {
        "layernorm" => Ok(NormVariant::LayerNorm),
        "rmsnorm" | "rmsnorm_per_channel" => Ok(NormVariant::RmsNormPerChannel),
        "rmsnorm_single" => Ok(NormVariant::RmsNormSingle),
        _ => Err(Error::config(format!("unknown norm variant `{value}`"))),
    }
}

pub fn parse_position(value: &str) -> Result<PositionVariant> {
    match value.to_ascii_lowercase().as_str() {
        "learned" | "absolute" => Ok(PositionVariant::LearnedAbsolute),
        "none" => Ok(PositionVariant::None),
        _ => Err(Error::config(format!("unknown position variant `{value}`"))),
    }
}

pub fn parse_optimizer(value: &str) -> Result<OptimizerKind> {
    match value.to_ascii_lowercase().as_str() {
        "sgd" => Ok(OptimizerKind::Sgd),
        "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
        "rmsprop" => Ok(OptimizerKind::RmsProp),
        "adam" => Ok(OptimizerKind::Adam),
        "orthoadam" => Ok(OptimizerKind::OrthoAdam),
        _ => Err(Error::config(format!("unknown optimizer `{value}`"))),
    }
}

fn backend_block(b: OrthoBackend) -> usize {
    match b {
        OrthoBackend::HadamardBlock { block_size } | OrthoBackend::Auto { block_size } => block_size,
        _ => DEFAULT_BLOCK_SIZE,
    }
}

fn with_block(b: OrthoBackend, block_size: usize) -> OrthoBackend {
    match b {
        OrthoBackend::HadamardBlock { .. } => OrthoBackend::HadamardBlock { block_size },
        OrthoBackend::Auto { .. } => OrthoBackend::Auto { block_size },
        other => other,
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        let m = &mut self.model;
        let o = &mut self.optimizer;
        match key {
            "model.n_layers" => m.n_layers = parse(key, value)?,
            "model.d_model" => m.d_model = parse(key, value)?,
            "model.n_heads" => m.n_heads = parse(key, value)?,
            "model.d_ff" => m.d_ff = parse(key, value)?,
            "model.vocab_size" => m.vocab_size = parse(key, value)?,
            "model.max_seq_len" => m.max_seq_len = parse(key, value)?,
            "model.attention" => m.attention = parse_attention(value)?,
            "model.norm" => m.norm = parse_norm(value)?,
            "model.position" => m.position = parse_position(value)?,
            "model.use_biases" => m.use_biases = parse_bool(key, value)?,
            "model.causal_relax_k" => m.causal_relax_k = parse(key, value)?,
            "optimizer.kind" => o.kind = parse_optimizer(value)?,
            "optimizer.beta1" => o.beta1 = parse(key, value)?,
            "optimizer.beta2" => o.beta2 = parse(key, value)?,
            "optimizer.epsilon" => o.epsilon = parse(key, value)?,
            "optimizer.momentum" => o.momentum = parse(key, value)?,
            "optimizer.weight_decay" => o.weight_decay = parse(key, value)?,
            "optimizer.dense_limit" => o.dense_limit = parse(key, value)?,
            "optimizer.backend" => {
                let block = backend_block(o.ortho_backend);
                o.ortho_backend = match value.to_ascii_lowercase().as_str() {
                    "identity" => OrthoBackend::Identity,
                    "dense" => OrthoBackend::DenseRandom,
                    "hadamard" => OrthoBackend::HadamardBlock { block_size: block },
                    "auto" => OrthoBackend::Auto { block_size: block },
                    _ => return Err(Error::config(format!("unknown ortho backend `{value}`"))),
                }
            }
            "optimizer.block_size" => {
                let block: usize = parse(key, value)?;
                o.ortho_backend = with_block(o.ortho_backend, block);
            }
            "schedule.warmup_steps" => self.schedule.warmup_steps = parse(key, value)?,
            "schedule.total_steps" => self.schedule.total_steps = parse(key, value)?,
            "schedule.peak_lr" => self.schedule.peak_lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "corpus_path" => self.corpus_path = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_windows" => self.eval_windows = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Parses assignments on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Honours the `RUN_SEED` environment variable.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var("RUN_SEED") {
            self.seed = parse("RUN_SEED", &seed)?;
        }
        Ok(())
    }

    /// Optimizer settings with the run-level learning rate and seed filled in.
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            eta: self.schedule.peak_lr,
            seed: self.seed,
            ..self.optimizer.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer_config().validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("batch_size and seq_len must be positive"));
        }
        if self.seq_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "seq_len {} exceeds model.max_seq_len {}",
                self.seq_len, self.model.max_seq_len
            )));
        }
        if self.model.causal_relax_k >= self.seq_len {
            return Err(Error::config("model.causal_relax_k leaves no position in the loss"));
        }
        if self.model.vocab_size < super::data::BYTE_VOCAB {
            return Err(Error::config("byte-level data needs model.vocab_size >= 256"));
        }
        Ok(())
    }
}
