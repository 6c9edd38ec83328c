//! Data ingestion, configuration, the training loop, evaluation and
//! ablation grids.

pub mod ablate;
pub mod config;
pub mod data;
pub mod eval;
pub mod schedule;
pub mod train;

pub use ablate::{ablate, write_ablation_csv, AblationRow, GridSpec, ABLATION_CSV_HEADER};
pub use config::RunConfig;
pub use data::{synthetic_corpus, tokenize_bytes, Batch, Batcher, Corpus, BYTE_VOCAB};
pub use eval::{evaluate, perplexity, EvalReport};
pub use schedule::{lr_multiplier, Schedule};
pub use train::{
    checkpoint_run_config, metrics_csv, run_training, MetricsRow, RunOutcome, Trainer, CHECKPOINT_FILE,
    METRICS_CSV_HEADER,
};
