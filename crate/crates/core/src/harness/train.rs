use super::config::RunConfig;
use super::data::{Batcher, Corpus};
use super::eval::{evaluate, perplexity, EvalReport};
use super::schedule::lr_multiplier;
use crate::diagnostics::write_layer_csv;
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::model::Model;
use crate::optim::Optimizer;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// One training step's record. `eval_ppl` is present on evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub eval_ppl: Option<f64>,
    pub lr: f64,
    /// Seconds since the trainer was created or resumed. Not persisted and not
    /// part of the deterministic CSV.
    #[serde(skip)]
    pub wall_time: f64,
}

pub const METRICS_CSV_HEADER: &str = "step,train_loss,eval_ppl,lr";

/// Deterministic metrics table (wall time excluded).
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let ppl = r.eval_ppl.map(|p| p.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.step, r.train_loss, ppl, r.lr).expect("write to string");
    }
    out
}

fn timing_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,wall_time\n");
    for r in rows {
        writeln!(out, "{},{}", r.step, r.wall_time).expect("write to string");
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TrainingState {
    config: RunConfig,
    step: u64,
    metrics: Vec<MetricsRow>,
}

/// A training run in progress.
pub struct Trainer {
    config: RunConfig,
    model: Model,
    optimizer: Optimizer,
    corpus: Corpus,
    batcher: Batcher,
    step: u64,
    metrics: Vec<MetricsRow>,
    started: Instant,
}

impl Trainer {
    /// Fresh model and optimizer, both seeded from `config.seed`.
    pub fn new(config: RunConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let mut optimizer = Optimizer::new(config.optimizer_config())?;
        optimizer.init(model.params())?;
        let batcher = Batcher::new(corpus.train.len(), config.seq_len, config.batch_size, config.seed)?;
        Ok(Self {
            config,
            model,
            optimizer,
            corpus,
            batcher,
            step: 0,
            metrics: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, corpus: Corpus) -> Result<Self> {
        let state: TrainingState = serde_json::from_value(
            checkpoint
                .training
                .ok_or_else(|| Error::Format("checkpoint carries no training state".into()))?,
        )?;
        let snapshot = checkpoint
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint carries no optimizer state".into()))?;
        let config = state.config;
        config.validate()?;
        if checkpoint.model.config() != &config.model {
            return Err(Error::Format("model config differs from the run config".into()));
        }
        let optimizer = snapshot.restore(checkpoint.model.params())?;
        if optimizer.step_count() != state.step {
            return Err(Error::Format("optimizer step differs from the training step".into()));
        }
        let batcher = Batcher::new(corpus.train.len(), config.seq_len, config.batch_size, config.seed)?;
        Ok(Self {
            config,
            model: checkpoint.model,
            optimizer,
            corpus,
            batcher,
            step: state.step,
            metrics: state.metrics,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.schedule.total_steps
    }

    fn is_eval_step(&self, t: u64) -> bool {
        let n = self.config.eval_interval;
        n > 0 && (t % n == 0 || t == self.config.schedule.total_steps)
    }

    /// One optimizer step; validation perplexity is attached on evaluation
    /// steps. A non-finite loss or update aborts with [`Error::Diverged`].
    pub fn train_step(&mut self) -> Result<&MetricsRow> {
        let t = self.step + 1;
        let lambda = lr_multiplier(t, &self.config.schedule)?;
        let diverged = |e: Error| Error::Diverged {
            step: t as usize,
            source: Box::new(e),
        };
        let batch = self.batcher.batch(&self.corpus.train, t);
        let (loss, grads) = self
            .model
            .loss_and_grads(&batch.inputs, &batch.targets, batch.batch)
            .map_err(diverged)?;
        if !loss.is_finite() {
            return Err(diverged(Error::NonFinite { op: "loss" }));
        }
        self.optimizer
            .step(self.model.params_mut(), &grads, lambda)
            .map_err(diverged)?;
        self.step = t;
        let eval_ppl = if self.is_eval_step(t) {
            Some(perplexity(
                &self.model,
                &self.corpus.valid,
                self.config.seq_len,
                self.config.eval_windows,
                None,
            )?)
        } else {
            None
        };
        self.metrics.push(MetricsRow {
            step: t,
            train_loss: loss,
            eval_ppl,
            lr: lambda * self.config.schedule.peak_lr,
            wall_time: self.started.elapsed().as_secs_f64(),
        });
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Trains until `until` completed steps (capped at the schedule length),
    /// calling `on_eval` after every evaluation step.
    pub fn run_to(&mut self, until: u64, mut on_eval: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        let until = until.min(self.config.schedule.total_steps);
        while self.step < until {
            self.train_step()?;
            if self.is_eval_step(self.step) {
                on_eval(self)?;
            }
        }
        Ok(())
    }

    /// Model, optimizer moments and the training state needed to resume.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = TrainingState {
            config: self.config.clone(),
            step: self.step,
            metrics: self.metrics.clone(),
        };
        Ok(Checkpoint {
            model: self.model.clone(),
            optimizer: Some(OptimizerSnapshot::capture(&self.optimizer)?),
            training: Some(serde_json::to_value(state)?),
        })
    }

    /// Full diagnostics on the validation split.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(
            &self.model,
            &self.corpus.valid,
            self.config.seq_len,
            self.config.eval_windows,
            None,
        )
    }
}

/// Reads the run configuration stored in a checkpoint written by the trainer.
pub fn checkpoint_run_config(checkpoint: &Checkpoint) -> Option<RunConfig> {
    let state: TrainingState = serde_json::from_value(checkpoint.training.clone()?).ok()?;
    Some(state.config)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(tmp, dir.join(name))?;
    Ok(())
}

/// Result of [`run_training`].
pub struct RunOutcome {
    pub trainer: Trainer,
    pub report: EvalReport,
}

/// Trains to completion, writing into `config.output_dir`:
/// `checkpoint.bin` (refreshed at every evaluation and at the end),
/// `metrics.csv`, `timing.csv`, `summary.json` and `layers.csv`.
/// With `resume`, training continues from the given checkpoint.
pub fn run_training(config: &RunConfig, corpus: Corpus, resume: Option<Checkpoint>) -> Result<RunOutcome> {
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, corpus)?,
        None => Trainer::new(config.clone(), corpus)?,
    };
    let total = trainer.config().schedule.total_steps;
    trainer.run_to(total, |t| {
        write_file(&dir, CHECKPOINT_FILE, &t.checkpoint()?.to_bytes()?)?;
        write_file(&dir, "metrics.csv", t.metrics_csv().as_bytes())
    })?;
    write_file(&dir, CHECKPOINT_FILE, &trainer.checkpoint()?.to_bytes()?)?;
    write_file(&dir, "metrics.csv", trainer.metrics_csv().as_bytes())?;
    write_file(&dir, "timing.csv", timing_csv(trainer.metrics()).as_bytes())?;

    let report = trainer.evaluate()?;
    let run_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let summary = serde_json::json!({
        "table": report.summary(&run_id, trainer.model(), trainer.config().optimizer.kind),
        "attention": report.attention,
        "eval": { "ppl": report.ppl, "mean_nll": report.mean_nll, "tokens": report.tokens, "sequences": report.sequences },
    });
    write_file(&dir, "summary.json", serde_json::to_string_pretty(&summary)?.as_bytes())?;
    let mut layers = Vec::new();
    write_layer_csv(&mut layers, &report.hidden.rows(&run_id))?;
    write_file(&dir, "layers.csv", &layers)?;
    Ok(RunOutcome { trainer, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synthetic_corpus;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::parse_str(
            "model.n_layers=1\nmodel.d_model=16\nmodel.n_heads=2\nmodel.d_ff=32\nmodel.max_seq_len=16\n\
             seq_len=16\nbatch_size=2\nschedule.warmup_steps=2\nschedule.total_steps=6\neval_interval=3\neval_windows=4",
        )
        .unwrap();
        c.schedule.peak_lr = 3e-3;
        c
    }

    #[test]
    fn nan_loss_is_reported_with_its_step() {
        let corpus = Corpus::from_bytes(&synthetic_corpus(4000, 0), 16).unwrap();
        let mut t = Trainer::new(small_config(), corpus).unwrap();
        t.train_step().unwrap();
        t.model.params_mut().get_mut("lm_head.weight").unwrap().data_mut()[0] = f64::NAN;
        match t.train_step() {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_rows_land_on_the_interval() {
        let corpus = Corpus::from_bytes(&synthetic_corpus(4000, 0), 16).unwrap();
        let mut t = Trainer::new(small_config(), corpus).unwrap();
        let mut seen = Vec::new();
        t.run_to(100, |t| {
            seen.push(t.step());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![3, 6]);
        assert!(t.is_done());
        let csv = t.metrics_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv
            .lines()
            .nth(3)
            .unwrap()
            .split(',')
            .nth(2)
            .unwrap()
            .parse::<f64>()
            .is_ok());
        assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(2), Some(""));
    }
}
