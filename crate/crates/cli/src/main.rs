use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use outlierlab::diagnostics::{
    monte_carlo_kurtosis, monte_carlo_rotation, theory_kurtosis, theory_norm_ratio, write_layer_csv, TheoryModel,
};
use outlierlab::harness::{
    ablate, checkpoint_run_config, evaluate, perplexity, run_training, synthetic_corpus, write_ablation_csv, Corpus,
    GridSpec, RunConfig, CHECKPOINT_FILE,
};
use outlierlab::model::checkpoint::Checkpoint;
use outlierlab::quant::{quantize_model, QuantPreset, QuantReport};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "outlierlab",
    version,
    about = "Train miniature transformers and measure outliers and attention sinks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key=value configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a configuration key, e.g. --set model.d_model=32.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Validation perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Validation windows to use (0 = all).
        #[arg(long, default_value_t = 0)]
        windows: usize,
    },
    /// Full hidden-state and attention diagnostics of a checkpoint.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report path; the layer-wise CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        windows: usize,
    },
    /// Perplexity after post-training fake quantisation.
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        /// fine, moderate, coarse, w4 or all.
        #[arg(long)]
        preset: String,
        /// Defaults to the corpus recorded in the checkpoint.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        windows: usize,
    },
    /// Train every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Defaults to `corpus_path` from the grid file.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Defaults to ablation.csv in the grid's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form outlier model against Monte-Carlo sampling.
    Theory {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a deterministic synthetic text corpus.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Checkpoint plus the sequence length it was trained with.
fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Option<RunConfig>, usize)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let run = checkpoint_run_config(&ckpt);
    let seq_len = run.as_ref().map_or(ckpt.model.config().max_seq_len, |r| r.seq_len);
    Ok((ckpt, run, seq_len))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, set, resume } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            for pair in &set {
                cfg.set_pair(pair)?;
            }
            cfg.apply_env()?;
            cfg.validate()?;
            let corpus_path = cfg.corpus_path.clone().context("corpus_path is not set")?;
            let corpus = Corpus::load(&corpus_path, cfg.seq_len)?;
            let ckpt_path = cfg.output_dir.join(CHECKPOINT_FILE);
            let previous = if resume && ckpt_path.exists() {
                Some(Checkpoint::load(&ckpt_path)?)
            } else {
                None
            };
            let out = run_training(&cfg, corpus, previous)?;
            print_json(&json!({
                "output_dir": cfg.output_dir,
                "steps": out.trainer.step(),
                "final_train_loss": out.trainer.metrics().last().map(|m| m.train_loss),
                "summary": out.report.summary(&cfg.output_dir.display().to_string(), out.trainer.model(), cfg.optimizer.kind),
            }))
        }
        Command::Eval { ckpt, corpus, windows } => {
            let (ckpt, _, seq_len) = load_checkpoint(&ckpt)?;
            let data = Corpus::load(&corpus, seq_len)?;
            let ppl = perplexity(&ckpt.model, &data.valid, seq_len, windows, None)?;
            print_json(&json!({ "ppl": ppl, "seq_len": seq_len }))
        }
        Command::Diagnose {
            ckpt,
            corpus,
            out,
            windows,
        } => {
            let (ckpt, run, seq_len) = load_checkpoint(&ckpt)?;
            let data = Corpus::load(&corpus, seq_len)?;
            let report = evaluate(&ckpt.model, &data.valid, seq_len, windows, None)?;
            let kind = run.map_or(outlierlab::OptimizerKind::Adam, |r| r.optimizer.kind);
            let run_id = out
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            let value = json!({
                "table": report.summary(&run_id, &ckpt.model, kind),
                "report": report,
            });
            std::fs::write(&out, serde_json::to_string_pretty(&value)?)?;
            let mut csv = Vec::new();
            write_layer_csv(&mut csv, &report.hidden.rows(&run_id))?;
            std::fs::write(out.with_extension("csv"), csv)?;
            print_json(&value["table"])
        }
        Command::Quantize {
            ckpt,
            preset,
            corpus,
            out,
            windows,
        } => {
            let (ckpt, run, seq_len) = load_checkpoint(&ckpt)?;
            let corpus = match corpus.or_else(|| run.and_then(|r| r.corpus_path)) {
                Some(p) => p,
                None => bail!("no corpus given and none recorded in the checkpoint"),
            };
            let data = Corpus::load(&corpus, seq_len)?;
            let presets = if preset == "all" {
                QuantPreset::ALL.to_vec()
            } else {
                vec![preset.parse::<QuantPreset>()?]
            };
            let full = perplexity(&ckpt.model, &data.valid, seq_len, windows, None)?;
            let mut report = QuantReport::new(full);
            for p in presets {
                let q = quantize_model(&ckpt.model, p)?;
                let ppl = perplexity(&q.model, &data.valid, seq_len, windows, q.activation_hook())?;
                report.push(p, ppl, q.weights);
            }
            let value = serde_json::to_value(&report)?;
            if let Some(out) = out {
                std::fs::write(out, serde_json::to_string_pretty(&value)?)?;
            }
            print_json(&value)
        }
        Command::Ablate { grid, corpus, out } => {
            let spec = GridSpec::load(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let path = match corpus.or_else(|| spec.base.corpus_path.clone()) {
                Some(p) => p,
                None => bail!("no corpus given and none set in the grid"),
            };
            let data = Corpus::load(&path, spec.base.seq_len)?;
            let rows = ablate(&spec, &data)?;
            let out = out.unwrap_or_else(|| spec.base.output_dir.join("ablation.csv"));
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut csv = Vec::new();
            write_ablation_csv(&mut csv, &rows)?;
            std::fs::write(&out, &csv)?;
            print!("{}", String::from_utf8(csv)?);
            Ok(())
        }
        Command::Theory {
            dim,
            alpha,
            samples,
            seed,
        } => {
            let model = TheoryModel::new(alpha, dim, 0)?;
            let k_theory = theory_kurtosis(alpha, dim)?;
            let k_mc = monte_carlo_kurtosis(&model, samples, seed)?;
            let rot = monte_carlo_rotation(&model, samples, seed.wrapping_add(1))?;
            let r_in = theory_norm_ratio(alpha, dim, false);
            let r_out = theory_norm_ratio(alpha, dim, true);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
            print_json(&json!({
                "dim": dim,
                "alpha": alpha,
                "samples": samples,
                "kurtosis": { "theory": k_theory, "monte_carlo": k_mc, "rel_err": rel(k_mc, k_theory) },
                "norm_ratio": {
                    "unrotated": { "theory": r_in, "monte_carlo": rot.ratio_in, "rel_err": rel(rot.ratio_in, r_in) },
                    "rotated": { "theory": r_out, "monte_carlo": rot.ratio_out, "rel_err": rel(rot.ratio_out, r_out) },
                },
                "rotated_kurtosis": rot.kurtosis_out,
            }))
        }
        Command::Corpus { out, bytes, seed } => {
            std::fs::write(&out, synthetic_corpus(bytes, seed))?;
            println!("wrote {bytes} bytes to {}", out.display());
            Ok(())
        }
    }
}
