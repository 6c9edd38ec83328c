//! Cartesian ablation grids.
//!
//! A grid file is a run configuration whose `grid.`-prefixed keys list
//! comma-separated alternatives:
//!
//! ```text
//! schedule.total_steps = 500
//! grid.model.attention = softmax, softmax1
//! grid.optimizer.kind = adam, orthoadam
//! ```
//!
//! Cells enumerate the product in declaration order (last axis fastest).
//! SGD cells train for `sgd_multiplier` (default 8) times as many steps.

use super::config::RunConfig;
use super::data::Corpus;
use super::train::run_training;
use crate::error::{Error, Result};
use crate::model::{AttentionVariant, Model, NormVariant, PositionVariant};
use crate::optim::OptimizerKind;
use std::io::Write;

pub const DEFAULT_SGD_MULTIPLIER: u64 = 8;

pub const ABLATION_CSV_HEADER: &str =
    "Biases,Position,Normalisation,Optimizer,Softmax+1?,PPL,Kurtosis,%First Attn,Max Abs Act";

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub base: RunConfig,
    pub axes: Vec<(String, Vec<String>)>,
    pub sgd_multiplier: u64,
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = RunConfig::default();
        let mut axes = Vec::new();
        let mut sgd_multiplier = DEFAULT_SGD_MULTIPLIER;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::config(format!("line {}: {e}", n + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(Error::config(format!("expected key=value, got `{line}`"))))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(axis) = k.strip_prefix("grid.") {
                let values: Vec<String> = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if values.is_empty() {
                    return Err(at(Error::config(format!("axis `{axis}` has no values"))));
                }
                // reject unknown keys and bad values up front
                let mut probe = base.clone();
                for value in &values {
                    probe.set(axis, value).map_err(at)?;
                }
                axes.push((axis.to_string(), values));
            } else if k == "sgd_multiplier" {
                sgd_multiplier = v
                    .parse()
                    .map_err(|_| at(Error::config("sgd_multiplier must be an integer")))?;
            } else {
                base.set(k, v).map_err(at)?;
            }
        }
        Ok(Self {
            base,
            axes,
            sgd_multiplier,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every cell's run configuration, validated.
    pub fn cells(&self) -> Result<Vec<RunConfig>> {
        let mut cells = vec![self.base.clone()];
        for (key, values) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    c.set(key, v)?;
                    next.push(c);
                }
            }
            cells = next;
        }
        for (i, c) in cells.iter_mut().enumerate() {
            if matches!(c.optimizer.kind, OptimizerKind::Sgd | OptimizerKind::SgdMomentum) {
                c.schedule.total_steps *= self.sgd_multiplier;
                c.schedule.warmup_steps *= self.sgd_multiplier;
            }
            c.output_dir = self.base.output_dir.join(format!("cell_{i:03}"));
            c.validate()
                .map_err(|e| Error::config(format!("infeasible cell {i}: {e}")))?;
        }
        Ok(cells)
    }
}

/// One ablation cell's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: RunConfig,
    pub ppl: f64,
    /// Mean over layers of the kurtosis after the first token.
    pub kurtosis: Option<f64>,
    pub pct_first_attn: f64,
    /// Mean over layers of the largest absolute hidden-state value.
    pub max_abs_act: f64,
    /// Checksum of the initial parameters.
    pub init_checksum: u64,
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "Yes"
    } else {
        "No"
    }
}

fn optimizer_label(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Sgd => "SGD w/o mom",
        OptimizerKind::SgdMomentum => "SGD w/mom",
        OptimizerKind::RmsProp => "RMSProp",
        OptimizerKind::Adam => "Adam",
        OptimizerKind::OrthoAdam => "OrthoAdam",
    }
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let m = &self.config.model;
        let norm = match m.norm {
            NormVariant::LayerNorm => "LayerNorm",
            NormVariant::RmsNormPerChannel => "RMSNorm-M",
            NormVariant::RmsNormSingle => "RMSNorm-S",
        };
        let position = match m.position {
            PositionVariant::LearnedAbsolute => "Absolute",
            PositionVariant::None => "None",
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            yes_no(m.use_biases),
            position,
            norm,
            optimizer_label(self.config.optimizer.kind),
            yes_no(m.attention == AttentionVariant::SoftmaxPlusOne),
            self.ppl,
            self.kurtosis.map(|k| k.to_string()).unwrap_or_default(),
            self.pct_first_attn,
            self.max_abs_act
        )
    }
}

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "{ABLATION_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Trains every cell in turn on `corpus` and collects the table rows.
pub fn ablate(spec: &GridSpec, corpus: &Corpus) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for cell in spec.cells()? {
        let init_checksum = Model::new(cell.model.clone(), cell.seed)?.params().checksum();
        let out = run_training(&cell, corpus.clone(), None)?;
        let h = &out.report.hidden;
        let max_abs_act = h
            .layers
            .iter()
            .map(|l| l.max_abs_first.max(l.max_abs_rest))
            .sum::<f64>()
            / h.layers.len() as f64;
        rows.push(AblationRow {
            ppl: out.report.ppl,
            kurtosis: h.mean_kappa_rest(),
            pct_first_attn: out.report.attention.pct_first_argmax,
            max_abs_act,
            init_checksum,
            config: cell,
        });
    }
    Ok(rows)
}
