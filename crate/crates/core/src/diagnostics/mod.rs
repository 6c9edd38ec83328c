//! Outlier and attention-dominance statistics.
//!
//! All moments are population moments (divide by the count) and kurtosis is
//! reported without the excess convention, so a Gaussian scores 3.
//!
//! Position `0` of a captured sequence is the "first token"; everything after
//! it is "rest".

pub mod theory;

pub use theory::{
    monte_carlo_kurtosis, monte_carlo_rotation, rotate_to_uniform, sample_outlier, theory_kurtosis, theory_norm_ratio,
    RotationSummary, TheoryModel,
};

use crate::error::{Error, Result};
use crate::model::CaptureBuffers;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Fourth standardised moment `E[(x−μ)⁴] / E[(x−μ)²]²`.
///
/// ```
/// use outlierlab::diagnostics::kurtosis;
/// assert_eq!(kurtosis(&[1.0, -1.0, 1.0, -1.0]).unwrap(), 1.0);
/// assert!(kurtosis(&[2.0; 8]).is_err());
/// ```
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::Data(format!(
            "kurtosis needs at least 4 values, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in x {
        let d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    m2 /= n;
    m4 /= n;
    // Relative threshold: a constant vector can leave rounding residue.
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m2 <= (scale * 1e-12).powi(2) || m2 == 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(m4 / (m2 * m2))
}

/// `‖x‖∞² / ‖x‖₂²`, in `[1/D, 1]` for nonzero `x`.
pub fn norm_ratio(x: &[f64]) -> Result<f64> {
    let (mut sq, mut mx) = (0.0, 0.0f64);
    for &v in x {
        sq += v * v;
        mx = mx.max(v.abs());
    }
    if sq == 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(mx * mx / sq)
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data(
            "pearson needs two equal-length series of length >= 2".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Statistics for one layer's hidden state. Kurtoses and norm ratios are
/// `None` where the state was constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub kappa_first: Option<f64>,
    /// Mean over positions after the first.
    pub kappa_rest: Option<f64>,
    pub max_abs_first: f64,
    pub max_abs_rest: f64,
    pub norm_ratio_first: Option<f64>,
    pub norm_ratio_rest: Option<f64>,
    /// Some position in this layer had zero variance.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateStats {
    pub layers: Vec<LayerStats>,
}

fn mean_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl HiddenStateStats {
    pub fn mean_kappa_first(&self) -> Option<f64> {
        mean_some(self.layers.iter().map(|l| l.kappa_first))
    }

    pub fn mean_kappa_rest(&self) -> Option<f64> {
        mean_some(self.layers.iter().map(|l| l.kappa_rest))
    }

    pub fn mean_max_abs_first(&self) -> f64 {
        self.layers.iter().map(|l| l.max_abs_first).sum::<f64>() / self.layers.len() as f64
    }

    pub fn mean_max_abs_rest(&self) -> f64 {
        self.layers.iter().map(|l| l.max_abs_rest).sum::<f64>() / self.layers.len() as f64
    }

    /// Averages per-sequence reports layer by layer. Max-abs values are
    /// per-sequence maxima, so this is "max per sequence, then mean".
    pub fn average(reports: &[HiddenStateStats]) -> Result<HiddenStateStats> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Data("no reports to average".into()))?;
        let m = first.layers.len();
        if reports.iter().any(|r| r.layers.len() != m) {
            return Err(Error::Data("reports disagree on layer count".into()));
        }
        let n = reports.len() as f64;
        let layers = (0..m)
            .map(|i| {
                let col = || reports.iter().map(move |r| &r.layers[i]);
                LayerStats {
                    kappa_first: mean_some(col().map(|l| l.kappa_first)),
                    kappa_rest: mean_some(col().map(|l| l.kappa_rest)),
                    max_abs_first: col().map(|l| l.max_abs_first).sum::<f64>() / n,
                    max_abs_rest: col().map(|l| l.max_abs_rest).sum::<f64>() / n,
                    norm_ratio_first: mean_some(col().map(|l| l.norm_ratio_first)),
                    norm_ratio_rest: mean_some(col().map(|l| l.norm_ratio_rest)),
                    degenerate: col().any(|l| l.degenerate),
                }
            })
            .collect();
        Ok(HiddenStateStats { layers })
    }

    /// Layer-wise rows with the layer index normalised to `[0, 1]`.
    pub fn rows(&self, run_id: &str) -> Vec<LayerRow> {
        let m = self.layers.len();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerRow {
                run_id: run_id.to_string(),
                layer_index: i,
                layer_frac: if m > 1 { i as f64 / (m - 1) as f64 } else { 0.0 },
                stats: l.clone(),
            })
            .collect()
    }
}

/// Per-layer statistics of one captured sequence (`hidden_states` is
/// `[M, L, D]`).
pub fn hidden_state_report(capture: &CaptureBuffers) -> Result<HiddenStateStats> {
    let shape = capture.hidden_states.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len: capture.hidden_states.numel(),
        });
    }
    let (m, l, d) = (shape[0], shape[1], shape[2]);
    let data = capture.hidden_states.data();
    let layers = (0..m)
        .map(|layer| {
            let pos = |p: usize| &data[(layer * l + p) * d..(layer * l + p + 1) * d];
            let mut degenerate = false;
            let mut defined = |r: Result<f64>| match r {
                Ok(v) => Some(v),
                Err(_) => {
                    degenerate = true;
                    None
                }
            };
            let kappa_first = defined(kurtosis(pos(0)));
            let ratio_first = norm_ratio(pos(0)).ok();
            let mut kappas = Vec::new();
            let mut ratios = Vec::new();
            let mut max_rest = 0.0f64;
            for p in 1..l {
                kappas.push(defined(kurtosis(pos(p))));
                ratios.push(norm_ratio(pos(p)).ok());
                max_rest = max_rest.max(max_abs(pos(p)));
            }
            LayerStats {
                kappa_first,
                kappa_rest: mean_some(kappas.into_iter()),
                max_abs_first: max_abs(pos(0)),
                max_abs_rest: max_rest,
                norm_ratio_first: ratio_first,
                norm_ratio_rest: mean_some(ratios.into_iter()),
                degenerate,
            }
        })
        .collect();
    Ok(HiddenStateStats { layers })
}

/// One row of the layer-wise CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub run_id: String,
    pub layer_index: usize,
    pub layer_frac: f64,
    pub stats: LayerStats,
}

pub const LAYER_CSV_HEADER: &str =
    "run_id,layer_index,layer_frac,kappa_first,kappa_rest,max_abs_first,max_abs_rest,norm_ratio_first,norm_ratio_rest";

/// Writes the layer-wise CSV. Undefined (degenerate) values are left empty.
pub fn write_layer_csv<W: Write>(mut w: W, rows: &[LayerRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
    writeln!(w, "{LAYER_CSV_HEADER}")?;
    for r in rows {
        let s = &r.stats;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.layer_index,
            r.layer_frac,
            opt(s.kappa_first),
            opt(s.kappa_rest),
            s.max_abs_first,
            s.max_abs_rest,
            opt(s.norm_ratio_first),
            opt(s.norm_ratio_rest)
        )?;
    }
    Ok(())
}

/// Pearson correlation between per-layer `kappa_rest` and `norm_ratio_rest`
/// over rows where both are defined.
pub fn kurtosis_ratio_correlation(rows: &[LayerRow]) -> Result<f64> {
    let (k, r): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|row| Some((row.stats.kappa_rest?, row.stats.norm_ratio_rest?)))
        .unzip();
    pearson(&k, &r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Fraction of (query, head) pairs whose most-attended key is key 0.
    pub pct_first_argmax: f64,
    /// Attention mass on key 0 over total attention mass.
    pub share_first: f64,
    /// Sum of all attention weights.
    pub total_mass: f64,
    /// Number of (query, head) pairs aggregated.
    pub pairs: usize,
}

impl AttentionStats {
    /// Pools reports with equal weight per (query, head) pair.
    pub fn combine(reports: &[AttentionStats]) -> Result<AttentionStats> {
        let pairs: usize = reports.iter().map(|r| r.pairs).sum();
        let total: f64 = reports.iter().map(|r| r.total_mass).sum();
        if pairs == 0 {
            return Err(Error::Data("no attention reports to combine".into()));
        }
        let first: f64 = reports.iter().map(|r| r.pct_first_argmax * r.pairs as f64).sum();
        let mass_first: f64 = reports.iter().map(|r| r.share_first * r.total_mass).sum();
        Ok(AttentionStats {
            pct_first_argmax: first / pairs as f64,
            share_first: if total > 0.0 { mass_first / total } else { 0.0 },
            total_mass: total,
            pairs,
        })
    }
}

/// Argmax and mass statistics over maps of shape `[..., L, L]` (typically
/// `[M, H, L, L]`). Ties in the argmax go to the lowest key index.
pub fn attention_report(maps: &Tensor) -> Result<AttentionStats> {
    let shape = maps.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len: maps.numel(),
        });
    }
    let l = shape[shape.len() - 1];
    let (mut first, mut pairs) = (0usize, 0usize);
    let (mut mass_first, mut total) = (0.0, 0.0);
    for row in maps.data().chunks_exact(l) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        first += usize::from(best == 0);
        pairs += 1;
        mass_first += row[0];
        total += row.iter().sum::<f64>();
    }
    Ok(AttentionStats {
        pct_first_argmax: first as f64 / pairs as f64,
        share_first: if total > 0.0 { mass_first / total } else { 0.0 },
        total_mass: total,
        pairs,
    })
}

/// One line of the summary table: a trained model's headline metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub parameters: usize,
    pub softmax_plus_one: bool,
    pub ortho_adam: bool,
    pub ppl: f64,
    pub kurtosis_first: Option<f64>,
    pub kurtosis_rest: Option<f64>,
    pub max_abs_first: f64,
    pub max_abs_rest: f64,
    pub pct_first_attn: f64,
}
