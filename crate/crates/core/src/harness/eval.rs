use super::data::{window, window_count};
use crate::diagnostics::{attention_report, hidden_state_report, AttentionStats, HiddenStateStats, SummaryRow};
use crate::error::{Error, Result};
use crate::model::{loss_mask, ActivationHook, Model};
use crate::optim::OptimizerKind;
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `exp` of the mean next-token NLL.
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub sequences: usize,
    /// Per-sequence statistics averaged over sequences (max-abs values are
    /// per-sequence maxima, then averaged).
    pub hidden: HiddenStateStats,
    pub attention: AttentionStats,
}

impl EvalReport {
    pub fn summary(&self, name: &str, model: &Model, optimizer: OptimizerKind) -> SummaryRow {
        SummaryRow {
            model: name.to_string(),
            parameters: model.params().num_elements(),
            softmax_plus_one: model.config().attention == crate::model::AttentionVariant::SoftmaxPlusOne,
            ortho_adam: optimizer == OptimizerKind::OrthoAdam,
            ppl: self.ppl,
            kurtosis_first: self.hidden.mean_kappa_first(),
            kurtosis_rest: self.hidden.mean_kappa_rest(),
            max_abs_first: self.hidden.mean_max_abs_first(),
            max_abs_rest: self.hidden.mean_max_abs_rest(),
            pct_first_attn: self.attention.pct_first_argmax,
        }
    }
}

fn windows_to_use(tokens: &[usize], seq_len: usize, max_windows: usize) -> Result<usize> {
    let n = window_count(tokens.len(), seq_len);
    if n == 0 {
        return Err(Error::Data(format!(
            "evaluation split of {} tokens has no window of {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    Ok(if max_windows == 0 { n } else { n.min(max_windows) })
}

/// Sum of next-token NLL over the positions kept by the loss mask.
fn nll_sum(logits: &[f64], vocab: usize, targets: &[usize], included: &[bool]) -> (f64, usize) {
    let (mut sum, mut count) = (0.0, 0);
    for (r, (&t, &inc)) in targets.iter().zip(included).enumerate() {
        if !inc {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        sum += lse - row[t];
        count += 1;
    }
    (sum, count)
}

fn run(
    model: &Model,
    tokens: &[usize],
    seq_len: usize,
    max_windows: usize,
    hook: Option<&dyn ActivationHook>,
    diagnostics: bool,
) -> Result<(f64, usize, usize, Vec<HiddenStateStats>, Vec<AttentionStats>)> {
    let n = windows_to_use(tokens, seq_len, max_windows)?;
    let vocab = model.config().vocab_size;
    let (mut sum, mut count) = (0.0, 0);
    let (mut hidden, mut attention) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(EVAL_BATCH) {
        let nb = EVAL_BATCH.min(n - start);
        let mut inputs = Vec::with_capacity(nb * seq_len);
        let mut targets = Vec::with_capacity(nb * seq_len);
        for w in start..start + nb {
            let (x, y) = window(tokens, seq_len, w);
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        let mut tape = Tape::new();
        let fwd = model.forward_tape(&mut tape, &inputs, nb, 0, false, hook)?;
        let mask = loss_mask(nb, seq_len, model.config().causal_relax_k);
        let (s, c) = nll_sum(tape.value(fwd.logits).data(), vocab, &targets, &mask);
        sum += s;
        count += c;
        if diagnostics {
            for cap in fwd.capture(&tape, model.config())? {
                hidden.push(hidden_state_report(&cap)?);
                attention.push(attention_report(&cap.attention_maps)?);
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((sum, count, n, hidden, attention))
}

/// Perplexity over up to `max_windows` contiguous windows (0 = all).
pub fn perplexity(
    model: &Model,
    tokens: &[usize],
    seq_len: usize,
    max_windows: usize,
    hook: Option<&dyn ActivationHook>,
) -> Result<f64> {
    let (sum, count, ..) = run(model, tokens, seq_len, max_windows, hook, false)?;
    Ok((sum / count as f64).exp())
}

/// Perplexity plus hidden-state and attention diagnostics.
pub fn evaluate(
    model: &Model,
    tokens: &[usize],
    seq_len: usize,
    max_windows: usize,
    hook: Option<&dyn ActivationHook>,
) -> Result<EvalReport> {
    let (sum, count, n, hidden, attention) = run(model, tokens, seq_len, max_windows, hook, true)?;
    let mean_nll = sum / count as f64;
    Ok(EvalReport {
        ppl: mean_nll.exp(),
        mean_nll,
        tokens: count,
        sequences: n,
        hidden: HiddenStateStats::average(&hidden)?,
        attention: AttentionStats::combine(&attention)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                n_layers: 1,
                d_model: 16,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 8,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn untrained_ppl_is_near_vocab_size() {
        let tokens: Vec<usize> = (0..400).map(|i| (i * 31 + 7) % 256).collect();
        let r = evaluate(&tiny(), &tokens, 8, 0, None).unwrap();
        assert!(r.ppl > 200.0 && r.ppl <= 300.0, "{}", r.ppl);
        assert_eq!(r.sequences, 49);
        assert_eq!(r.tokens, 49 * 8);
        assert_eq!(r, evaluate(&tiny(), &tokens, 8, 0, None).unwrap());
        let p = perplexity(&tiny(), &tokens, 8, 0, None).unwrap();
        assert!((p - r.ppl).abs() < 1e-12);
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(evaluate(&tiny(), &[1, 2, 3], 8, 0, None).is_err());
    }
}
