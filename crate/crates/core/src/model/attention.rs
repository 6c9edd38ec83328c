//! Causal attention normalisation: canonical softmax and softmax-1.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    /// `exp(x_i) / Σ_j exp(x_j)`; each row sums to one.
    Softmax,
    /// `exp(x_i) / (1 + Σ_j exp(x_j))`; each row sums to less than one, so a
    /// head can attend nowhere.
    SoftmaxPlusOne,
}

/// Number of visible keys for `query`. Keys `0..allowed` are visible.
///
/// With `relax_k > 0` the first `relax_k` positions see each other in both
/// directions; everything after is strictly causal.
pub fn allowed_keys(query: usize, seq_len: usize, relax_k: usize) -> usize {
    (query + 1).max(relax_k).min(seq_len)
}

/// Normalises one row of logits. Entries at index `>= allowed` are masked and
/// come out as exactly zero.
///
/// Stabilised with `m = max(0, max_j x_j)` for softmax-1 so the implicit zero
/// logit never overflows, and `m = max_j x_j` for canonical softmax.
pub fn softmax_row(logits: &[f64], allowed: usize, variant: AttentionVariant, out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(logits.len(), out.len());
    let visible = &logits[..allowed];
    out[allowed..].fill(0.0);
    match variant {
        AttentionVariant::Softmax => {
            if allowed == 0 {
                return Err(Error::AllMasked { query: 0 });
            }
            let m = visible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(visible) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in &mut out[..allowed] {
                *o /= sum;
            }
        }
        AttentionVariant::SoftmaxPlusOne => {
            let m = visible.iter().copied().fold(0.0, f64::max);
            let mut sum = (-m).exp();
            for (o, &x) in out.iter_mut().zip(visible) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in &mut out[..allowed] {
                *o /= sum;
            }
        }
    }
    Ok(())
}

/// Vector-Jacobian product of a normalised row. Both variants share the
/// Jacobian `diag(p) - p pᵀ`, so `dx = p ⊙ (dp - ⟨p, dp⟩)`.
pub(crate) fn softmax_row_backward(p: &[f64], dp: &[f64], dx: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((d, &pi), &dpi) in dx.iter_mut().zip(p).zip(dp) {
        *d = pi * (dpi - dot);
    }
}

/// Applies the causal mask and normalisation to every trailing `L×L` slice of
/// `logits`.
pub fn softmax_causal(logits: &Tensor, variant: AttentionVariant, relax_k: usize) -> Result<Tensor> {
    let seq = check_square(logits)?;
    let mut out = vec![0.0; logits.numel()];
    for (slice_in, slice_out) in logits.data().chunks(seq * seq).zip(out.chunks_mut(seq * seq)) {
        for q in 0..seq {
            let allowed = allowed_keys(q, seq, relax_k);
            softmax_row(
                &slice_in[q * seq..(q + 1) * seq],
                allowed,
                variant,
                &mut slice_out[q * seq..(q + 1) * seq],
            )
            .map_err(|_| Error::AllMasked { query: q })?;
        }
    }
    Tensor::new(logits.shape(), out)
}

pub(crate) fn check_square(t: &Tensor) -> Result<usize> {
    let s = t.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::ShapeMismatch {
            op: "softmax_causal",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    Ok(s[s.len() - 1])
}
