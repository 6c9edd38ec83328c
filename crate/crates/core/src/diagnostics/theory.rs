//! The single-outlier model `x = α·eᵢ + z`, `z ~ N(0, I_D)`.
//!
//! [`theory_kurtosis`] is the closed-form expected kurtosis of the entries
//! of `x`; [`theory_norm_ratio`] approximates `‖x‖∞²/‖x‖₂²` before and after
//! the Householder reflection that maps `eᵢ` onto the uniform direction. The
//! Monte-Carlo helpers draw from the same model so the formulas can be
//! checked against sampling.

use super::{kurtosis, norm_ratio};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Parameters of the outlier model. `i` is a 0-based channel index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryModel {
    pub alpha: f64,
    pub dim: usize,
    pub i: usize,
}

impl TheoryModel {
    pub fn new(alpha: f64, dim: usize, i: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::config("alpha must be positive"));
        }
        if dim < 2 || i >= dim {
            return Err(Error::config("need dim >= 2 and i < dim"));
        }
        Ok(Self { alpha, dim, i })
    }
}

/// Expected kurtosis of the entries of `α·eᵢ + z` in dimension `D`.
///
/// ```
/// use outlierlab::diagnostics::theory_kurtosis;
/// assert_eq!(theory_kurtosis(0.0, 16).unwrap(), 3.0);
/// let d = 32.0;
/// assert!((theory_kurtosis(d, 32).unwrap() - 28.369140625).abs() < 1e-9);
/// ```
pub fn theory_kurtosis(alpha: f64, dim: usize) -> Result<f64> {
    if dim < 2 {
        return Err(Error::config("theory_kurtosis needs D >= 2"));
    }
    let d = dim as f64;
    let a2 = alpha * alpha;
    let a4 = a2 * a2;
    let num = 3.0 + a4 / d + 6.0 * a2 / d - 4.0 * a4 / (d * d) - 6.0 * a2 / (d * d) + 6.0 * a4 / d.powi(3)
        - 3.0 * a4 / d.powi(4);
    let den = 1.0 + 2.0 * a2 / d - 2.0 * a2 / (d * d) + a4 / (d * d) - 2.0 * a4 / d.powi(3) + a4 / d.powi(4);
    Ok(num / den)
}

/// Approximate `‖x‖∞²/‖x‖₂²` for large `α`: `α²/(α²+D)` unrotated, and
/// `(α + √(2D ln D))²/(D(α²+D))` after rotating the outlier onto the uniform
/// direction.
pub fn theory_norm_ratio(alpha: f64, dim: usize, rotated: bool) -> f64 {
    let d = dim as f64;
    let a2 = alpha * alpha;
    if rotated {
        (alpha + (2.0 * d * d.ln()).sqrt()).powi(2) / (d * (a2 + d))
    } else {
        a2 / (a2 + d)
    }
}

/// Householder reflection `H = I − 2vvᵀ/‖v‖²` with `v = eᵢ − 1/√D`, which
/// maps `eᵢ` to `(1/√D, …, 1/√D)`. `H` is symmetric and self-inverse.
///
/// ```
/// use outlierlab::diagnostics::rotate_to_uniform;
/// let y = rotate_to_uniform(&[1.0, 0.0], 0).unwrap();
/// let r = 0.5f64.sqrt();
/// assert!((y[0] - r).abs() < 1e-15 && (y[1] - r).abs() < 1e-15);
/// ```
pub fn rotate_to_uniform(x: &[f64], i: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 2 || i >= n {
        return Err(Error::config("rotate_to_uniform needs D >= 2 and i < D"));
    }
    let u = 1.0 / (n as f64).sqrt();
    // v = eᵢ − u·1, ‖v‖² = 2 − 2u
    let vv = 2.0 - 2.0 * u;
    let vx = x[i] - u * x.iter().sum::<f64>();
    let c = 2.0 * vx / vv;
    Ok(x.iter()
        .enumerate()
        .map(|(j, &xj)| {
            let vj = if j == i { 1.0 - u } else { -u };
            xj - c * vj
        })
        .collect())
}

/// One draw of `α·eᵢ + z`.
pub fn sample_outlier<R: Rng + ?Sized>(model: &TheoryModel, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..model.dim).map(|_| rng.sample(StandardNormal)).collect();
    x[model.i] += model.alpha;
    x
}

/// Mean per-vector kurtosis over `samples` draws of `α·eᵢ + z`.
pub fn monte_carlo_kurtosis(model: &TheoryModel, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::config("samples must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..samples {
        sum += kurtosis(&sample_outlier(model, &mut rng))?;
    }
    Ok(sum / samples as f64)
}

/// Mean statistics of `samples` outlier draws before and after
/// [`rotate_to_uniform`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationSummary {
    pub kurtosis_in: f64,
    pub kurtosis_out: f64,
    pub ratio_in: f64,
    pub ratio_out: f64,
}

pub fn monte_carlo_rotation(model: &TheoryModel, samples: usize, seed: u64) -> Result<RotationSummary> {
    if samples == 0 {
        return Err(Error::config("samples must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = [0.0; 4];
    for _ in 0..samples {
        let x = sample_outlier(model, &mut rng);
        let y = rotate_to_uniform(&x, model.i)?;
        acc[0] += kurtosis(&x)?;
        acc[1] += kurtosis(&y)?;
        acc[2] += norm_ratio(&x)?;
        acc[3] += norm_ratio(&y)?;
    }
    let n = samples as f64;
    Ok(RotationSummary {
        kurtosis_in: acc[0] / n,
        kurtosis_out: acc[1] / n,
        ratio_in: acc[2] / n,
        ratio_out: acc[3] / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_equal_dim_simplification() {
        for d in [8usize, 32, 128, 1024] {
            let df = d as f64;
            let simple = df - 4.0 + 12.0 / df - 6.0 / (df * df);
            assert!((theory_kurtosis(df, d).unwrap() - simple).abs() < 1e-9);
        }
        assert!(theory_kurtosis(1.0, 1).is_err());
    }

    #[test]
    fn monotone_in_dim() {
        let mut prev = 0.0;
        for d in 8..300 {
            let k = theory_kurtosis(d as f64, d).unwrap();
            assert!(k > prev);
            prev = k;
        }
    }

    #[test]
    fn norm_ratio_formulas() {
        assert!((theory_norm_ratio(1024.0, 1024, false) - 1024.0 / 1025.0).abs() < 1e-15);
        let d = 1024.0f64;
        let expanded = (d + 2.0 * (2.0 * d * d.ln()).sqrt() + 2.0 * d.ln()) / (d * d + d);
        assert!((theory_norm_ratio(d, 1024, true) - expanded).abs() < 1e-15);
    }

    #[test]
    fn householder_properties() {
        let d = 9;
        let mut e = vec![0.0; d];
        e[4] = 1.0;
        let y = rotate_to_uniform(&e, 4).unwrap();
        assert!(y.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let x: Vec<f64> = (0..d).map(|k| (k as f64 * 1.3).sin()).collect();
        let y = rotate_to_uniform(&x, 2).unwrap();
        let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n(&x) - n(&y)).abs() < 1e-12 * n(&x));
        let back = rotate_to_uniform(&y, 2).unwrap();
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn model_validation() {
        assert!(TheoryModel::new(0.0, 8, 0).is_err());
        assert!(TheoryModel::new(1.0, 8, 8).is_err());
        assert!(TheoryModel::new(1.0, 8, 7).is_ok());
    }
}
