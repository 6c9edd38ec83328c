//! LayerNorm and the two RMSNorm flavours.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Stabiliser added to the variance / mean square.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormVariant {
    LayerNorm,
    /// RMSNorm with a learned scale per channel.
    RmsNormPerChannel,
    /// RMSNorm with one learned scalar scale shared by every channel.
    RmsNormSingle,
}

impl NormVariant {
    /// Length of the `γ` parameter for width `d`.
    pub fn gamma_len(self, d: usize) -> usize {
        match self {
            NormVariant::RmsNormSingle => 1,
            _ => d,
        }
    }
}

/// Per-row forward results kept for the backward pass.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalises each row of `x` (row width `d`). `center` selects LayerNorm
/// (subtract the mean, divide by the standard deviation) over RMS scaling.
/// `gamma` is broadcast when it has a single element.
pub(crate) fn norm_forward(
    x: &[f64],
    d: usize,
    center: bool,
    gamma: &[f64],
    beta: Option<&[f64]>,
) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = if center { xr.iter().sum::<f64>() / d as f64 } else { 0.0 };
        let ms = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        rstd[r] = s;
        for c in 0..d {
            let h = (xr[c] - mean) * s;
            xhat[r * d + c] = h;
            let g = if gamma.len() == 1 { gamma[0] } else { gamma[c] };
            let b = beta.map_or(0.0, |b| b[c]);
            y[r * d + c] = h * g + b;
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn norm_backward(
    dy: &[f64],
    d: usize,
    center: bool,
    gamma: &[f64],
    cache: &NormCache,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; gamma.len()];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for c in 0..d {
            let g = if gamma.len() == 1 { gamma[0] } else { gamma[c] };
            dxhat[c] = dyr[c] * g;
            if gamma.len() == 1 {
                dgamma[0] += dyr[c] * xh[c];
            } else {
                dgamma[c] += dyr[c] * xh[c];
            }
            dbeta[c] += dyr[c];
        }
        let mean_dxhat = if center {
            dxhat.iter().sum::<f64>() / d as f64
        } else {
            0.0
        };
        let mean_proj = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let s = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = s * (dxhat[c] - mean_dxhat - xh[c] * mean_proj);
        }
    }
    (dx, dgamma, dbeta)
}

/// Applies a normalisation over the last axis of `x`.
///
/// `gamma` must hold `variant.gamma_len(D)` values; `beta` is only accepted for
/// LayerNorm.
pub fn normalize(x: &Tensor, variant: NormVariant, gamma: &[f64], beta: Option<&[f64]>) -> Result<Tensor> {
    let d = *x.shape().last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
    check_params(variant, d, gamma.len(), beta.map(<[f64]>::len))?;
    let (y, _) = norm_forward(x.data(), d, variant == NormVariant::LayerNorm, gamma, beta);
    Tensor::new(x.shape(), y)
}

pub(crate) fn check_params(variant: NormVariant, d: usize, gamma_len: usize, beta_len: Option<usize>) -> Result<()> {
    let beta_ok = match (variant, beta_len) {
        (_, None) => true,
        (NormVariant::LayerNorm, Some(n)) => n == d,
        _ => false,
    };
    if gamma_len != variant.gamma_len(d) || !beta_ok {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            lhs: vec![d],
            rhs: vec![gamma_len, beta_len.unwrap_or(0)],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_single_hand_value() {
        let x = Tensor::from_vec(vec![3.0, 4.0]).unwrap();
        let y = normalize(&x, NormVariant::RmsNormSingle, &[1.0], None).unwrap();
        let rms = (12.5f64 + 1e-5).sqrt();
        assert!((rms - 3.5355).abs() < 1e-4);
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);
        assert_eq!(y.data()[0], 3.0 / rms);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = Tensor::filled(&[2, 5], 7.25);
        let y = normalize(&x, NormVariant::LayerNorm, &[1.0; 5], None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_only_for_layernorm() {
        let x = Tensor::filled(&[1, 2], 1.0);
        assert!(normalize(&x, NormVariant::RmsNormPerChannel, &[1.0; 2], Some(&[0.0; 2])).is_err());
        assert!(normalize(&x, NormVariant::RmsNormSingle, &[1.0; 2], None).is_err());
    }
}
