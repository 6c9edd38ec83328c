//! Post-training fake quantisation of the block linear layers.
//!
//! Two schemes, both rounding half away from zero:
//!
//! - **absmax** (symmetric): `q = round(x · s)` with `s = (2^{N−1}−1)/absmax`,
//!   dequantised as `q / s`.
//! - **zeropoint** (affine): `Δ = (2^N−1)/(max−min)`,
//!   `Z = −round(min·Δ) − 2^{N−1}`, `q = clamp(round(x·Δ + Z))`, dequantised
//!   as `(q − Z)/Δ`.
//!
//! Scales are computed per tensor or per slice along one axis. Weights are
//! stored `[in, out]`, so their per-channel axis is 1 (output channels);
//! activations `[tokens, features]` also use axis 1.

use crate::error::{Error, Result};
use crate::model::{ActivationHook, LinearSite, Model};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Absmax,
    Zeropoint,
}

/// Integer payload plus per-unit scale metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub q: Vec<i32>,
    /// absmax: the factor `s` (1 for an all-zero unit); zeropoint: `Δ`
    /// (1 for a constant unit). One entry per unit.
    pub scale: Vec<f64>,
    /// Zeropoint offsets `Z`, one per unit; empty for absmax.
    pub zero_point: Vec<i32>,
    /// Constant value of a degenerate zeropoint unit, restored exactly.
    constant: Vec<Option<f64>>,
    pub n_bits: u32,
    pub granularity: Granularity,
    pub scheme: Scheme,
}

/// Maps every element to its granularity unit.
struct Units {
    count: usize,
    len: usize,
    inner: usize,
}

impl Units {
    fn new(shape: &[usize], g: Granularity) -> Result<Self> {
        match g {
            Granularity::PerTensor => Ok(Self {
                count: 1,
                len: 1,
                inner: usize::MAX,
            }),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() {
                    return Err(Error::InvalidAxis {
                        axis,
                        rank: shape.len(),
                    });
                }
                Ok(Self {
                    count: shape[axis],
                    len: shape[axis],
                    inner: shape[axis + 1..].iter().product(),
                })
            }
        }
    }

    fn of(&self, idx: usize) -> usize {
        if self.count == 1 {
            0
        } else {
            (idx / self.inner) % self.len
        }
    }
}

fn check_bits(n_bits: u32) -> Result<()> {
    if (2..=16).contains(&n_bits) {
        Ok(())
    } else {
        Err(Error::config(format!("unsupported bit width {n_bits}")))
    }
}

/// Symmetric quantisation scaled by the per-unit maximum magnitude.
///
/// ```
/// use outlierlab::quant::{absmax_quantize, Granularity};
/// use outlierlab::Tensor;
/// let x = Tensor::from_vec(vec![2.0, -1.0]).unwrap();
/// let q = absmax_quantize(&x, 8, Granularity::PerTensor).unwrap();
/// assert_eq!(q.q, vec![127, -64]);
/// assert_eq!(q.scale, vec![63.5]);
/// ```
pub fn absmax_quantize(x: &Tensor, n_bits: u32, granularity: Granularity) -> Result<QuantizedTensor> {
    check_bits(n_bits)?;
    let units = Units::new(x.shape(), granularity)?;
    let qmax = ((1i64 << (n_bits - 1)) - 1) as f64;
    let mut absmax = vec![0.0f64; units.count];
    for (i, v) in x.data().iter().enumerate() {
        let u = units.of(i);
        absmax[u] = absmax[u].max(v.abs());
    }
    let scale: Vec<f64> = absmax.iter().map(|&a| if a > 0.0 { qmax / a } else { 1.0 }).collect();
    let q = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let u = units.of(i);
            if absmax[u] == 0.0 {
                0
            } else {
                (v * scale[u]).round().clamp(-qmax, qmax) as i32
            }
        })
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        q,
        scale,
        zero_point: Vec::new(),
        constant: vec![None; units.count],
        n_bits,
        granularity,
        scheme: Scheme::Absmax,
    })
}

/// Affine quantisation covering each unit's `[min, max]` range.
///
/// ```
/// use outlierlab::quant::{dequantize, zeropoint_quantize, Granularity};
/// use outlierlab::Tensor;
/// let x = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
/// let q = zeropoint_quantize(&x, 4, Granularity::PerTensor).unwrap();
/// assert_eq!((q.scale[0], q.zero_point[0]), (5.0, -8));
/// assert_eq!(q.q, vec![-8, -3, 2, 7]);
/// assert_eq!(dequantize(&q).unwrap(), x);
/// ```
pub fn zeropoint_quantize(x: &Tensor, n_bits: u32, granularity: Granularity) -> Result<QuantizedTensor> {
    check_bits(n_bits)?;
    let units = Units::new(x.shape(), granularity)?;
    let half = 1i64 << (n_bits - 1);
    let (qmin, qmax) = (-half as f64, (half - 1) as f64);
    let levels = ((1i64 << n_bits) - 1) as f64;
    let mut lo = vec![f64::INFINITY; units.count];
    let mut hi = vec![f64::NEG_INFINITY; units.count];
    for (i, &v) in x.data().iter().enumerate() {
        let u = units.of(i);
        lo[u] = lo[u].min(v);
        hi[u] = hi[u].max(v);
    }
    let mut scale = Vec::with_capacity(units.count);
    let mut zero_point = Vec::with_capacity(units.count);
    let mut constant = Vec::with_capacity(units.count);
    for u in 0..units.count {
        if hi[u] > lo[u] {
            let delta = levels / (hi[u] - lo[u]);
            scale.push(delta);
            zero_point.push((-(lo[u] * delta).round() - half as f64) as i32);
            constant.push(None);
        } else {
            scale.push(1.0);
            zero_point.push(0);
            constant.push(Some(lo[u]));
        }
    }
    let q = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let u = units.of(i);
            if constant[u].is_some() {
                0
            } else {
                (v * scale[u] + zero_point[u] as f64).round().clamp(qmin, qmax) as i32
            }
        })
        .collect();
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        q,
        scale,
        zero_point,
        constant,
        n_bits,
        granularity,
        scheme: Scheme::Zeropoint,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let units = Units::new(&q.shape, q.granularity)?;
    let data =
        q.q.iter()
            .enumerate()
            .map(|(i, &v)| {
                let u = units.of(i);
                match (q.scheme, q.constant[u]) {
                    (Scheme::Zeropoint, Some(c)) => c,
                    (Scheme::Zeropoint, None) => (v - q.zero_point[u]) as f64 / q.scale[u],
                    (Scheme::Absmax, _) => v as f64 / q.scale[u],
                }
            })
            .collect();
    Tensor::new(&q.shape, data)
}

/// Quantise then dequantise.
pub fn fake_quantize(x: &Tensor, scheme: Scheme, n_bits: u32, granularity: Granularity) -> Result<Tensor> {
    let q = match scheme {
        Scheme::Absmax => absmax_quantize(x, n_bits, granularity)?,
        Scheme::Zeropoint => zeropoint_quantize(x, n_bits, granularity)?,
    };
    dequantize(&q)
}

/// Largest round-trip error guaranteed for each unit: half a step.
pub fn error_bound(q: &QuantizedTensor) -> Vec<f64> {
    match q.scheme {
        Scheme::Absmax => q.scale.iter().map(|s| 0.5 / s).collect(),
        Scheme::Zeropoint => q
            .scale
            .iter()
            .zip(&q.constant)
            .map(|(d, c)| if c.is_some() { 0.0 } else { 0.5 / d })
            .collect(),
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantPreset {
    /// 8-bit absmax, per-channel weights and input activations.
    Fine,
    /// 8-bit absmax, per-tensor weights and input activations.
    Moderate,
    /// Moderate plus per-tensor output activations.
    Coarse,
    /// 4-bit zeropoint, per-channel weights only.
    W4,
}

impl QuantPreset {
    pub const ALL: [QuantPreset; 4] = [
        QuantPreset::Coarse,
        QuantPreset::Moderate,
        QuantPreset::Fine,
        QuantPreset::W4,
    ];

    fn weight_spec(self) -> (Scheme, u32, Granularity) {
        match self {
            QuantPreset::Fine => (Scheme::Absmax, 8, Granularity::PerChannel { axis: 1 }),
            QuantPreset::Moderate | QuantPreset::Coarse => (Scheme::Absmax, 8, Granularity::PerTensor),
            QuantPreset::W4 => (Scheme::Zeropoint, 4, Granularity::PerChannel { axis: 1 }),
        }
    }
}

impl fmt::Display for QuantPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantPreset::Fine => "fine",
            QuantPreset::Moderate => "moderate",
            QuantPreset::Coarse => "coarse",
            QuantPreset::W4 => "w4",
        })
    }
}

impl FromStr for QuantPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(QuantPreset::Fine),
            "moderate" => Ok(QuantPreset::Moderate),
            "coarse" => Ok(QuantPreset::Coarse),
            "w4" => Ok(QuantPreset::W4),
            other => Err(Error::config(format!("unknown quantisation preset `{other}`"))),
        }
    }
}

/// Dynamic activation fake quantisation for a preset.
#[derive(Clone, Copy, Debug)]
pub struct QuantHook {
    pub preset: QuantPreset,
}

impl ActivationHook for QuantHook {
    fn linear_input(&self, _layer: usize, _site: LinearSite, x: &Tensor) -> Result<Option<Tensor>> {
        let g = match self.preset {
            QuantPreset::Fine => Granularity::PerChannel { axis: 1 },
            QuantPreset::Moderate | QuantPreset::Coarse => Granularity::PerTensor,
            QuantPreset::W4 => return Ok(None),
        };
        fake_quantize(x, Scheme::Absmax, 8, g).map(Some)
    }

    fn linear_output(&self, _layer: usize, _site: LinearSite, y: &Tensor) -> Result<Option<Tensor>> {
        match self.preset {
            QuantPreset::Coarse => fake_quantize(y, Scheme::Absmax, 8, Granularity::PerTensor).map(Some),
            _ => Ok(None),
        }
    }
}

/// Round-trip statistics of one quantised weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantStats {
    pub name: String,
    pub max_abs: f64,
    pub mse: f64,
}

/// A model whose block linear weights hold fake-quantised values, plus the
/// activation hook to evaluate it with.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub model: Model,
    pub hook: QuantHook,
    pub weights: Vec<WeightQuantStats>,
}

impl QuantizedModel {
    /// The hook to pass to the forward pass, `None` when the preset leaves
    /// activations untouched.
    pub fn activation_hook(&self) -> Option<&dyn ActivationHook> {
        match self.preset() {
            QuantPreset::W4 => None,
            _ => Some(&self.hook),
        }
    }

    pub fn preset(&self) -> QuantPreset {
        self.hook.preset
    }
}

/// Replaces every attention and MLP linear weight by its fake-quantised
/// value. Embeddings, norms, biases and the LM head are left in full
/// precision.
pub fn quantize_model(model: &Model, preset: QuantPreset) -> Result<QuantizedModel> {
    let (scheme, bits, g) = preset.weight_spec();
    let mut out = model.clone();
    let mut weights = Vec::new();
    for layer in 0..model.config().n_layers {
        for site in LinearSite::ALL {
            let name = format!("{}.weight", site.prefix(layer));
            let w = out.params_mut().get_mut(&name)?;
            let fq = fake_quantize(w, scheme, bits, g)?;
            weights.push(WeightQuantStats {
                name,
                max_abs: w.data().iter().fold(0.0f64, |a, v| a.max(v.abs())),
                mse: mse(w, &fq),
            });
            w.data_mut().copy_from_slice(fq.data());
        }
    }
    Ok(QuantizedModel {
        model: out,
        hook: QuantHook { preset },
        weights,
    })
}

/// One preset's outcome in a quantisation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetResult {
    pub preset: QuantPreset,
    pub ppl: f64,
    /// `ppl − full`.
    pub delta: f64,
    pub weights: Vec<WeightQuantStats>,
}

/// PPL under every preset; the flat fields follow the table layout
/// full, coarse, Δ, moderate, Δ, fine, Δ, 4-bit, Δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub full: f64,
    pub coarse: Option<f64>,
    pub coarse_delta: Option<f64>,
    pub moderate: Option<f64>,
    pub moderate_delta: Option<f64>,
    pub fine: Option<f64>,
    pub fine_delta: Option<f64>,
    #[serde(rename = "4bit")]
    pub w4: Option<f64>,
    #[serde(rename = "4bit_delta")]
    pub w4_delta: Option<f64>,
    pub presets: Vec<PresetResult>,
}

impl QuantReport {
    pub fn new(full: f64) -> Self {
        Self {
            full,
            coarse: None,
            coarse_delta: None,
            moderate: None,
            moderate_delta: None,
            fine: None,
            fine_delta: None,
            w4: None,
            w4_delta: None,
            presets: Vec::new(),
        }
    }

    pub fn push(&mut self, preset: QuantPreset, ppl: f64, weights: Vec<WeightQuantStats>) {
        let delta = ppl - self.full;
        let (p, d) = match preset {
            QuantPreset::Coarse => (&mut self.coarse, &mut self.coarse_delta),
            QuantPreset::Moderate => (&mut self.moderate, &mut self.moderate_delta),
            QuantPreset::Fine => (&mut self.fine, &mut self.fine_delta),
            QuantPreset::W4 => (&mut self.w4, &mut self.w4_delta),
        };
        *p = Some(ppl);
        *d = Some(delta);
        self.presets.push(PresetResult {
            preset,
            ppl,
            delta,
            weights,
        });
    }
}
