//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use outlierlab::model::{AttentionVariant, Model, ModelConfig, NormVariant, PositionVariant};
use outlierlab::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Largest elementwise difference divided by the largest reference magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Builds `f(inputs)` on a tape and contracts it with fixed random weights,
/// so every output element contributes to the scalar.
fn contracted(f: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor], trainable: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(randn(&shape, 0xfeed));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    (tape, vars, loss)
}

/// Worst relative error between tape gradients and central differences over
/// every input of `f`.
pub fn check_op(f: impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let (mut tape, vars, loss) = contracted(&f, inputs, true);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect();
    let eval = |xs: &[Tensor]| {
        let (tape, _, loss) = contracted(&f, xs, false);
        tape.value(loss).data()[0]
    };
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&xs);
            *n = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(grad, &numeric));
    }
    worst
}

/// D=8, one block, every optional parameter present.
pub fn tiny_config(attention: AttentionVariant, norm: NormVariant) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 256,
        max_seq_len: 8,
        attention,
        norm,
        position: PositionVariant::LearnedAbsolute,
        use_biases: true,
        causal_relax_k: 0,
    }
}

/// Token batch drawn from a small alphabet.
pub fn tokens(n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(97..110)).collect()
}

/// Worst per-parameter relative error of the model gradient against central
/// differences of the loss. Parameters are perturbed in place, so rows of the
/// embedding that no token touches must report a zero gradient.
pub fn check_model(model: &Model, inputs: &[usize], targets: &[usize], batch: usize) -> Vec<(String, f64)> {
    let (_, grads) = model.loss_and_grads(inputs, targets, batch).unwrap();
    let mut probe = model.clone();
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let mut out = Vec::new();
    for (name, grad) in names.iter().zip(&grads) {
        let mut numeric = vec![0.0; grad.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let x0 = model.params().get(name).unwrap().data()[i];
            probe.params_mut().get_mut(name).unwrap().data_mut()[i] = x0 + FD_STEP;
            let up = probe.loss_and_grads(inputs, targets, batch).unwrap().0;
            probe.params_mut().get_mut(name).unwrap().data_mut()[i] = x0 - FD_STEP;
            let down = probe.loss_and_grads(inputs, targets, batch).unwrap().0;
            probe.params_mut().get_mut(name).unwrap().data_mut()[i] = x0;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        out.push((name.clone(), rel_err(grad, &numeric)));
    }
    out
}

/// Plain Adam written from the update equations, for one flat parameter.
pub struct RefAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl RefAdam {
    pub fn new(n: usize, beta1: f64) -> Self {
        Self {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.beta2.powi(self.t));
            theta[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Outcome of one randomised quantisation round trip.
pub struct QuantTrial {
    /// Largest error divided by its unit's half-step bound (≤ 1 when the
    /// bound holds).
    pub worst_bound_ratio: f64,
    /// `(per-channel, per-tensor)` MSE for absmax, then zeropoint.
    pub mse: [(f64, f64); 2],
}

/// A random matrix whose rows carry different magnitudes, quantised with both
/// schemes at both granularities (channels along axis 0).
pub fn quant_trial(seed: u64) -> QuantTrial {
    use outlierlab::quant::{absmax_quantize, dequantize, error_bound, mse, zeropoint_quantize, Granularity};
    let mut r = rng(seed);
    let rows = r.random_range(2..12);
    let cols = r.random_range(4..40);
    let bits = [2u32, 3, 4, 8][r.random_range(0..4)];
    let gains: Vec<f64> = (0..rows).map(|_| 10f64.powf(r.random_range(-2.0..2.0))).collect();
    let x = Tensor::new(
        &[rows, cols],
        (0..rows * cols)
            .map(|i| gains[i / cols] * r.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .unwrap();

    let mut worst = 0.0f64;
    let mut mses = [[0.0; 2]; 2];
    for (s, quantize) in [
        absmax_quantize as fn(&Tensor, u32, Granularity) -> _,
        zeropoint_quantize,
    ]
    .into_iter()
    .enumerate()
    {
        for (g, granularity) in [Granularity::PerChannel { axis: 0 }, Granularity::PerTensor]
            .into_iter()
            .enumerate()
        {
            let q = quantize(&x, bits, granularity).unwrap();
            let y = dequantize(&q).unwrap();
            let bound = error_bound(&q);
            for (i, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
                let unit = if g == 0 { i / cols } else { 0 };
                let err = (a - b).abs();
                // exact units have a zero bound; allow rounding residue only
                let limit = bound[unit].max(1e-15 * a.abs().max(1.0));
                worst = worst.max(err / limit * (1.0 - 1e-9));
            }
            mses[s][g] = mse(&x, &y);
        }
    }
    QuantTrial {
        worst_bound_ratio: worst,
        mse: [(mses[0][0], mses[0][1]), (mses[1][0], mses[1][1])],
    }
}

/// Softmax-1 measurements over random logit rows of random length.
pub struct SoftmaxContract {
    /// Worst `|Σp − 1|` of canonical softmax.
    pub canonical_dev: f64,
    /// Largest softmax-1 row sum among rows whose max logit is below 25, where
    /// the missing mass `e^{−m}/(e^{−m} + Σ e^{x−m})` is far above rounding.
    pub plus_one_max_sum: f64,
    /// Largest softmax-1 row sum over all rows. With a max logit of 50 the
    /// missing mass is ~1e−22, so the computed sum can round to or just past 1.
    pub plus_one_max_sum_any: f64,
    /// Worst elementwise gap between the variants on rows with max logit ≥ 50.
    pub large_logit_gap: f64,
}

pub fn softmax_contract(rows: usize, seed: u64) -> SoftmaxContract {
    use outlierlab::model::softmax_causal;
    let mut r = rng(seed);
    let (mut dev, mut top, mut top_any, mut gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..rows {
        let n = r.random_range(1..33);
        let spread = [0.1, 1.0, 10.0, 100.0][i % 4];
        let mut x: Vec<f64> = (0..n).map(|_| spread * r.sample::<f64, _>(StandardNormal)).collect();
        let large = i % 2 == 0;
        if large {
            let j = r.random_range(0..n);
            x[j] = x.iter().fold(50.0f64, |m, v| m.max(*v)) + r.random_range(0.0..20.0);
        }
        // the last query of an n×n causal map sees the whole row
        let mut logits = vec![0.0; n * n];
        logits[(n - 1) * n..].copy_from_slice(&x);
        let t = Tensor::new(&[n, n], logits).unwrap();
        let p = softmax_causal(&t, AttentionVariant::Softmax, 0).unwrap();
        let p1 = softmax_causal(&t, AttentionVariant::SoftmaxPlusOne, 0).unwrap();
        let (row, row1) = (&p.data()[(n - 1) * n..], &p1.data()[(n - 1) * n..]);
        dev = dev.max((row.iter().sum::<f64>() - 1.0).abs());
        let sum1 = row1.iter().sum::<f64>();
        top_any = top_any.max(sum1);
        if x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) < 25.0 {
            top = top.max(sum1);
        }
        if large {
            gap = gap.max(row.iter().zip(row1).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
        }
    }
    SoftmaxContract {
        canonical_dev: dev,
        plus_one_max_sum: top,
        plus_one_max_sum_any: top_any,
        large_logit_gap: gap,
    }
}
