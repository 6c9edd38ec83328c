//! SGD, SGD with momentum, RMSProp, Adam and OrthoAdam.
//!
//! Adam, RMSProp and OrthoAdam share one update path. For every parameter with
//! flattened gradient `g` and its fixed orthogonal transform `Q`:
//!
//! ```text
//! ḡ = Q·g
//! m̄ ← β₁·m̄ + (1 − β₁)·ḡ
//! v̄ ← β₂·v̄ + (1 − β₂)·ḡ²
//! m̂ = m̄ / (1 − β₁ᵗ),  v̂ = v̄ / (1 − β₂ᵗ)
//! s = Qᵀ·(m̂ / (√v̂ + ε))
//! θ ← θ − λₜ·η·s
//! ```
//!
//! Adam is the case `Q = I`; RMSProp additionally fixes `β₁ = 0`. Moments
//! live in the rotated basis, so no single coordinate of `θ` can accumulate
//! its own step size.

pub mod ortho;

pub use ortho::{fwht_normalized, make_ortho, OrthoBackend, OrthoTransform, DEFAULT_BLOCK_SIZE, DEFAULT_DENSE_LIMIT};

use crate::error::{Error, Result};
use crate::model::{name_seed, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    RmsProp,
    Adam,
    OrthoAdam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Peak learning rate `η`.
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub ortho_backend: OrthoBackend,
    pub dense_limit: usize,
    /// Must stay zero; the update rule has no decay term.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            eta: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            ortho_backend: OrthoBackend::Auto {
                block_size: DEFAULT_BLOCK_SIZE,
            },
            dense_limit: DEFAULT_DENSE_LIMIT,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eta > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::config("eta and epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::config("weight decay is not supported"));
        }
        Ok(())
    }

    fn effective_beta1(&self) -> f64 {
        match self.kind {
            OptimizerKind::RmsProp => 0.0,
            _ => self.beta1,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub name: String,
    /// First moment in the optimizer basis (momentum buffer for SGD+momentum).
    pub m_bar: Vec<f64>,
    /// Second moment in the optimizer basis.
    pub v_bar: Vec<f64>,
    pub q: OrthoTransform,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    states: Option<Vec<ParamState>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: None,
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn states(&self) -> Option<&[ParamState]> {
        self.states.as_deref()
    }

    /// Allocates zero moments and, for OrthoAdam, one transform per parameter
    /// seeded from `(config.seed, name)`.
    pub fn init(&mut self, params: &ParamStore) -> Result<()> {
        let mut states = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let n = t.numel();
            let q = if self.config.kind == OptimizerKind::OrthoAdam {
                make_ortho(
                    n,
                    self.config.ortho_backend,
                    self.config.dense_limit,
                    name_seed(self.config.seed, name),
                )?
            } else {
                OrthoTransform::Identity { n }
            };
            let basis = q.basis_len();
            let uses_v = matches!(
                self.config.kind,
                OptimizerKind::Adam | OptimizerKind::OrthoAdam | OptimizerKind::RmsProp
            );
            states.push(ParamState {
                name: name.to_string(),
                m_bar: vec![0.0; basis],
                v_bar: if uses_v { vec![0.0; basis] } else { Vec::new() },
                q,
            });
        }
        self.states = Some(states);
        self.t = 0;
        Ok(())
    }

    /// Restores moments and the step counter saved by a checkpoint. The
    /// transforms are rebuilt from their seeds.
    pub fn restore(&mut self, params: &ParamStore, t: u64, moments: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        self.init(params)?;
        let states = self.states.as_mut().expect("initialised above");
        if moments.len() != states.len() {
            return Err(Error::Format("optimizer state does not match parameters".into()));
        }
        for (state, (name, m, v)) in states.iter_mut().zip(moments) {
            if &state.name != name || state.m_bar.len() != m.len() || state.v_bar.len() != v.len() {
                return Err(Error::Format(format!("optimizer state mismatch for `{name}`")));
            }
            state.m_bar.clone_from(m);
            state.v_bar.clone_from(v);
        }
        self.t = t;
        Ok(())
    }

    /// One update of every parameter. `grads` follows [`ParamStore`] order and
    /// `lr_mult` is the schedule multiplier `λₜ`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr_mult: f64) -> Result<()> {
        let states = self.states.as_mut().ok_or(Error::Uninitialised)?;
        if grads.len() != states.len() || params.len() != states.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: vec![states.len()],
                rhs: vec![grads.len(), params.len()],
            });
        }
        self.t += 1;
        let t = self.t;
        let c = &self.config;
        let lr = lr_mult * c.eta;
        for ((state, g), (name, theta)) in states.iter_mut().zip(grads).zip(params.iter_mut()) {
            if state.name != name || g.len() != theta.numel() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    lhs: theta.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let theta = theta.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (p, gi) in theta.iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for ((p, b), gi) in theta.iter_mut().zip(&mut state.m_bar).zip(g) {
                        *b = c.momentum * *b + gi;
                        *p -= lr * *b;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::RmsProp | OptimizerKind::OrthoAdam => {
                    let beta1 = c.effective_beta1();
                    let g_bar = state.q.apply(g)?;
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - c.beta2.powi(t as i32);
                    let mut s_bar = vec![0.0; g_bar.len()];
                    for (i, &gb) in g_bar.iter().enumerate() {
                        let m = beta1 * state.m_bar[i] + (1.0 - beta1) * gb;
                        let v = c.beta2 * state.v_bar[i] + (1.0 - c.beta2) * gb * gb;
                        state.m_bar[i] = m;
                        state.v_bar[i] = v;
                        let m_hat = m / bc1;
                        let v_hat = v / bc2;
                        s_bar[i] = m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                    let s = state.q.apply_transpose(&s_bar)?;
                    for (p, si) in theta.iter_mut().zip(&s) {
                        *p -= lr * si;
                    }
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::from_vec(vec![v]).unwrap());
        p
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut params = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.init(&params).unwrap();
        opt.step(&mut params, &[vec![1.0]], 1.0).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        let got = params.get("theta").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-12);
        assert!((got + 0.000999999990).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_scale_free() {
        let run = |g: f64| {
            let mut params = scalar_store(0.0);
            let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
            opt.init(&params).unwrap();
            opt.step(&mut params, &[vec![g]], 1.0).unwrap();
            params.get("theta").unwrap().data()[0]
        };
        assert!((run(1.0) - run(100.0)).abs() < 1e-6);
    }

    #[test]
    fn sgd_step() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(&[2]));
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            eta: 0.2,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.init(&params).unwrap();
        opt.step(&mut params, &[vec![1.0, -1.0]], 1.0).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[-0.2, 0.2]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut params = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            eta: 0.1,
            momentum: 0.5,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.init(&params).unwrap();
        opt.step(&mut params, &[vec![1.0]], 1.0).unwrap();
        opt.step(&mut params, &[vec![1.0]], 1.0).unwrap();
        // buffers 1.0 then 1.5
        assert!((params.get("theta").unwrap().data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut params = scalar_store(0.0);
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert!(matches!(
            opt.step(&mut params, &[vec![1.0]], 1.0),
            Err(Error::Uninitialised)
        ));
        opt.init(&params).unwrap();
        assert!(opt.step(&mut params, &[vec![1.0, 2.0]], 1.0).is_err());
        assert!(Optimizer::new(OptimizerConfig {
            weight_decay: 0.1,
            ..OptimizerConfig::default()
        })
        .is_err());
        assert!(Optimizer::new(OptimizerConfig {
            beta2: 1.0,
            ..OptimizerConfig::default()
        })
        .is_err());
    }
}
