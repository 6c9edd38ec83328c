use super::params::{name_seed, ParamStore};
use super::{ModelConfig, NormVariant, PositionVariant};
use crate::error::{Error, Result};
use crate::tensor::{AttentionShape, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard deviation of the Gaussian used for embeddings and linear weights.
pub const INIT_STD: f64 = 0.02;

/// The four linear layers inside each block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinearSite {
    AttnQkv,
    AttnOut,
    MlpIn,
    MlpOut,
}

impl LinearSite {
    pub const ALL: [LinearSite; 4] = [
        LinearSite::AttnQkv,
        LinearSite::AttnOut,
        LinearSite::MlpIn,
        LinearSite::MlpOut,
    ];

    /// Parameter-name prefix of this site in block `layer`.
    pub fn prefix(self, layer: usize) -> String {
        match self {
            LinearSite::AttnQkv => format!("h.{layer}.attn.c_attn"),
            LinearSite::AttnOut => format!("h.{layer}.attn.c_proj"),
            LinearSite::MlpIn => format!("h.{layer}.mlp.c_fc"),
            LinearSite::MlpOut => format!("h.{layer}.mlp.c_proj"),
        }
    }
}

/// Rewrites activations entering or leaving a block's linear layers.
///
/// Used for fake-quantised evaluation; returning `None` leaves the value
/// untouched. A rewritten value is recorded as a constant, so gradients do not
/// flow through hooked sites.
pub trait ActivationHook {
    fn linear_input(&self, _layer: usize, _site: LinearSite, _x: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }

    fn linear_output(&self, _layer: usize, _site: LinearSite, _y: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Hidden states and attention weights of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureBuffers {
    /// `[M, L, D]`: the residual stream right after each block's final residual
    /// addition.
    pub hidden_states: Tensor,
    /// `[M, H, L, L]`: attention weights per layer and head.
    pub attention_maps: Tensor,
}

/// Handles into a recorded forward pass.
pub struct Forward {
    pub logits: Var,
    /// One entry per parameter, in [`ParamStore`] order.
    pub params: Vec<Var>,
    pub hidden: Vec<Var>,
    pub attention: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

impl Forward {
    /// Splits the recorded activations into per-sequence capture buffers.
    pub fn capture(&self, tape: &Tape, config: &ModelConfig) -> Result<Vec<CaptureBuffers>> {
        let (m, h, l, d) = (config.n_layers, config.n_heads, self.seq, config.d_model);
        let mut out = Vec::with_capacity(self.batch);
        for b in 0..self.batch {
            let mut hidden = Vec::with_capacity(m * l * d);
            let mut maps = Vec::with_capacity(m * h * l * l);
            for layer in 0..m {
                let hv = tape.value(self.hidden[layer]).data();
                hidden.extend_from_slice(&hv[b * l * d..(b + 1) * l * d]);
                let probs = tape.attention_probs(self.attention[layer]).expect("attention node");
                maps.extend_from_slice(&probs[b * h * l * l..(b + 1) * h * l * l]);
            }
            out.push(CaptureBuffers {
                hidden_states: Tensor::new(&[m, l, d], hidden)?,
                attention_maps: Tensor::new(&[m, h, l, l], maps)?,
            });
        }
        Ok(out)
    }
}

/// Which positions count towards the loss. With a relaxed causal prefix the
/// first `relax_k` positions of every sequence see future tokens and are
/// excluded.
pub fn loss_mask(batch: usize, seq: usize, relax_k: usize) -> Vec<bool> {
    (0..batch * seq).map(|i| i % seq >= relax_k).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Fresh model. Every parameter draws from its own generator seeded by
    /// `(seed, name)`, so a parameter's initial value does not depend on which
    /// other parameters the configuration creates.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in Self::layout(&config) {
            let value = match init {
                Init::Normal => {
                    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                    Tensor::randn(&shape, INIT_STD, &mut rng)
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
            };
            params.insert(name, value);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "from_parts",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let g = c.norm.gamma_len(d);
        let mut out = vec![("wte".to_string(), vec![v, d], Init::Normal)];
        if c.position == PositionVariant::LearnedAbsolute {
            out.push(("wpe".into(), vec![c.max_seq_len, d], Init::Normal));
        }
        let norm = |out: &mut Vec<_>, prefix: String| {
            out.push((format!("{prefix}.weight"), vec![g], Init::Ones));
            if c.norm == NormVariant::LayerNorm && c.use_biases {
                out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
            }
        };
        for m in 0..c.n_layers {
            norm(&mut out, format!("h.{m}.ln_1"));
            for site in LinearSite::ALL {
                if site == LinearSite::MlpIn {
                    norm(&mut out, format!("h.{m}.ln_2"));
                }
                let (i, o) = match site {
                    LinearSite::AttnQkv => (d, 3 * d),
                    LinearSite::AttnOut => (d, d),
                    LinearSite::MlpIn => (d, f),
                    LinearSite::MlpOut => (f, d),
                };
                let p = site.prefix(m);
                out.push((format!("{p}.weight"), vec![i, o], Init::Normal));
                if c.use_biases {
                    out.push((format!("{p}.bias"), vec![o], Init::Zeros));
                }
            }
        }
        norm(&mut out, "ln_f".into());
        out.push(("lm_head.weight".into(), vec![d, v], Init::Normal));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    /// Records a forward pass over `batch` sequences of equal length packed
    /// row-major in `tokens`. Parameters are recorded as trainable leaves when
    /// `trainable` is set.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
        position_offset: usize,
        trainable: bool,
        hook: Option<&dyn ActivationHook>,
    ) -> Result<Forward> {
        let c = &self.config;
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![tokens.len()],
                rhs: vec![batch],
            });
        }
        let seq = tokens.len() / batch;
        if seq + position_offset > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq + position_offset,
                max: c.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: c.vocab_size,
            });
        }

        let mut vars = Vec::with_capacity(self.params.len());
        for (_, t) in self.params.iter() {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
        }
        let names: Vec<&str> = self.params.names().collect();
        let p = |name: &str| -> Option<Var> { names.iter().position(|n| *n == name).map(|i| vars[i]) };
        let req = |name: &str| p(name).ok_or_else(|| Error::UnknownParam(name.to_string()));

        let mut x = tape.embedding(req("wte")?, tokens)?;
        if c.position == PositionVariant::LearnedAbsolute {
            let pos: Vec<usize> = (0..batch)
                .flat_map(|_| position_offset..position_offset + seq)
                .collect();
            let pe = tape.embedding(req("wpe")?, &pos)?;
            x = tape.add(x, pe)?;
        }

        let shape = AttentionShape {
            batch,
            seq,
            heads: c.n_heads,
            variant: c.attention,
            relax_k: c.causal_relax_k,
        };
        let mut hidden = Vec::with_capacity(c.n_layers);
        let mut attention = Vec::with_capacity(c.n_layers);
        for m in 0..c.n_layers {
            let h = self.norm(tape, x, &format!("h.{m}.ln_1"), &p)?;
            let qkv = self.linear(tape, h, m, LinearSite::AttnQkv, &p, hook)?;
            let a = tape.attention(qkv, shape)?;
            attention.push(a);
            let o = self.linear(tape, a, m, LinearSite::AttnOut, &p, hook)?;
            x = tape.add(x, o)?;

            let h = self.norm(tape, x, &format!("h.{m}.ln_2"), &p)?;
            let f = self.linear(tape, h, m, LinearSite::MlpIn, &p, hook)?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, f, m, LinearSite::MlpOut, &p, hook)?;
            x = tape.add(x, f)?;
            hidden.push(x);
        }
        let h = self.norm(tape, x, "ln_f", &p)?;
        let logits = tape.matmul(h, req("lm_head.weight")?)?;
        Ok(Forward {
            logits,
            params: vars,
            hidden,
            attention,
            batch,
            seq,
        })
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str, p: &dyn Fn(&str) -> Option<Var>) -> Result<Var> {
        let gamma = p(&format!("{prefix}.weight")).ok_or_else(|| Error::UnknownParam(prefix.to_string()))?;
        let beta = p(&format!("{prefix}.bias"));
        tape.normalize(x, self.config.norm, gamma, beta)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        x: Var,
        layer: usize,
        site: LinearSite,
        p: &dyn Fn(&str) -> Option<Var>,
        hook: Option<&dyn ActivationHook>,
    ) -> Result<Var> {
        let prefix = site.prefix(layer);
        let w = p(&format!("{prefix}.weight")).ok_or_else(|| Error::UnknownParam(prefix.clone()))?;
        let mut x = x;
        if let Some(hook) = hook {
            if let Some(t) = hook.linear_input(layer, site, tape.value(x))? {
                x = tape.constant(t);
            }
        }
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = p(&format!("{prefix}.bias")) {
            y = tape.add(y, b)?;
        }
        if let Some(hook) = hook {
            if let Some(t) = hook.linear_output(layer, site, tape.value(y))? {
                y = tape.constant(t);
            }
        }
        Ok(y)
    }

    /// Logits `[L, V]` for one sequence, plus capture buffers on request.
    pub fn forward(&self, tokens: &[usize], capture: bool) -> Result<(Tensor, Option<CaptureBuffers>)> {
        self.forward_at(tokens, 0, capture)
    }

    /// Like [`Model::forward`] with the first token placed at absolute
    /// position `offset`.
    pub fn forward_at(
        &self,
        tokens: &[usize],
        offset: usize,
        capture: bool,
    ) -> Result<(Tensor, Option<CaptureBuffers>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, tokens, 1, offset, false, None)?;
        let cap = if capture {
            fwd.capture(&tape, &self.config)?.pop()
        } else {
            None
        };
        Ok((tape.value(fwd.logits).clone(), cap))
    }

    /// Mean next-token loss over a packed batch and the gradient of every
    /// parameter, in [`ParamStore`] order.
    pub fn loss_and_grads(&self, inputs: &[usize], targets: &[usize], batch: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, inputs, batch, 0, true, None)?;
        let mask = loss_mask(batch, fwd.seq, self.config.causal_relax_k);
        let loss = tape.cross_entropy(fwd.logits, targets, &mask)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grads = fwd
            .params
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}
