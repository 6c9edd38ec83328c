use super::linalg::{gemm, matmul, View};
use super::{check_finite, Tensor};
use crate::error::{Error, Result};
use crate::model::attention::{allowed_keys, check_square, softmax_row, softmax_row_backward, AttentionVariant};
use crate::model::norm::{check_params, norm_backward, norm_forward, NormCache, NormVariant};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Exp,
    Sqrt,
    Reciprocal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Gradient flows to the first maximal element.
    Max,
    /// Population variance (divides by the axis length).
    Variance,
}

/// Geometry of a fused multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
    pub relax_k: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        op: ElementwiseOp,
        a: usize,
        b: usize,
    },
    Unary {
        op: ElementwiseOp,
        a: usize,
    },
    /// Caches `tanh(√(2/π)(x + 0.044715x³))` for the backward rule.
    Gelu {
        a: usize,
        tanh: Vec<f64>,
    },
    Reduce {
        op: ReduceOp,
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: Option<usize>,
        center: bool,
        cache: NormCache,
    },
    SoftmaxCausal {
        a: usize,
        seq: usize,
    },
    Attention {
        qkv: usize,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        included: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. One call to [`Tape::backward`] fills the gradient of
/// every reachable leaf that requires one.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

fn gelu_tanh(x: f64) -> f64 {
    (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()
}

#[cfg(test)]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

fn gelu_grad_with(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn op_name(op: ElementwiseOp) -> &'static str {
    match op {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Scale(_) => "scale",
        ElementwiseOp::Exp => "exp",
        ElementwiseOp::Sqrt => "sqrt",
        ElementwiseOp::Reciprocal => "reciprocal",
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v).expect("var from this tape")].value
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` if nothing flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.index(v).ok()?;
        self.grads.get(i).and_then(|g| g.as_deref())
    }

    /// Attention weights `[batch, heads, seq, seq]` saved by [`Tape::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[self.index(v).ok()?].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn record(&mut self, name: &'static str, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        check_finite(name, &data)?;
        let value = Tensor::new(shape, data)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Rank-2 matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        self.record("matmul", &[m, n], data, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib])
    }

    /// Elementwise operation. Binary kinds accept operands whose shapes are
    /// equal, where one is a scalar, or where one shape is a trailing suffix of
    /// the other (e.g. a bias `[D]` against activations `[N, D]`).
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let ia = self.index(a)?;
        match (op, b) {
            (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, Some(b)) => {
                let ib = self.index(b)?;
                self.binary(op, ia, ib)
            }
            (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, None) => Err(Error::ShapeMismatch {
                op: op_name(op),
                lhs: self.nodes[ia].value.shape().to_vec(),
                rhs: vec![],
            }),
            (_, Some(_)) => Err(Error::ShapeMismatch {
                op: op_name(op),
                lhs: self.nodes[ia].value.shape().to_vec(),
                rhs: vec![],
            }),
            (_, None) => self.unary(op, ia),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.elementwise(ElementwiseOp::Scale(factor), a, None)
    }

    fn binary(&mut self, op: ElementwiseOp, ia: usize, ib: usize) -> Result<Var> {
        let va = &self.nodes[ia].value;
        let vb = &self.nodes[ib].value;
        let (na, nb) = (va.numel(), vb.numel());
        let compatible = na == nb && va.shape() == vb.shape()
            || nb == 1
            || na == 1
            || va.shape().ends_with(vb.shape())
            || vb.shape().ends_with(va.shape());
        if !compatible || (na != nb && na % nb != 0 && nb % na != 0) {
            return Err(Error::ShapeMismatch {
                op: op_name(op),
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let shape = if na >= nb {
            va.shape().to_vec()
        } else {
            vb.shape().to_vec()
        };
        let n = na.max(nb);
        let (da, db) = (va.data(), vb.data());
        let f = |x: f64, y: f64| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            _ => x * y,
        };
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        self.record(op_name(op), &shape, data, Op::Binary { op, a: ia, b: ib }, &[ia, ib])
    }

    fn unary(&mut self, op: ElementwiseOp, ia: usize) -> Result<Var> {
        let va = &self.nodes[ia].value;
        let shape = va.shape().to_vec();
        let x = va.data();
        let data: Vec<f64> = match op {
            ElementwiseOp::Scale(c) => x.iter().map(|v| v * c).collect(),
            ElementwiseOp::Exp => x.iter().map(|v| v.exp()).collect(),
            ElementwiseOp::Sqrt => {
                if x.iter().any(|&v| v < 0.0) {
                    return Err(Error::NonFinite { op: "sqrt" });
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            ElementwiseOp::Reciprocal => {
                if x.iter().any(|&v| v == 0.0) {
                    return Err(Error::DivisionByZero { op: "reciprocal" });
                }
                x.iter().map(|v| 1.0 / v).collect()
            }
            _ => unreachable!("binary op routed to unary"),
        };
        self.record(op_name(op), &shape, data, Op::Unary { op, a: ia }, &[ia])
    }

    /// Tanh-approximation GeLU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let va = &self.nodes[ia].value;
        let shape = va.shape().to_vec();
        let tanh: Vec<f64> = va.data().iter().map(|&x| gelu_tanh(x)).collect();
        let data = va.data().iter().zip(&tanh).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        self.record("gelu", &shape, data, Op::Gelu { a: ia, tanh }, &[ia])
    }

    /// Reduces along `axis`, dropping it from the shape.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let va = &self.nodes[ia].value;
        let shape = va.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let x = va.data();
        let mut data = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| x[(o * len + j) * inner + i];
                let slot = o * inner + i;
                data[slot] = match op {
                    ReduceOp::Sum => (0..len).map(at).sum(),
                    ReduceOp::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    ReduceOp::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                    ReduceOp::Variance => {
                        let mean = (0..len).map(at).sum::<f64>() / len as f64;
                        (0..len).map(|j| (at(j) - mean).powi(2)).sum::<f64>() / len as f64
                    }
                };
            }
        }
        self.record(
            "reduce",
            &out_shape,
            data,
            Op::Reduce {
                op,
                a: ia,
                outer,
                len,
                inner,
                argmax,
            },
            &[ia],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[self.index(a)?].value.numel();
        let flat = self.reshape(a, &[n])?;
        self.reduce(ReduceOp::Sum, flat, 0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let data = self.nodes[ia].value.data().to_vec();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        self.record("reshape", shape, data, Op::Reshape { a: ia }, &[ia])
    }

    /// Gathers rows of `table[V, D]`, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.index(table)?;
        let tv = &self.nodes[it].value;
        if tv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        self.record(
            "embedding",
            &[ids.len(), d],
            data,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            &[it],
        )
    }

    /// Normalises the last axis of `x` with learned `gamma` (and `beta` for
    /// LayerNorm).
    pub fn normalize(&mut self, x: Var, variant: NormVariant, gamma: Var, beta: Option<Var>) -> Result<Var> {
        let ix = self.index(x)?;
        let ig = self.index(gamma)?;
        let ib = beta.map(|b| self.index(b)).transpose()?;
        let xv = &self.nodes[ix].value;
        let d = *xv.shape().last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let gv = self.nodes[ig].value.data();
        let bv = ib.map(|i| self.nodes[i].value.data());
        check_params(variant, d, gv.len(), bv.map(<[f64]>::len))?;
        let center = variant == NormVariant::LayerNorm;
        let (y, cache) = norm_forward(xv.data(), d, center, gv, bv);
        let shape = xv.shape().to_vec();
        let mut inputs = vec![ix, ig];
        inputs.extend(ib);
        self.record(
            "normalize",
            &shape,
            y,
            Op::Norm {
                x: ix,
                gamma: ig,
                beta: ib,
                center,
                cache,
            },
            &inputs,
        )
    }

    /// Causal softmax over trailing `L×L` slices.
    pub fn softmax_causal(&mut self, logits: Var, variant: AttentionVariant, relax_k: usize) -> Result<Var> {
        let ia = self.index(logits)?;
        let seq = check_square(&self.nodes[ia].value)?;
        let out = crate::model::attention::softmax_causal(&self.nodes[ia].value, variant, relax_k)?;
        let shape = out.shape().to_vec();
        self.record(
            "softmax_causal",
            &shape,
            out.into_data(),
            Op::SoftmaxCausal { a: ia, seq },
            &[ia],
        )
    }

    /// Fused multi-head self-attention over packed projections.
    ///
    /// `qkv` is `[batch·seq, 3·D]` holding queries, keys and values side by
    /// side; the result is `[batch·seq, D]`. Logits are scaled by `1/√d_head`
    /// and masked causally before normalisation.
    pub fn attention(&mut self, qkv: Var, shape: AttentionShape) -> Result<Var> {
        let iq = self.index(qkv)?;
        let v = &self.nodes[iq].value;
        let AttentionShape {
            batch,
            seq,
            heads,
            variant,
            relax_k,
        } = shape;
        if v.rank() != 2 || v.shape()[0] != batch * seq || v.shape()[1] % (3 * heads) != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: v.shape().to_vec(),
                rhs: vec![batch * seq, 3 * heads],
            });
        }
        let d = v.shape()[1] / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = v.data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut logits = vec![0.0; seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        for b in 0..batch {
            let base = b * seq * 3 * d;
            for h in 0..heads {
                let q = View::rows(base + h * dh, 3 * d);
                let kt = View::transposed(base + d + h * dh, 3 * d);
                gemm(seq, dh, seq, scale, x, q, x, kt, 0.0, &mut logits, View::rows(0, seq));
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let allowed = allowed_keys(i, seq, relax_k);
                    softmax_row(
                        &logits[i * seq..(i + 1) * seq],
                        allowed,
                        variant,
                        &mut p[i * seq..(i + 1) * seq],
                    )
                    .map_err(|_| Error::AllMasked { query: i })?;
                }
                let vv = View::rows(base + 2 * d + h * dh, 3 * d);
                let ov = View::rows(b * seq * d + h * dh, d);
                gemm(seq, seq, dh, 1.0, p, View::rows(0, seq), x, vv, 0.0, &mut out, ov);
            }
        }
        check_finite("attention", &probs)?;
        self.record(
            "attention",
            &[batch * seq, d],
            out,
            Op::Attention { qkv: iq, shape, probs },
            &[iq],
        )
    }

    /// Mean token negative log-likelihood of `targets` under `logits[N, V]`,
    /// counting only rows with `included[i] == true`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], included: &[bool]) -> Result<Var> {
        let il = self.index(logits)?;
        let lv = &self.nodes[il].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || included.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), included.len()],
            });
        }
        let vocab = lv.shape()[1];
        let count = included.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        for (r, (&t, &inc)) in targets.iter().zip(included).enumerate() {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + sum.ln();
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            if inc {
                total += lse - row[t];
            }
        }
        let loss = total / count as f64;
        self.record(
            "cross_entropy",
            &[],
            vec![loss],
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                included: included.to_vec(),
                probs,
                count,
            },
            &[il],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.index(loss)?;
        if self.done {
            return Err(Error::AlreadyBackpropagated);
        }
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[il].requires_grad {
            return Err(Error::Detached);
        }
        self.done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if let Some(g) = g {
                    node.value.set_grad(g.clone())?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (da, db) = (nodes[a].value.data(), nodes[b].value.data());
                if wants(a) {
                    acc(a, &mut |buf| {
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            g,
                            View::rows(0, n),
                            db,
                            View::transposed(0, n),
                            1.0,
                            buf,
                            View::rows(0, k),
                        )
                    });
                }
                if wants(b) {
                    acc(b, &mut |buf| {
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            da,
                            View::transposed(0, k),
                            g,
                            View::rows(0, n),
                            1.0,
                            buf,
                            View::rows(0, n),
                        )
                    });
                }
            }
            &Op::Binary { op, a, b } => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                let (na, nb) = (va.len(), vb.len());
                acc(a, &mut |buf| {
                    for (idx, gi) in g.iter().enumerate() {
                        buf[idx % na] += match op {
                            ElementwiseOp::Mul => gi * vb[idx % nb],
                            _ => *gi,
                        };
                    }
                });
                acc(b, &mut |buf| {
                    for (idx, gi) in g.iter().enumerate() {
                        buf[idx % nb] += match op {
                            ElementwiseOp::Mul => gi * va[idx % na],
                            ElementwiseOp::Sub => -gi,
                            _ => *gi,
                        };
                    }
                });
            }
            &Op::Unary { op, a } => {
                let y = node.value.data();
                acc(a, &mut |buf| {
                    for idx in 0..buf.len() {
                        buf[idx] += g[idx]
                            * match op {
                                ElementwiseOp::Scale(c) => c,
                                ElementwiseOp::Exp => y[idx],
                                ElementwiseOp::Sqrt => 0.5 / y[idx],
                                ElementwiseOp::Reciprocal => -y[idx] * y[idx],
                                _ => unreachable!(),
                            };
                    }
                });
            }
            Op::Gelu { a, tanh } => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |buf| {
                    for idx in 0..buf.len() {
                        buf[idx] += g[idx] * gelu_grad_with(x[idx], tanh[idx]);
                    }
                });
            }
            Op::Reduce {
                op,
                a,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let x = nodes[*a].value.data();
                acc(*a, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            let gs = g[slot];
                            for j in 0..len {
                                let idx = (o * len + j) * inner + i;
                                buf[idx] += match op {
                                    ReduceOp::Sum => gs,
                                    ReduceOp::Mean => gs / len as f64,
                                    ReduceOp::Max => {
                                        if argmax[slot] == j {
                                            gs
                                        } else {
                                            0.0
                                        }
                                    }
                                    ReduceOp::Variance => {
                                        let mean =
                                            (0..len).map(|jj| x[(o * len + jj) * inner + i]).sum::<f64>() / len as f64;
                                        gs * 2.0 * (x[idx] - mean) / len as f64
                                    }
                                };
                            }
                        }
                    }
                });
            }
            &Op::Reshape { a } => {
                acc(a, &mut |buf| {
                    for (b, gi) in buf.iter_mut().zip(g) {
                        *b += gi;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            buf[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                center,
                cache,
            } => {
                let d = *nodes[*x].value.shape().last().unwrap();
                let gv = nodes[*gamma].value.data();
                let (dx, dgamma, dbeta) = norm_backward(g, d, *center, gv, cache);
                acc(*x, &mut |buf| add_into(buf, &dx));
                acc(*gamma, &mut |buf| add_into(buf, &dgamma));
                if let Some(b) = beta {
                    acc(*b, &mut |buf| add_into(buf, &dbeta));
                }
            }
            &Op::SoftmaxCausal { a, seq } => {
                let p = node.value.data();
                acc(a, &mut |buf| {
                    let mut dx = vec![0.0; seq];
                    for r in 0..p.len() / seq {
                        let s = r * seq..(r + 1) * seq;
                        softmax_row_backward(&p[s.clone()], &g[s.clone()], &mut dx);
                        add_into(&mut buf[s], &dx);
                    }
                });
            }
            Op::Attention { qkv, shape, probs } => {
                let x = nodes[*qkv].value.data();
                acc(*qkv, &mut |buf| attention_backward(x, g, probs, *shape, buf));
            }
            Op::CrossEntropy {
                logits,
                targets,
                included,
                probs,
                count,
            } => {
                let vocab = nodes[*logits].value.shape()[1];
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |buf| {
                    for (r, (&t, &inc)) in targets.iter().zip(included).enumerate() {
                        if !inc {
                            continue;
                        }
                        let row = &mut buf[r * vocab..(r + 1) * vocab];
                        for (b, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *b += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn attention_backward(x: &[f64], dout: &[f64], probs: &[f64], shape: AttentionShape, dqkv: &mut [f64]) {
    let AttentionShape { batch, seq, heads, .. } = shape;
    let d = x.len() / (batch * seq * 3);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; seq * seq];
    let mut ds = vec![0.0; seq * seq];
    for b in 0..batch {
        let base = b * seq * 3 * d;
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let q_off = base + h * dh;
            let k_off = base + d + h * dh;
            let v_off = base + 2 * d + h * dh;
            let dout_v = View::rows(b * seq * d + h * dh, d);
            // dP = dO · Vᵀ
            gemm(
                seq,
                dh,
                seq,
                1.0,
                dout,
                dout_v,
                x,
                View::transposed(v_off, 3 * d),
                0.0,
                &mut dp,
                View::rows(0, seq),
            );
            for i in 0..seq {
                let r = i * seq..(i + 1) * seq;
                softmax_row_backward(&p[r.clone()], &dp[r.clone()], &mut ds[r]);
            }
            // dQ += s·dS·K ; dK += s·dSᵀ·Q ; dV += Pᵀ·dO
            gemm(
                seq,
                seq,
                dh,
                scale,
                &ds,
                View::rows(0, seq),
                x,
                View::rows(k_off, 3 * d),
                1.0,
                dqkv,
                View::rows(q_off, 3 * d),
            );
            gemm(
                seq,
                seq,
                dh,
                scale,
                &ds,
                View::transposed(0, seq),
                x,
                View::rows(q_off, 3 * d),
                1.0,
                dqkv,
                View::rows(k_off, 3 * d),
            );
            gemm(
                seq,
                seq,
                dh,
                1.0,
                p,
                View::transposed(0, seq),
                dout,
                dout_v,
                1.0,
                dqkv,
                View::rows(v_off, 3 * d),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_annihilating_matmul() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 1.0]));
        let z = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let e = tape.elementwise(ElementwiseOp::Exp, z, None).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 1.0]);
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let bias = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn reciprocal_of_zero_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(
            tape.elementwise(ElementwiseOp::Reciprocal, x, None),
            Err(Error::DivisionByZero { .. })
        ));
    }

    #[test]
    fn overflow_reports_op() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        match tape.elementwise(ElementwiseOp::Exp, x, None) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.reduce(ReduceOp::Mean, x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        let c = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let v = tape.reduce(ReduceOp::Variance, c, 0).unwrap();
        assert_eq!(tape.value(v).data(), &[0.0]);
        assert!(matches!(
            tape.reduce(ReduceOp::Sum, x, 1),
            Err(Error::InvalidAxis { .. })
        ));
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, 3.0, 3.0, 0.0]));
        let m = tape.reduce(ReduceOp::Max, x, 0).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn simple_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        assert_eq!(tape.value(x).grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum_all(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Detached)));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::AlreadyBackpropagated)));
        let other = Tape::new().sum_all(Var { tape: 0, idx: 0 });
        assert!(other.is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 256]));
        let l = tape.cross_entropy(logits, &[3, 7], &[true, true]).unwrap();
        assert!((tape.value(l).data()[0] - 256f64.ln()).abs() < 1e-12);

        let mut row = vec![0.0; 4];
        row[2] = 50.0;
        let logits = tape.constant(t(&[1, 4], &row));
        let l = tape.cross_entropy(logits, &[2], &[true]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
        assert!(matches!(
            tape.cross_entropy(logits, &[2], &[false]),
            Err(Error::EmptyLoss)
        ));
    }
}
