//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, which is a
//! topological order by construction. [`Tape::backward`] walks the record
//! once in reverse and accumulates `∂loss/∂node` into a [`Gradients`] table.
//!
//! Leaves come in two flavours: [`Tape::param`] (gradient tracked) and
//! [`Tape::constant`] (never receives a gradient). [`Tape::detach`] copies a
//! node's value into a fresh constant, which is how frozen-model branches
//! (pretrained snapshot, EMA teacher) are kept off the gradient path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to the second argument of [`Tape::kl_divergence`].
pub const KL_CLAMP: f64 = 1e-12;

/// Tolerance on row sums when validating probability rows.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Norm2(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Kl(Var, Var),
    MeanSquaredL2(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `∂loss/∂node` for every node that tracks gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not depend on any parameter
    /// (constants, detached branches) or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// New constant holding a copy of `v`'s value; severs tape linkage.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push("matmul_t", out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Adds `bias` along the trailing axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_bias(self.value(bias))?;
        self.push("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).relu();
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).mean());
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).sum_axis(axis)?;
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.sum_axis(a, axis)?;
        let n = self.value(a).shape()[axis];
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm2(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).norm2());
        self.push("norm2", out, Op::Norm2(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax()?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (b, k) = (z.rows(), z.cols());
        if z.shape().len() != 2 || labels.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", z.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Index(format!("label {bad} with {k} classes")));
        }
        let logp = z.log_softmax()?;
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| logp.at(i, y))
            .sum::<f64>()
            / b as f64;
        let probs = logp.map(f64::exp);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Mean over the batch of `Σ_k p_k ln(p_k / q_k)`, with `0·ln(0/q) = 0`
    /// and `q` clamped below at [`KL_CLAMP`].
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        pv.same_shape(qv, "kl_divergence")?;
        check_distribution(pv, "first argument")?;
        check_distribution(qv, "second argument")?;
        let out = Tensor::scalar(kl_value(pv, qv));
        self.push("kl_divergence", out, Op::Kl(p, q), &[p, q])
    }

    /// `(1/B) Σ_i Σ_k (f_ik − g_ik)²` where `B` is the leading dimension.
    pub fn mean_squared_l2(&mut self, f: Var, g: Var) -> Result<Var> {
        let (fv, gv) = (self.value(f), self.value(g));
        fv.same_shape(gv, "mean_squared_l2")?;
        let out = Tensor::scalar(mean_squared_l2_value(fv, gv));
        self.push("mean_squared_l2", out, Op::MeanSquaredL2(f, g), &[f, g])
    }

    /// Propagates `∂loss/∂·` to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contrib) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))?), (*b, val(*a).t_matmul(g)?)],
            Op::MatMulT(a, b) => vec![(*a, g.matmul(val(*b))?), (*b, g.t_matmul(val(*a))?)],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddBias(a, bias) => {
                let k = val(*bias).len();
                let rows = g.len() / k;
                let folded = g.reshape(vec![rows, k])?.sum_axis(0)?;
                vec![
                    (*a, g.clone()),
                    (*bias, folded.reshape(val(*bias).shape().to_vec())?),
                ]
            }
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?,
            )],
            Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), "log", |gi, x| gi / x)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::SumAxis(a, axis) => {
                let input = val(*a);
                let (outer, len, inner) = input.axis_split(*axis, "sum_axis")?;
                let mut out = vec![0.0; input.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        out[base..base + inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*a, Tensor::new(input.shape().to_vec(), out)?)]
            }
            Op::Norm2(a) => {
                let n = node.value.item();
                let scale = if n > 0.0 { g.item() / n } else { 0.0 };
                vec![(*a, val(*a).scale(scale))]
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let k = s.cols();
                let mut out = Vec::with_capacity(s.len());
                for (srow, grow) in s.data().chunks(k).zip(g.data().chunks(k)) {
                    let inner: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                    out.extend(srow.iter().zip(grow).map(|(si, gi)| si * (gi - inner)));
                }
                vec![(*a, Tensor::new(s.shape().to_vec(), out)?)]
            }
            Op::LogSoftmax(a) => {
                let l = &node.value;
                let k = l.cols();
                let mut out = Vec::with_capacity(l.len());
                for (lrow, grow) in l.data().chunks(k).zip(g.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    out.extend(lrow.iter().zip(grow).map(|(li, gi)| gi - li.exp() * total));
                }
                vec![(*a, Tensor::new(l.shape().to_vec(), out)?)]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len() as f64;
                let scale = g.item() / b;
                let mut out = probs.clone();
                let k = out.cols();
                for (i, &y) in labels.iter().enumerate() {
                    out.data_mut()[i * k + y] -= 1.0;
                }
                vec![(*logits, out.scale(scale))]
            }
            Op::Kl(p, q) => {
                let (pv, qv) = (val(*p), val(*q));
                let scale = g.item() / pv.rows() as f64;
                let gp = pv.zip_map(qv, "kl_divergence", |pi, qi| {
                    if pi > 0.0 {
                        scale * (pi.ln() - qi.max(KL_CLAMP).ln() + 1.0)
                    } else {
                        0.0
                    }
                })?;
                let gq = pv.zip_map(qv, "kl_divergence", |pi, qi| {
                    if qi > KL_CLAMP {
                        -scale * pi / qi
                    } else {
                        0.0
                    }
                })?;
                vec![(*p, gp), (*q, gq)]
            }
            Op::MeanSquaredL2(f, h) => {
                let (fv, hv) = (val(*f), val(*h));
                let scale = 2.0 * g.item() / fv.rows() as f64;
                let gf = fv.zip_map(hv, "mean_squared_l2", |a, b| scale * (a - b))?;
                let gh = gf.scale(-1.0);
                vec![(*f, gf), (*h, gh)]
            }
        })
    }
}

fn check_distribution(t: &Tensor, which: &str) -> Result<()> {
    let k = t.cols();
    for (i, row) in t.data().chunks(k).enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "{which}: row {i} has a negative or non-finite entry"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::Domain(format!("{which}: row {i} sums to {total}")));
        }
    }
    Ok(())
}

/// Off-tape value of [`Tape::kl_divergence`] (inputs assumed valid).
pub fn kl_value(p: &Tensor, q: &Tensor) -> f64 {
    let k = p.cols();
    let total: f64 = p
        .data()
        .chunks(k)
        .zip(q.data().chunks(k))
        .map(|(prow, qrow)| {
            prow.iter()
                .zip(qrow)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_CLAMP).ln()))
                .sum::<f64>()
        })
        .sum();
    total / p.rows() as f64
}

/// Off-tape value of [`Tape::mean_squared_l2`].
pub fn mean_squared_l2_value(f: &Tensor, g: &Tensor) -> f64 {
    let total: f64 = f
        .data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    total / f.rows() as f64
}
