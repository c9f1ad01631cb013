//! Define-by-run tape. Every operation is evaluated eagerly and recorded;
//! [`Graph::backward`] walks the record in reverse.

use std::collections::HashMap;

use super::params::{GradientMap, ParamId, ParamSet};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scan::{self, ScanStrategy};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position of the node on its tape.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    OneMinus,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    AddRow(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize, len: usize },
    Stack(Vec<Var>),
    Reshape(Var, Vec<usize>),
    SwapLeading(Var),
    SelectRows { keep: Vec<bool>, on: Var, off: Var },
    Gather { table: Var, ids: Vec<usize>, frozen_row: Option<usize> },
    Sum(Var),
    MaskedPool { input: Var, lengths: Vec<usize> },
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    GatedScan { gate: Var, value: Var, init: Var, strategy: ScanStrategy },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward pass; graphs are not shared
/// between threads while recording.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank<T: Real>(t: &Tensor<T>, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Contract(format!(
            "{op} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant. Constants never receive gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter into the graph. Repeated calls return the same var.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: params.get(id).clone(),
            op: Op::Param,
            needs_grad: params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn record(&mut self, op: Op<T>) -> Result<Var> {
        let value = self.eval(&op)?;
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Reshape(a, _)
            | Op::SwapLeading(a)
            | Op::Sum(a)
            | Op::Softmax(a) => vec![*a],
            Op::Concat { parts, .. } | Op::Stack(parts) => parts.clone(),
            Op::Slice { input, .. } | Op::MaskedPool { input, .. } => vec![*input],
            Op::SelectRows { on, off, .. } => vec![*on, *off],
            Op::Gather { table, .. } => vec![*table],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::GatedScan {
                gate, value, init, ..
            } => vec![*gate, *value, *init],
        }
    }

    fn eval(&self, op: &Op<T>) -> Result<Tensor<T>> {
        let v = |x: &Var| &self.nodes[x.0].value;
        match op {
            Op::Leaf | Op::Param => unreachable!("leaves carry their own value"),
            Op::MatMul(a, b) => v(a).matmul(v(b)),
            Op::Add(a, b) => v(a).add(v(b)),
            Op::Sub(a, b) => v(a).sub(v(b)),
            Op::Mul(a, b) => v(a).mul(v(b)),
            Op::Scale(a, s) => Ok(v(a).scale(*s)),
            Op::OneMinus(a) => Ok(v(a).one_minus()),
            Op::Sigmoid(a) => Ok(v(a).sigmoid()),
            Op::Tanh(a) => Ok(v(a).tanh()),
            Op::Relu(a) => Ok(v(a).relu()),
            Op::AddRow(x, b) => {
                let (x, b) = (v(x), v(b));
                let n = *x.shape().last().expect("non-empty shape");
                if b.shape() != [n] {
                    return Err(Error::dim("add_row", x.shape(), b.shape()));
                }
                let mut out = x.clone();
                for chunk in out.data_mut().chunks_mut(n) {
                    for (o, &bb) in chunk.iter_mut().zip(b.data()) {
                        *o = *o + bb;
                    }
                }
                Ok(out)
            }
            Op::Concat { parts, axis } => {
                let ts: Vec<_> = parts.iter().map(v).collect();
                Tensor::concat(&ts, *axis)
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => v(input).slice(*axis, *start, *len),
            Op::Stack(parts) => {
                let ts: Vec<_> = parts.iter().map(v).collect();
                Tensor::stack(&ts)
            }
            Op::Reshape(a, shape) => v(a).reshape(shape.clone()),
            Op::SwapLeading(a) => v(a).swap_leading(),
            Op::SelectRows { keep, on, off } => {
                let (on, off) = (v(on), v(off));
                if on.shape() != off.shape() {
                    return Err(Error::dim("select_rows", on.shape(), off.shape()));
                }
                if keep.len() != on.shape()[0] {
                    return Err(Error::dim("select_rows", &[keep.len()], on.shape()));
                }
                let inner = on.len() / keep.len();
                let mut data = Vec::with_capacity(on.len());
                for (r, &k) in keep.iter().enumerate() {
                    let src = if k { on } else { off };
                    data.extend_from_slice(&src.data()[r * inner..(r + 1) * inner]);
                }
                Tensor::new(on.shape().to_vec(), data)
            }
            Op::Gather { table, ids, .. } => {
                let table = v(table);
                expect_rank(table, 2, "gather")?;
                let (rows, width) = (table.shape()[0], table.shape()[1]);
                let mut data = Vec::with_capacity(ids.len() * width);
                for &id in ids {
                    if id >= rows {
                        return Err(Error::Input(format!("row id {id} outside table of {rows} rows")));
                    }
                    data.extend_from_slice(table.row(id));
                }
                Tensor::new([ids.len(), width], data)
            }
            Op::Sum(a) => Ok(Tensor::scalar(v(a).sum())),
            Op::MaskedPool { input, lengths } => masked_pool_forward(v(input), lengths),
            Op::Softmax(a) => softmax_rows(v(a)),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (_, nll) = log_softmax_nll(v(logits), labels)?;
                Ok(Tensor::scalar(nll))
            }
            Op::GatedScan {
                gate,
                value,
                init,
                strategy,
            } => scan::run(v(gate), v(value), v(init), *strategy),
        }
    }

    /// Recomputes every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut scratch = Graph::<T>::new();
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf | Op::Param => node.value.clone(),
                ref op => scratch.eval(op)?,
            };
            out.push(value.clone());
            scratch.nodes.push(Node {
                value,
                op: Op::Leaf,
                needs_grad: false,
            });
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.record(Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                inputs.len()
            )));
        }
        match op {
            ElementwiseOp::Sigmoid => self.sigmoid(inputs[0]),
            ElementwiseOp::Tanh => self.tanh(inputs[0]),
            ElementwiseOp::OneMinus => self.one_minus(inputs[0]),
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Sub => self.sub(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
        }
    }

    /// Adds a length-`n` bias to every length-`n` row of `x` (`x`'s last axis
    /// must equal `n`). This is the only broadcast the graph supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRow(x, bias))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.record(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice {
            input,
            axis,
            start,
            len,
        })
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Stack(parts.to_vec()))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.record(Op::Reshape(input, shape.into()))
    }

    pub fn swap_leading(&mut self, input: Var) -> Result<Var> {
        self.record(Op::SwapLeading(input))
    }

    /// Row-wise choice along the leading axis: row `r` comes from `on` when
    /// `keep[r]`, otherwise from `off`.
    pub fn select_rows(&mut self, keep: &[bool], on: Var, off: Var) -> Result<Var> {
        self.record(Op::SelectRows {
            keep: keep.to_vec(),
            on,
            off,
        })
    }

    /// Looks up rows of a `V×E` table. Gradient never flows into `frozen_row`.
    pub fn gather(&mut self, table: Var, ids: &[usize], frozen_row: Option<usize>) -> Result<Var> {
        self.record(Op::Gather {
            table,
            ids: ids.to_vec(),
            frozen_row,
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    /// `[max | mean | min]` over the valid prefix of each `B×T×W` example,
    /// giving `B×3W`.
    pub fn masked_pool(&mut self, input: Var, lengths: &[usize]) -> Result<Var> {
        self.record(Op::MaskedPool {
            input,
            lengths: lengths.to_vec(),
        })
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.record(Op::Softmax(logits))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Gradients of every recorded node with respect to scalar `loss`.
    /// Nodes not on a path to `loss` map to `None`.
    pub fn backward_all(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        self.sweep(loss, |_| true)
    }

    /// Gradient of `loss` for every trainable parameter in `params`;
    /// parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var, params: &ParamSet<T>) -> Result<GradientMap<T>> {
        let mut is_param = vec![false; self.nodes.len()];
        for v in self.params.values() {
            is_param[v.0] = true;
        }
        let mut grads = self.sweep(loss, |i| is_param[i])?;
        let entries = params
            .trainable_ids()
            .map(|id| {
                let g = self
                    .params
                    .get(&id)
                    .and_then(|v| grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape().to_vec()));
                (id, g)
            })
            .collect();
        Ok(GradientMap::from_entries(entries))
    }

    /// Reverse sweep from `loss`. A node's gradient is dropped once it has
    /// been propagated unless `keep` asks for it.
    fn sweep(&self, loss: Var, keep: impl Fn(usize) -> bool) -> Result<Vec<Option<Tensor<T>>>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &upstream, &mut grads)?;
            }
            if keep(i) {
                grads[i] = Some(upstream);
            }
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, up: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let slot = slot(grads, *a, av.shape());
                    T::gemm(m, n, k, up.data(), false, bv.data(), true, slot.data_mut(), true);
                }
                if self.wants(*b) {
                    let slot = slot(grads, *b, bv.shape());
                    T::gemm(k, m, n, av.data(), true, up.data(), false, slot.data_mut(), true);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, up);
                self.acc(grads, *b, up);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, up);
                if self.wants(*b) {
                    self.acc(grads, *b, &up.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, &up.mul(val(b))?);
                }
                if self.wants(*b) {
                    self.acc(grads, *b, &up.mul(val(a))?);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, &up.scale(*s)),
            Op::OneMinus(a) => self.acc(grads, *a, &up.scale(-T::one())),
            Op::Sigmoid(a) => {
                let g = up.zip_map(out, "sigmoid'", |u, s| u * s * (T::one() - s))?;
                self.acc(grads, *a, &g);
            }
            Op::Tanh(a) => {
                let g = up.zip_map(out, "tanh'", |u, t| u * (T::one() - t * t))?;
                self.acc(grads, *a, &g);
            }
            Op::Relu(a) => {
                let g = up.zip_map(val(a), "relu'", |u, x| if x > T::zero() { u } else { T::zero() })?;
                self.acc(grads, *a, &g);
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, up);
                if self.wants(*b) {
                    let n = val(b).len();
                    let slot = slot(grads, *b, val(b).shape());
                    for chunk in up.data().chunks(n) {
                        for (s, &u) in slot.data_mut().iter_mut().zip(chunk) {
                            *s = *s + u;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = val(p).shape()[*axis];
                    if self.wants(*p) {
                        self.acc(grads, *p, &up.slice(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let shape = val(input).shape().to_vec();
                let slot = slot(grads, *input, &shape);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let ext = shape[*axis];
                let data = slot.data_mut();
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        data[dst + j] = data[dst + j] + up.data()[src + j];
                    }
                }
            }
            Op::Stack(parts) => {
                let inner = val(&parts[0]).len();
                for (k, p) in parts.iter().enumerate() {
                    if self.wants(*p) {
                        let piece = Tensor::new(
                            val(p).shape().to_vec(),
                            up.data()[k * inner..(k + 1) * inner].to_vec(),
                        )?;
                        self.acc(grads, *p, &piece);
                    }
                }
            }
            Op::Reshape(a, _) => self.acc(grads, *a, &up.reshape(val(a).shape().to_vec())?),
            Op::SwapLeading(a) => self.acc(grads, *a, &up.swap_leading()?),
            Op::SelectRows { keep, on, off } => {
                let inner = up.len() / keep.len();
                for (target, want_on) in [(*on, true), (*off, false)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let slot = slot(grads, target, up.shape());
                    let data = slot.data_mut();
                    for (r, &k) in keep.iter().enumerate() {
                        if k == want_on {
                            for j in r * inner..(r + 1) * inner {
                                data[j] = data[j] + up.data()[j];
                            }
                        }
                    }
                }
            }
            Op::Gather {
                table,
                ids,
                frozen_row,
            } => {
                let shape = val(table).shape().to_vec();
                let width = shape[1];
                let slot = slot(grads, *table, &shape);
                let data = slot.data_mut();
                for (k, &id) in ids.iter().enumerate() {
                    if Some(id) == *frozen_row {
                        continue;
                    }
                    for j in 0..width {
                        data[id * width + j] = data[id * width + j] + up.data()[k * width + j];
                    }
                }
            }
            Op::Sum(a) => {
                let g = Tensor::filled(val(a).shape().to_vec(), up.item());
                self.acc(grads, *a, &g);
            }
            Op::MaskedPool { input, lengths } => {
                let g = masked_pool_backward(val(input), lengths, up)?;
                self.acc(grads, *input, &g);
            }
            Op::Softmax(a) => {
                // dx = p ⊙ (u − Σ u⊙p) per row
                let c = *out.shape().last().expect("softmax rows");
                let mut g = out.clone();
                for (row, (p, u)) in g
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c).zip(up.data().chunks(c)))
                {
                    let dot: T = p.iter().zip(u).map(|(&p, &u)| p * u).sum();
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = p[j] * (u[j] - dot);
                    }
                }
                self.acc(grads, *a, &g);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (log_probs, _) = log_softmax_nll(val(logits), labels)?;
                let c = log_probs.shape()[1];
                let scale = up.item() / T::from_usize(labels.len()).expect("batch size");
                let mut g = log_probs.map(|lp| lp.exp());
                for (r, &label) in labels.iter().enumerate() {
                    g.data_mut()[r * c + label] = g.data()[r * c + label] - T::one();
                }
                self.acc(grads, *logits, &g.scale(scale));
            }
            Op::GatedScan {
                gate, value, init, ..
            } => {
                let (dg, dv, dc0) = scan::backward(val(gate), val(value), val(init), out, up)?;
                self.acc(grads, *gate, &dg);
                self.acc(grads, *value, &dv);
                self.acc(grads, *init, &dc0);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(logits, 2, "softmax")?;
    let c = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax (log-sum-exp stabilized) and mean NLL of `labels`.
pub(crate) fn log_softmax_nll<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, T)> {
    expect_rank(logits, 2, "softmax_cross_entropy")?;
    let (rows, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != rows {
        return Err(Error::dim("softmax_cross_entropy", &[labels.len()], logits.shape()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} outside [0, {c})")));
    }
    let mut out = logits.clone();
    let mut nll = T::zero();
    for (row, &label) in out.data_mut().chunks_mut(c).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
        nll = nll - row[label];
    }
    Ok((out, nll / T::from_usize(rows).expect("row count")))
}

fn pool_dims<T: Real>(input: &Tensor<T>, lengths: &[usize]) -> Result<(usize, usize, usize)> {
    expect_rank(input, 3, "masked_pool")?;
    let (b, t, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if lengths.len() != b {
        return Err(Error::dim("masked_pool", &[lengths.len()], input.shape()));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t) {
        return Err(Error::Input(format!(
            "sequence length {bad} invalid for {t} timesteps (pooling needs length >= 1)"
        )));
    }
    Ok((b, t, w))
}

/// Index (within the valid prefix) of the extreme value of each coordinate;
/// the earliest wins ties.
fn pool_extremes<T: Real>(input: &Tensor<T>, b: usize, t: usize, w: usize, len: usize) -> (Vec<usize>, Vec<usize>) {
    let x = input.data();
    let at = |s: usize, j: usize| x[(b * t + s) * w + j];
    let mut arg_max = vec![0; w];
    let mut arg_min = vec![0; w];
    for s in 1..len {
        for j in 0..w {
            if at(s, j) > at(arg_max[j], j) {
                arg_max[j] = s;
            }
            if at(s, j) < at(arg_min[j], j) {
                arg_min[j] = s;
            }
        }
    }
    (arg_max, arg_min)
}

fn masked_pool_forward<T: Real>(input: &Tensor<T>, lengths: &[usize]) -> Result<Tensor<T>> {
    let (b, t, w) = pool_dims(input, lengths)?;
    let x = input.data();
    let mut out = Vec::with_capacity(b * 3 * w);
    for (e, &len) in lengths.iter().enumerate() {
        let (arg_max, arg_min) = pool_extremes(input, e, t, w, len);
        out.extend((0..w).map(|j| x[(e * t + arg_max[j]) * w + j]));
        let n = T::from_usize(len).expect("length");
        out.extend((0..w).map(|j| (0..len).map(|s| x[(e * t + s) * w + j]).sum::<T>() / n));
        out.extend((0..w).map(|j| x[(e * t + arg_min[j]) * w + j]));
    }
    Tensor::new([b, 3 * w], out)
}

fn masked_pool_backward<T: Real>(input: &Tensor<T>, lengths: &[usize], up: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, t, w) = pool_dims(input, lengths)?;
    let mut g = Tensor::zeros([b, t, w]);
    let u = up.data();
    for (e, &len) in lengths.iter().enumerate() {
        let (arg_max, arg_min) = pool_extremes(input, e, t, w, len);
        let n = T::from_usize(len).expect("length");
        let data = g.data_mut();
        let base = e * 3 * w;
        for j in 0..w {
            let gm = u[base + w + j] / n;
            for s in 0..len {
                let k = (e * t + s) * w + j;
                data[k] = data[k] + gm;
            }
            let kx = (e * t + arg_max[j]) * w + j;
            data[kx] = data[kx] + u[base + j];
            let kn = (e * t + arg_min[j]) * w + j;
            data[kn] = data[kn] + u[base + 2 * w + j];
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut params = ParamSet::<f64>::new();
        let p = params.add("p", Tensor::from_fn([2, 3], |i| i as f64), true).unwrap();
        let q = params.add("q", Tensor::ones([4]), true).unwrap();
        let mut g = Graph::new();
        let pv = g.param(&params, p);
        let loss = g.sum(pv).unwrap();
        let grads = g.backward(loss, &params).unwrap();
        assert_eq!(grads.len(), 2);
        assert!(grads.get(p).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(grads.get(q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.backward_all(x), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_example() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 3, 2], vec![1.0, -2.0, 3.0, 0.0, 99.0, 99.0]).unwrap());
        let pooled = g.masked_pool(x, &[2]).unwrap();
        assert_eq!(g.value(pooled).data(), &[3.0, 0.0, 2.0, -1.0, 1.0, -2.0]);
        assert!(matches!(g.masked_pool(x, &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let p = g.softmax(x).unwrap();
        let got = g.value(p).data();
        assert!((got[0] - 0.25).abs() < 1e-15 && (got[1] - 0.75).abs() < 1e-15);
        assert!(matches!(g.softmax_cross_entropy(x, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn([3, 4], |i| (i as f32 * 0.37).sin()));
        let b = g.constant(Tensor::from_fn([4, 2], |i| (i as f32 * 1.3).cos()));
        let m = g.matmul(a, b).unwrap();
        let s = g.sigmoid(m).unwrap();
        let t = g.tanh(s).unwrap();
        let _ = g.sum(t).unwrap();
        let replayed = g.replay().unwrap();
        for (i, r) in replayed.iter().enumerate() {
            assert_eq!(r, g.value(Var(i)));
        }
    }
}
