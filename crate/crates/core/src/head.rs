//! Classification head: masked max/mean/min pooling, a ReLU dense layer and
//! a softmax output.

use rand::Rng;

use crate::cells::glorot_bound;
use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamSet, Real, Tensor, Var};

/// Default dense-layer width.
pub const DEFAULT_HIDDEN: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadParams {
    /// Pooled feature width (three times the encoder output width).
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dense_w: ParamId,
    pub dense_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl HeadParams {
    pub fn init<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || classes < 2 {
            return Err(Error::Contract(format!(
                "head dims must be positive with at least two classes (got {input_dim}, {hidden}, {classes})"
            )));
        }
        let mut glorot = |rows: usize, cols: usize| {
            let bound = glorot_bound(rows, cols);
            Tensor::from_fn([rows, cols], |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        };
        let dense = glorot(input_dim, hidden);
        let out = glorot(hidden, classes);
        Ok(HeadParams {
            input_dim,
            hidden,
            classes,
            dense_w: params.add(format!("{prefix}.dense.W"), dense, true)?,
            dense_b: params.add(format!("{prefix}.dense.b"), Tensor::zeros([hidden]), true)?,
            out_w: params.add(format!("{prefix}.out.W"), out, true)?,
            out_b: params.add(format!("{prefix}.out.b"), Tensor::zeros([classes]), true)?,
        })
    }

    pub fn scalar_count(input_dim: usize, hidden: usize, classes: usize) -> usize {
        input_dim * hidden + hidden + hidden * classes + classes
    }

    /// Pre-softmax scores for `B×input_dim` pooled features.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, pooled: Var) -> Result<Var> {
        let shape = g.shape(pooled);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim("head", shape, &[shape[0], self.input_dim]));
        }
        let (w1, b1) = (g.param(params, self.dense_w), g.param(params, self.dense_b));
        let (w2, b2) = (g.param(params, self.out_w), g.param(params, self.out_b));
        let h = g.matmul(pooled, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

/// `[max | mean | min]` over each example's valid timesteps (`B×6d`).
pub fn masked_pool<T: Real>(g: &mut Graph<T>, enc: &EncodedSequence) -> Result<Var> {
    g.masked_pool(enc.states, enc.mask.lengths())
}

/// Class probabilities per example.
pub fn classify<T: Real>(g: &mut Graph<T>, head: &HeadParams, params: &ParamSet<T>, pooled: Var) -> Result<Var> {
    let logits = head.logits(g, params, pooled)?;
    g.softmax(logits)
}

/// Mean cross entropy, computed from logits through log-sum-exp.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Mean `−ln p[label]` of an already-normalized `B×C` probability table.
pub fn cross_entropy_from_probs<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    if probs.rank() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::dim("cross_entropy", probs.shape(), &[labels.len()]));
    }
    let c = probs.shape()[1];
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Input(format!("label {label} outside [0, {c})")));
        }
        total = total - probs.at(&[r, label]).ln();
    }
    Ok(total / T::from_usize(labels.len()).expect("batch size"))
}

/// Index of the largest entry per row; the lowest index wins ties.
pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
