//! Element-wise gated recurrence
//!
//! ```text
//! c4[t] = σ(g[t]) ⊙ c4[t-1] + (1 − σ(g[t])) ⊙ v[t]
//! ```
//!
//! and the output combine step that follows it. Every feature lane is an
//! independent first-order recurrence, so [`scan_optimized`] computes all
//! gates in one batched pass and then hands disjoint blocks of lanes to
//! worker threads. Both forms perform the same floating-point operations in
//! the same order per lane, so their outputs agree bit for bit.

use std::fmt;
use std::str::FromStr;
use std::thread;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Op, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanStrategy {
    /// Sequential over time, then over lanes.
    Naive,
    /// Batched gate evaluation, lanes split into `workers` contiguous blocks.
    Optimized { workers: usize },
}

impl Default for ScanStrategy {
    fn default() -> Self {
        ScanStrategy::Optimized { workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanInput<T> {
    /// `T×d` gate pre-activations (the controller's first output).
    pub gate_seq: Tensor<T>,
    /// `T×d` values written into the state (the listener's hidden output).
    pub value_seq: Tensor<T>,
    /// Initial state, length `d`.
    pub c0: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput<T> {
    pub c4_seq: Tensor<T>,
}

fn check_shapes<T: Real>(gate: &Tensor<T>, value: &Tensor<T>, init: &Tensor<T>) -> Result<(usize, usize)> {
    if gate.rank() != 2 {
        return Err(Error::Contract(format!("scan gates must be T×d, got {:?}", gate.shape())));
    }
    if gate.shape() != value.shape() {
        return Err(Error::dim("scan", gate.shape(), value.shape()));
    }
    let (t, d) = (gate.shape()[0], gate.shape()[1]);
    if init.shape() != [d] {
        return Err(Error::dim("scan", gate.shape(), init.shape()));
    }
    Ok((t, d))
}

impl<T: Real> ScanInput<T> {
    pub fn new(gate_seq: Tensor<T>, value_seq: Tensor<T>, c0: Tensor<T>) -> Result<Self> {
        check_shapes(&gate_seq, &value_seq, &c0)?;
        Ok(ScanInput {
            gate_seq,
            value_seq,
            c0,
        })
    }
}

#[inline(always)]
fn blend<T: Real>(forget: T, carry: T, value: T) -> T {
    forget * carry + (T::one() - forget) * value
}

fn naive<T: Real>(gate: &Tensor<T>, value: &Tensor<T>, init: &Tensor<T>) -> Result<Tensor<T>> {
    let (t, d) = check_shapes(gate, value, init)?;
    let (g, v) = (gate.data(), value.data());
    let mut state = init.data().to_vec();
    let mut out = Vec::with_capacity(t * d);
    for s in 0..t {
        for j in 0..d {
            let f = sigmoid(g[s * d + j]);
            state[j] = blend(f, state[j], v[s * d + j]);
            out.push(state[j]);
        }
    }
    Tensor::new([t, d], out)
}

/// Runs the recurrence for lanes `[lo, hi)` and returns a `T×(hi−lo)` block.
fn lane_block<T: Real>(forget: &[T], v: &[T], init: &[T], t: usize, d: usize, lo: usize, hi: usize) -> Vec<T> {
    let w = hi - lo;
    let mut state = init[lo..hi].to_vec();
    let mut out = Vec::with_capacity(t * w);
    for s in 0..t {
        let row = s * d;
        let (f, x) = (&forget[row + lo..row + hi], &v[row + lo..row + hi]);
        for j in 0..w {
            state[j] = blend(f[j], state[j], x[j]);
        }
        out.extend_from_slice(&state);
    }
    out
}

fn optimized<T: Real>(gate: &Tensor<T>, value: &Tensor<T>, init: &Tensor<T>, workers: usize) -> Result<Tensor<T>> {
    let (t, d) = check_shapes(gate, value, init)?;
    if workers == 0 {
        return Err(Error::Contract("scan needs at least one worker".into()));
    }
    let forget: Vec<T> = gate.data().iter().map(|&x| sigmoid(x)).collect();
    let workers = workers.min(d);
    let per = d.div_ceil(workers);
    let bounds: Vec<(usize, usize)> = (0..workers)
        .map(|k| (k * per, ((k + 1) * per).min(d)))
        .filter(|(lo, hi)| lo < hi)
        .collect();
    let (v, c0) = (value.data(), init.data());
    let blocks: Vec<Vec<T>> = if bounds.len() == 1 {
        vec![lane_block(&forget, v, c0, t, d, 0, d)]
    } else {
        let forget = &forget;
        thread::scope(|scope| {
            let handles: Vec<_> = bounds
                .iter()
                .map(|&(lo, hi)| scope.spawn(move || lane_block(forget, v, c0, t, d, lo, hi)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scan worker panicked"))
                .collect()
        })
    };
    let mut out = vec![T::zero(); t * d];
    for (&(lo, hi), block) in bounds.iter().zip(&blocks) {
        let w = hi - lo;
        for s in 0..t {
            out[s * d + lo..s * d + hi].copy_from_slice(&block[s * w..(s + 1) * w]);
        }
    }
    Tensor::new([t, d], out)
}

/// Left-to-right reference evaluation.
pub fn scan_naive<T: Real>(input: &ScanInput<T>) -> Result<ScanOutput<T>> {
    naive(&input.gate_seq, &input.value_seq, &input.c0).map(|c4_seq| ScanOutput { c4_seq })
}

/// Lane-parallel evaluation over `workers` threads. Bit-identical to
/// [`scan_naive`] for any worker count.
pub fn scan_optimized<T: Real>(input: &ScanInput<T>, workers: usize) -> Result<ScanOutput<T>> {
    optimized(&input.gate_seq, &input.value_seq, &input.c0, workers).map(|c4_seq| ScanOutput { c4_seq })
}

pub(crate) fn run<T: Real>(gate: &Tensor<T>, value: &Tensor<T>, init: &Tensor<T>, strategy: ScanStrategy) -> Result<Tensor<T>> {
    match strategy {
        ScanStrategy::Naive => naive(gate, value, init),
        ScanStrategy::Optimized { workers } => optimized(gate, value, init, workers),
    }
}

/// Reverse pass. `out` is the forward result, `up` the gradient arriving at it.
pub(crate) fn backward<T: Real>(
    gate: &Tensor<T>,
    value: &Tensor<T>,
    init: &Tensor<T>,
    out: &Tensor<T>,
    up: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (t, d) = check_shapes(gate, value, init)?;
    let (g, v, c, u) = (gate.data(), value.data(), out.data(), up.data());
    let mut dg = vec![T::zero(); t * d];
    let mut dv = vec![T::zero(); t * d];
    let mut carry = vec![T::zero(); d];
    for s in (0..t).rev() {
        for j in 0..d {
            let k = s * d + j;
            let delta = carry[j] + u[k];
            let f = sigmoid(g[k]);
            let prev = if s == 0 { init.data()[j] } else { c[k - d] };
            dv[k] = (T::one() - f) * delta;
            dg[k] = delta * (prev - v[k]) * f * (T::one() - f);
            carry[j] = f * delta;
        }
    }
    Ok((Tensor::new([t, d], dg)?, Tensor::new([t, d], dv)?, Tensor::new([d], carry)?))
}

impl<T: Real> Graph<T> {
    /// Records the gated recurrence over `T×d` inputs.
    pub fn gated_scan(&mut self, gate: Var, value: Var, init: Var, strategy: ScanStrategy) -> Result<Var> {
        self.record(Op::GatedScan {
            gate,
            value,
            init,
            strategy,
        })
    }
}

/// Which reading of the output step to apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum OutputGateMode {
    /// `h4 = h2 ⊙ c3`
    Literal,
    /// `h4 = σ(h2) ⊙ c4`
    #[default]
    GatedC4,
}

impl fmt::Display for OutputGateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputGateMode::Literal => "literal",
            OutputGateMode::GatedC4 => "gated_c4",
        })
    }
}

impl FromStr for OutputGateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(OutputGateMode::Literal),
            "gated_c4" => Ok(OutputGateMode::GatedC4),
            other => Err(Error::Input(format!("unknown output gate mode {other:?}"))),
        }
    }
}

/// Output step over equal-shaped sequences. `c3` is ignored in `GatedC4`
/// mode and `c4` in `Literal` mode.
pub fn combine_output<T: Real>(g: &mut Graph<T>, h2: Var, c3: Var, c4: Var, mode: OutputGateMode) -> Result<Var> {
    let shapes_agree = g.shape(h2) == g.shape(c3) && g.shape(h2) == g.shape(c4);
    if !shapes_agree {
        let other = if g.shape(h2) != g.shape(c3) { c3 } else { c4 };
        return Err(Error::dim("combine_output", g.shape(h2), g.shape(other)));
    }
    match mode {
        OutputGateMode::Literal => g.mul(h2, c3),
        OutputGateMode::GatedC4 => {
            let gate = g.sigmoid(h2)?;
            g.mul(gate, c4)
        }
    }
}
