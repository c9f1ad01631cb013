//! Sequence encoders over padded batches.
//!
//! Sequences enter batch-major (`B×T×input_dim`) and leave as
//! [`EncodedSequence`] (`B×T×2d`). Internally everything runs time-major so a
//! whole sequence's input projection is one matrix product and each timestep
//! is a contiguous row block.
//!
//! Padding: a recurrence only advances while `t < length`. The forward
//! direction holds its state past the end, the backward direction starts
//! from a zero state at the last real token, and every padded output
//! position is exactly zero.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::cells::{controller_step_projected, Atom, CellParams, CellVars, ControllerParams, ControllerState, ControllerVars, InitScheme};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamSet, Real, Tensor, Var};
use crate::scan::{combine_output, OutputGateMode, ScanStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Rcrn,
    Bilstm,
    StackedBilstm { layers: usize },
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderKind::Rcrn => f.write_str("rcrn"),
            EncoderKind::Bilstm => f.write_str("bilstm"),
            EncoderKind::StackedBilstm { layers } => write!(f, "stacked_bilstm:{layers}"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcrn" => Ok(EncoderKind::Rcrn),
            "bilstm" => Ok(EncoderKind::Bilstm),
            "stacked_bilstm" => Ok(EncoderKind::StackedBilstm { layers: 3 }),
            other => {
                let layers = other
                    .strip_prefix("stacked_bilstm:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| Error::Input(format!("unknown encoder kind {other:?}")))?;
                Ok(EncoderKind::StackedBilstm { layers })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Per-direction hidden width `d`; outputs are `2d` wide.
    pub hidden_dim: usize,
    /// Base cell for every recurrence, baselines included.
    pub atom: Atom,
    pub kind: EncoderKind,
    pub output_gate_mode: OutputGateMode,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, input_dim: usize, hidden_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            hidden_dim,
            atom: Atom::Lstm,
            kind,
            output_gate_mode: OutputGateMode::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::Contract("encoder dims must be positive".into()));
        }
        if let EncoderKind::StackedBilstm { layers: 0 } = self.kind {
            return Err(Error::Contract("stacked encoder needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Exact count of trainable encoder scalars.
pub fn count_params(config: &EncoderConfig) -> usize {
    let (a, d, i) = (config.atom, config.hidden_dim, config.input_dim);
    let bi = |input: usize| 2 * CellParams::scalar_count(a, input, d);
    match config.kind {
        // controller branch 1, controller branch 2, listener: all read the input
        EncoderKind::Rcrn => 3 * bi(i),
        EncoderKind::Bilstm => bi(i),
        EncoderKind::StackedBilstm { layers } => bi(i) + (layers - 1) * bi(2 * d),
    }
}

/// Validity mask of a padded batch, stored as per-example lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    lengths: Vec<usize>,
    steps: usize,
}

impl Mask {
    pub fn from_lengths(lengths: Vec<usize>, steps: usize) -> Result<Self> {
        if lengths.is_empty() || steps == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l > steps) {
            return Err(Error::Input(format!("length {bad} exceeds {steps} timesteps")));
        }
        Ok(Mask { lengths, steps })
    }

    /// Parses `B×T` rows of 0/1. Each row must be a run of ones followed by
    /// zeros.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let steps = rows.first().map_or(0, Vec::len);
        let mut lengths = Vec::with_capacity(rows.len());
        for (b, row) in rows.iter().enumerate() {
            if row.len() != steps {
                return Err(Error::Input(format!("mask row {b} has {} steps, expected {steps}", row.len())));
            }
            let len = row.iter().take_while(|&&m| m == 1).count();
            if row[len..].iter().any(|&m| m != 0) {
                return Err(Error::Input(format!("mask row {b} is not a prefix of ones: {row:?}")));
            }
            lengths.push(len);
        }
        Self::from_lengths(lengths, steps)
    }

    pub fn full(batch: usize, steps: usize) -> Self {
        Mask {
            lengths: vec![steps; batch],
            steps,
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_active(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    fn active_at(&self, t: usize) -> Vec<bool> {
        self.lengths.iter().map(|&l| t < l).collect()
    }

    /// `B×T` tensor of ones and zeros.
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let t = self.steps;
        Tensor::from_fn([self.batch(), t], |k| if k % t < self.lengths[k / t] { T::one() } else { T::zero() })
    }

    /// Mask broadcast explicitly to time-major `T×B×width`.
    fn time_major<T: Real>(&self, width: usize) -> Tensor<T> {
        let b = self.batch();
        Tensor::from_fn([self.steps, b, width], |k| {
            let (t, e) = (k / (b * width), (k / width) % b);
            if t < self.lengths[e] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Encoder output: `B×T×2d` states (zero at padded positions) and the mask.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub states: Var,
    pub mask: Mask,
}

/// Hidden and (LSTM) cell states of one direction, one var per timestep in
/// time order.
struct Trace {
    h: Vec<Var>,
    c: Option<Vec<Var>>,
}

/// Output of a bidirectional pass, time-major `T×B×2d`.
#[derive(Clone, Copy, Debug)]
pub struct BiStates {
    pub h: Var,
    pub c: Option<Var>,
}

struct Stepper<'a> {
    mask: &'a Mask,
    zeros: Var,
}

impl Stepper<'_> {
    fn order(&self, reverse: bool) -> Vec<usize> {
        if reverse {
            (0..self.mask.steps).rev().collect()
        } else {
            (0..self.mask.steps).collect()
        }
    }

    /// Advances rows active at `t` and holds the rest.
    fn gate<T: Real>(&self, g: &mut Graph<T>, t: usize, new: Var, old: Var) -> Result<Var> {
        let keep = self.mask.active_at(t);
        if keep.iter().all(|&k| k) {
            return Ok(new);
        }
        g.select_rows(&keep, new, old)
    }

    /// Zeroes rows inactive at `t`.
    fn emit<T: Real>(&self, g: &mut Graph<T>, t: usize, v: Var) -> Result<Var> {
        self.gate(g, t, v, self.zeros)
    }

    fn slice_step<T: Real>(&self, g: &mut Graph<T>, projected: Var, t: usize) -> Result<Var> {
        let b = self.mask.batch();
        g.slice(projected, 0, t * b, b)
    }

    fn run_cell<T: Real>(&self, g: &mut Graph<T>, cell: &CellVars, projected: Var, reverse: bool) -> Result<Trace> {
        let steps = self.mask.steps;
        let mut h = self.zeros;
        let mut c = cell.atom.has_cell_state().then_some(self.zeros);
        let mut hs = vec![self.zeros; steps];
        let mut cs = vec![self.zeros; steps];
        for t in self.order(reverse) {
            let xw = self.slice_step(g, projected, t)?;
            let (h_new, c_new) = cell.step_projected(g, xw, h, c)?;
            h = self.gate(g, t, h_new, h)?;
            hs[t] = self.emit(g, t, h_new)?;
            if let (Some(c_new), Some(c_old)) = (c_new, c) {
                c = Some(self.gate(g, t, c_new, c_old)?);
                cs[t] = self.emit(g, t, c_new)?;
            }
        }
        Ok(Trace {
            h: hs,
            c: cell.atom.has_cell_state().then_some(cs),
        })
    }

    fn run_controller<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctrl: &ControllerVars,
        p1: Var,
        p2: Var,
        reverse: bool,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let steps = self.mask.steps;
        let has_c = ctrl.branch1.atom.has_cell_state();
        let mut st = ControllerState {
            h1: self.zeros,
            h2: self.zeros,
            c1: has_c.then_some(self.zeros),
            c2: has_c.then_some(self.zeros),
        };
        let mut h1s = vec![self.zeros; steps];
        let mut h2s = vec![self.zeros; steps];
        for t in self.order(reverse) {
            let x1 = self.slice_step(g, p1, t)?;
            let x2 = self.slice_step(g, p2, t)?;
            let next = controller_step_projected(g, ctrl, x1, x2, &st)?;
            h1s[t] = self.emit(g, t, next.h1)?;
            h2s[t] = self.emit(g, t, next.h2)?;
            st = ControllerState {
                h1: self.gate(g, t, next.h1, st.h1)?,
                h2: self.gate(g, t, next.h2, st.h2)?,
                c1: match (next.c1, st.c1) {
                    (Some(n), Some(o)) => Some(self.gate(g, t, n, o)?),
                    _ => None,
                },
                c2: match (next.c2, st.c2) {
                    (Some(n), Some(o)) => Some(self.gate(g, t, n, o)?),
                    _ => None,
                },
            };
        }
        Ok((h1s, h2s))
    }
}

fn join_directions<T: Real>(g: &mut Graph<T>, fwd: &[Var], bwd: &[Var]) -> Result<Var> {
    let f = g.stack(fwd)?;
    let b = g.stack(bwd)?;
    g.concat(&[f, b], 2)
}

/// Validates `seq` against `mask` and returns it flattened time-major
/// (`T·B×input_dim`).
fn flatten_time_major<T: Real>(g: &mut Graph<T>, seq: Var, mask: &Mask, input_dim: usize) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != input_dim {
        return Err(Error::dim("encode", &shape, &[mask.batch(), mask.steps(), input_dim]));
    }
    if shape[0] != mask.batch() || shape[1] != mask.steps() {
        return Err(Error::dim("encode mask", &shape[..2], &[mask.batch(), mask.steps()]));
    }
    let tm = g.swap_leading(seq)?;
    g.reshape(tm, [shape[0] * shape[1], input_dim])
}

fn bi_from_flat<T: Real>(g: &mut Graph<T>, fwd: &CellVars, bwd: &CellVars, flat: Var, mask: &Mask) -> Result<BiStates> {
    let zeros = g.constant(Tensor::zeros([mask.batch(), fwd.hidden_dim]));
    let stepper = Stepper { mask, zeros };
    let pf = fwd.project_input(g, flat)?;
    let pb = bwd.project_input(g, flat)?;
    let f = stepper.run_cell(g, fwd, pf, false)?;
    let b = stepper.run_cell(g, bwd, pb, true)?;
    let h = join_directions(g, &f.h, &b.h)?;
    let c = match (f.c, b.c) {
        (Some(fc), Some(bc)) => Some(join_directions(g, &fc, &bc)?),
        _ => None,
    };
    Ok(BiStates { h, c })
}

/// Runs `fwd` left to right and `bwd` right to left over each example's
/// true length and concatenates the two per timestep. `seq` is
/// `B×T×input_dim`; the result is time-major `T×B×2d`.
pub fn bidirectional_encode<T: Real>(g: &mut Graph<T>, fwd: &CellVars, bwd: &CellVars, seq: Var, mask: &Mask) -> Result<BiStates> {
    if fwd.hidden_dim != bwd.hidden_dim || fwd.input_dim != bwd.input_dim {
        return Err(Error::dim(
            "bidirectional_encode",
            &[fwd.input_dim, fwd.hidden_dim],
            &[bwd.input_dim, bwd.hidden_dim],
        ));
    }
    let flat = flatten_time_major(g, seq, mask, fwd.input_dim)?;
    bi_from_flat(g, fwd, bwd, flat, mask)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BiParams {
    pub fwd: CellParams,
    pub bwd: CellParams,
}

impl BiParams {
    fn init<T: Real>(p: &mut ParamSet<T>, prefix: &str, atom: Atom, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let scheme = InitScheme::GlorotUniform;
        Ok(BiParams {
            fwd: CellParams::init(p, &format!("{prefix}.fwd"), atom, input, hidden, scheme, rng)?,
            bwd: CellParams::init(p, &format!("{prefix}.bwd"), atom, input, hidden, scheme, rng)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RcrnParams {
    pub controller_fwd: ControllerParams,
    pub controller_bwd: ControllerParams,
    pub listener: BiParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderParams {
    Rcrn(RcrnParams),
    /// One entry per bidirectional layer.
    Stack(Vec<BiParams>),
}

/// Intermediate sequences of an RCRN pass, time-major `T×B×2d`.
#[derive(Clone, Copy, Debug)]
pub struct RcrnTrace {
    pub h1: Var,
    pub h2: Var,
    pub h3: Var,
    pub c3: Option<Var>,
    pub c4: Var,
    pub h4: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    /// Registers the encoder's parameters under `prefix`.
    pub fn init<T: Real>(params: &mut ParamSet<T>, prefix: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (a, i, d) = (config.atom, config.input_dim, config.hidden_dim);
        let scheme = InitScheme::GlorotUniform;
        let enc = match config.kind {
            EncoderKind::Rcrn => EncoderParams::Rcrn(RcrnParams {
                controller_fwd: ControllerParams::init(params, &format!("{prefix}.controller.fwd"), a, i, d, scheme, rng)?,
                controller_bwd: ControllerParams::init(params, &format!("{prefix}.controller.bwd"), a, i, d, scheme, rng)?,
                listener: BiParams::init(params, &format!("{prefix}.listener"), a, i, d, rng)?,
            }),
            EncoderKind::Bilstm => EncoderParams::Stack(vec![BiParams::init(params, &format!("{prefix}.layer0"), a, i, d, rng)?]),
            EncoderKind::StackedBilstm { layers } => EncoderParams::Stack(
                (0..layers)
                    .map(|l| {
                        let input = if l == 0 { i } else { 2 * d };
                        BiParams::init(params, &format!("{prefix}.layer{l}"), a, input, d, rng)
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Encoder { config, params: enc })
    }

    /// Encodes a `B×T×input_dim` batch.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: Var,
        mask: &Mask,
        strategy: ScanStrategy,
    ) -> Result<EncodedSequence> {
        let flat = flatten_time_major(g, seq, mask, self.config.input_dim)?;
        let time_major = match &self.params {
            EncoderParams::Rcrn(p) => self.rcrn_flat(g, params, p, flat, mask, strategy)?.h4,
            EncoderParams::Stack(layers) => stacked_flat(g, params, layers, flat, mask)?,
        };
        let states = g.swap_leading(time_major)?;
        Ok(EncodedSequence {
            states,
            mask: mask.clone(),
        })
    }

    /// Full RCRN pass exposing every intermediate sequence.
    pub fn rcrn_trace<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        seq: Var,
        mask: &Mask,
        strategy: ScanStrategy,
    ) -> Result<RcrnTrace> {
        let EncoderParams::Rcrn(p) = &self.params else {
            return Err(Error::Contract(format!("{} encoder has no RCRN trace", self.config.kind)));
        };
        let flat = flatten_time_major(g, seq, mask, self.config.input_dim)?;
        self.rcrn_flat(g, params, p, flat, mask, strategy)
    }

    fn rcrn_flat<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        p: &RcrnParams,
        flat: Var,
        mask: &Mask,
        strategy: ScanStrategy,
    ) -> Result<RcrnTrace> {
        let (b, steps, d) = (mask.batch(), mask.steps(), self.config.hidden_dim);
        let zeros = g.constant(Tensor::zeros([b, d]));
        let stepper = Stepper { mask, zeros };

        // controller
        let mut directions = Vec::with_capacity(2);
        for (ctrl, reverse) in [(&p.controller_fwd, false), (&p.controller_bwd, true)] {
            let vars = ctrl.bind(g, params)?;
            let p1 = vars.branch1.project_input(g, flat)?;
            let p2 = vars.branch2.project_input(g, flat)?;
            directions.push(stepper.run_controller(g, &vars, p1, p2, reverse)?);
        }
        let h1 = join_directions(g, &directions[0].0, &directions[1].0)?;
        let h2 = join_directions(g, &directions[0].1, &directions[1].1)?;

        // listener base
        let fwd = p.listener.fwd.bind(g, params)?;
        let bwd = p.listener.bwd.bind(g, params)?;
        let listener = bi_from_flat(g, &fwd, &bwd, flat, mask)?;
        let (h3, c3) = (listener.h, listener.c);

        // gated scan over all batch×feature lanes
        let lanes = b * 2 * d;
        let gate = g.reshape(h1, [steps, lanes])?;
        let value = g.reshape(h3, [steps, lanes])?;
        let init = g.constant(Tensor::zeros([lanes]));
        let c4 = g.gated_scan(gate, value, init, strategy)?;
        let c4 = g.reshape(c4, [steps, b, 2 * d])?;

        // GRU listeners have no cell state; the literal reading falls back to h3
        let c3_or_h3 = c3.unwrap_or(h3);
        let h4 = combine_output(g, h2, c3_or_h3, c4, self.config.output_gate_mode)?;
        let keep = g.constant(mask.time_major(2 * d));
        let h4 = g.mul(h4, keep)?;
        Ok(RcrnTrace { h1, h2, h3, c3, c4, h4 })
    }
}

fn stacked_flat<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, layers: &[BiParams], flat: Var, mask: &Mask) -> Result<Var> {
    let mut input = flat;
    let mut out = None;
    for layer in layers {
        let fwd = layer.fwd.bind(g, params)?;
        let bwd = layer.bwd.bind(g, params)?;
        let states = bi_from_flat(g, &fwd, &bwd, input, mask)?;
        let width = 2 * fwd.hidden_dim;
        input = g.reshape(states.h, [mask.steps() * mask.batch(), width])?;
        out = Some(states.h);
    }
    out.ok_or_else(|| Error::Contract("stacked encoder without layers".into()))
}

/// RCRN encoding of a `B×T×input_dim` batch.
pub fn rcrn_encode<T: Real>(
    g: &mut Graph<T>,
    encoder: &Encoder,
    params: &ParamSet<T>,
    seq: Var,
    mask: &Mask,
    strategy: ScanStrategy,
) -> Result<EncodedSequence> {
    if encoder.config.kind != EncoderKind::Rcrn {
        return Err(Error::Contract(format!("rcrn_encode on a {} encoder", encoder.config.kind)));
    }
    encoder.encode(g, params, seq, mask, strategy)
}

/// Stacked bidirectional encoding; a one-layer stack is a plain BiLSTM.
pub fn stacked_bilstm_encode<T: Real>(g: &mut Graph<T>, encoder: &Encoder, params: &ParamSet<T>, seq: Var, mask: &Mask) -> Result<EncodedSequence> {
    if encoder.config.kind == EncoderKind::Rcrn {
        return Err(Error::Contract("stacked_bilstm_encode on an rcrn encoder".into()));
    }
    encoder.encode(g, params, seq, mask, ScanStrategy::Naive)
}
