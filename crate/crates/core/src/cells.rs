//! Single-timestep recurrent cells.
//!
//! Parameters are stored gate-fused: `W` is `input_dim × G·hidden_dim`,
//! `U` is `hidden_dim × G·hidden_dim` and `b` has length `G·hidden_dim`,
//! with rows multiplied from the left (`x·W`). Column blocks are ordered
//! `(i, f, o, c)` for LSTM and `(z, r, n)` for GRU; block `k` of `W` is the
//! transpose of the per-gate `hidden_dim × input_dim` matrix.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamSet, Real, Tensor, Var};

/// Base recurrent unit used to build every recurrent component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Atom {
    #[default]
    Lstm,
    Gru,
}

impl Atom {
    pub fn gate_count(self) -> usize {
        match self {
            Atom::Lstm => 4,
            Atom::Gru => 3,
        }
    }

    pub fn has_cell_state(self) -> bool {
        self == Atom::Lstm
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Atom::Lstm => "lstm",
            Atom::Gru => "gru",
        })
    }
}

impl FromStr for Atom {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Atom::Lstm),
            "gru" => Ok(Atom::Gru),
            other => Err(Error::Input(format!("unknown atom {other:?}"))),
        }
    }
}

/// LSTM forget-gate block index, and the value its bias starts at.
pub const FORGET_GATE: usize = 1;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Glorot-uniform weights per gate, zero biases, LSTM forget bias 1.
    GlorotUniform,
    Zeros,
}

/// `√(6 / (fan_in + fan_out))`
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellParams {
    pub atom: Atom,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl CellParams {
    pub fn scalar_count(atom: Atom, input_dim: usize, hidden_dim: usize) -> usize {
        atom.gate_count() * hidden_dim * (input_dim + hidden_dim + 1)
    }

    /// Registers `{prefix}.W`, `{prefix}.U` and `{prefix}.b` in `params`.
    pub fn init<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        atom: Atom,
        input_dim: usize,
        hidden_dim: usize,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Contract(format!(
                "cell dims must be positive, got input {input_dim} hidden {hidden_dim}"
            )));
        }
        let width = atom.gate_count() * hidden_dim;
        let mut uniform = |rows: usize, bound: f64| -> Tensor<T> {
            match scheme {
                InitScheme::Zeros => Tensor::zeros([rows, width]),
                InitScheme::GlorotUniform => {
                    Tensor::from_fn([rows, width], |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
                }
            }
        };
        let w = uniform(input_dim, glorot_bound(input_dim, hidden_dim));
        let u = uniform(hidden_dim, glorot_bound(hidden_dim, hidden_dim));
        let mut b = Tensor::zeros([width]);
        if atom == Atom::Lstm && scheme == InitScheme::GlorotUniform {
            let forget = &mut b.data_mut()[FORGET_GATE * hidden_dim..(FORGET_GATE + 1) * hidden_dim];
            forget.fill(T::from_f64_lossy(FORGET_BIAS_INIT));
        }
        Ok(CellParams {
            atom,
            input_dim,
            hidden_dim,
            w: params.add(format!("{prefix}.W"), w, true)?,
            u: params.add(format!("{prefix}.U"), u, true)?,
            b: params.add(format!("{prefix}.b"), b, true)?,
        })
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> Result<CellVars> {
        let w = g.param(params, self.w);
        let u = g.param(params, self.u);
        let b = g.param(params, self.b);
        let d = self.hidden_dim;
        let (u_gates, u_cand) = match self.atom {
            Atom::Lstm => (u, None),
            Atom::Gru => (g.slice(u, 1, 0, 2 * d)?, Some(g.slice(u, 1, 2 * d, d)?)),
        };
        Ok(CellVars {
            atom: self.atom,
            input_dim: self.input_dim,
            hidden_dim: d,
            w,
            b,
            u_gates,
            u_cand,
        })
    }
}

/// Seeded wrapper over [`CellParams::init`].
pub fn init_params<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    atom: Atom,
    input_dim: usize,
    hidden_dim: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<CellParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CellParams::init(params, prefix, atom, input_dim, hidden_dim, scheme, &mut rng)
}

/// A cell's parameters bound into one graph.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub atom: Atom,
    pub input_dim: usize,
    pub hidden_dim: usize,
    w: Var,
    b: Var,
    /// Full `U` for LSTM; the `(z, r)` blocks for GRU.
    u_gates: Var,
    /// GRU candidate block of `U`.
    u_cand: Option<Var>,
}

impl CellVars {
    /// `x·W + b` for a `N×input_dim` block of inputs. Computing this once per
    /// sequence leaves only the `h·U` product inside the time loop.
    pub fn project_input<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim("project_input", shape, &[shape[0], self.input_dim]));
        }
        let xw = g.matmul(x, self.w)?;
        g.add_row(xw, self.b)
    }

    fn check_state<T: Real>(&self, g: &Graph<T>, h: Var) -> Result<()> {
        let shape = g.shape(h);
        if shape.len() != 2 || shape[1] != self.hidden_dim {
            return Err(Error::dim("recurrent state", shape, &[shape[0], self.hidden_dim]));
        }
        Ok(())
    }

    /// One step from a projected input. Returns `(h, c)`; GRU has no `c`.
    pub fn step_projected<T: Real>(
        &self,
        g: &mut Graph<T>,
        projected: Var,
        h_prev: Var,
        c_prev: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        self.check_state(g, h_prev)?;
        let d = self.hidden_dim;
        match self.atom {
            Atom::Lstm => {
                let c_prev = c_prev.ok_or_else(|| Error::Contract("LSTM step needs a cell state".into()))?;
                self.check_state(g, c_prev)?;
                let hu = g.matmul(h_prev, self.u_gates)?;
                let pre = g.add(projected, hu)?;
                let i = g.slice(pre, 1, 0, d)?;
                let i = g.sigmoid(i)?;
                let f = g.slice(pre, 1, d, d)?;
                let f = g.sigmoid(f)?;
                let o = g.slice(pre, 1, 2 * d, d)?;
                let o = g.sigmoid(o)?;
                let cand = g.slice(pre, 1, 3 * d, d)?;
                let cand = g.tanh(cand)?;
                let keep = g.mul(f, c_prev)?;
                let write = g.mul(i, cand)?;
                let c = g.add(keep, write)?;
                let tc = g.tanh(c)?;
                let h = g.mul(o, tc)?;
                Ok((h, Some(c)))
            }
            Atom::Gru => {
                let hu = g.matmul(h_prev, self.u_gates)?;
                let xzr = g.slice(projected, 1, 0, 2 * d)?;
                let zr = g.add(xzr, hu)?;
                let zr = g.sigmoid(zr)?;
                let z = g.slice(zr, 1, 0, d)?;
                let r = g.slice(zr, 1, d, d)?;
                let reset = g.mul(r, h_prev)?;
                let u_cand = self.u_cand.expect("GRU binds a candidate block");
                let hn = g.matmul(reset, u_cand)?;
                let xn = g.slice(projected, 1, 2 * d, d)?;
                let n = g.add(xn, hn)?;
                let n = g.tanh(n)?;
                let carry = g.mul(z, h_prev)?;
                let one_minus_z = g.one_minus(z)?;
                let write = g.mul(one_minus_z, n)?;
                let h = g.add(carry, write)?;
                Ok((h, None))
            }
        }
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, x: Var, h_prev: Var, c_prev: Option<Var>) -> Result<(Var, Option<Var>)> {
        let projected = self.project_input(g, x)?;
        self.step_projected(g, projected, h_prev, c_prev)
    }
}

fn expect_atom(cell: &CellVars, atom: Atom) -> Result<()> {
    if cell.atom != atom {
        return Err(Error::Contract(format!("expected a {atom} cell, got {}", cell.atom)));
    }
    Ok(())
}

/// `i,f,o = σ(xW + hU + b)`, `c = f⊙c_prev + i⊙tanh(·)`, `h = o⊙tanh(c)`.
pub fn lstm_step<T: Real>(g: &mut Graph<T>, cell: &CellVars, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    expect_atom(cell, Atom::Lstm)?;
    let (h, c) = cell.step(g, x, h_prev, Some(c_prev))?;
    Ok((h, c.expect("LSTM yields a cell state")))
}

/// Update/reset GRU: `h = z⊙h_prev + (1−z)⊙tanh(xW_n + (r⊙h_prev)U_n + b_n)`.
pub fn gru_step<T: Real>(g: &mut Graph<T>, cell: &CellVars, x: Var, h_prev: Var) -> Result<Var> {
    expect_atom(cell, Atom::Gru)?;
    Ok(cell.step(g, x, h_prev, None)?.0)
}

/// Two independent branches read the same input; branch 1's hidden output
/// later gates the listener's forget path, branch 2's its output path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControllerParams {
    pub branch1: CellParams,
    pub branch2: CellParams,
}

impl ControllerParams {
    pub fn init<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        atom: Atom,
        input_dim: usize,
        hidden_dim: usize,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ControllerParams {
            branch1: CellParams::init(params, &format!("{prefix}.branch1"), atom, input_dim, hidden_dim, scheme, rng)?,
            branch2: CellParams::init(params, &format!("{prefix}.branch2"), atom, input_dim, hidden_dim, scheme, rng)?,
        })
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> Result<ControllerVars> {
        Ok(ControllerVars {
            branch1: self.branch1.bind(g, params)?,
            branch2: self.branch2.bind(g, params)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ControllerVars {
    pub branch1: CellVars,
    pub branch2: CellVars,
}

/// Hidden outputs and (LSTM only) cell states of both controller branches.
#[derive(Clone, Copy, Debug)]
pub struct ControllerState {
    pub h1: Var,
    pub h2: Var,
    pub c1: Option<Var>,
    pub c2: Option<Var>,
}

impl ControllerState {
    pub fn zeros<T: Real>(g: &mut Graph<T>, atom: Atom, batch: usize, hidden_dim: usize) -> Self {
        let mut z = || g.constant(Tensor::zeros([batch, hidden_dim]));
        let (h1, h2) = (z(), z());
        let (c1, c2) = if atom.has_cell_state() { (Some(z()), Some(z())) } else { (None, None) };
        ControllerState { h1, h2, c1, c2 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ListenerState {
    pub h3: Var,
    pub c3: Option<Var>,
}

pub fn controller_step_projected<T: Real>(
    g: &mut Graph<T>,
    ctrl: &ControllerVars,
    projected1: Var,
    projected2: Var,
    prev: &ControllerState,
) -> Result<ControllerState> {
    let (h1, c1) = ctrl.branch1.step_projected(g, projected1, prev.h1, prev.c1)?;
    let (h2, c2) = ctrl.branch2.step_projected(g, projected2, prev.h2, prev.c2)?;
    Ok(ControllerState { h1, h2, c1, c2 })
}

pub fn controller_step<T: Real>(g: &mut Graph<T>, ctrl: &ControllerVars, x: Var, prev: &ControllerState) -> Result<ControllerState> {
    let p1 = ctrl.branch1.project_input(g, x)?;
    let p2 = ctrl.branch2.project_input(g, x)?;
    controller_step_projected(g, ctrl, p1, p2, prev)
}

pub fn listener_step<T: Real>(g: &mut Graph<T>, cell: &CellVars, x: Var, prev: &ListenerState) -> Result<ListenerState> {
    let (h3, c3) = cell.step(g, x, prev.h3, prev.c3)?;
    Ok(ListenerState { h3, c3 })
}
