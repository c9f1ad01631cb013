//! Straight-line reference encoders: one example at a time, one coordinate
//! at a time, over plain vectors. Shares nothing with the library beyond
//! reading parameter values by name.

#![allow(dead_code)]

use rcrn::cells::Atom;
use rcrn::scan::OutputGateMode;
use rcrn::ParamSet;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One cell's weights in the fused layout: `w[k][g·d + j]`, `u[k][g·d + j]`,
/// `b[g·d + j]`.
#[derive(Clone, Debug)]
pub struct RefCell {
    pub atom: Atom,
    pub input: usize,
    pub d: usize,
    pub w: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

fn rows(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(|r| r.to_vec()).collect()
}

impl RefCell {
    pub fn load(params: &ParamSet<f64>, prefix: &str, atom: Atom) -> Self {
        let get = |s: &str| params.by_name(&format!("{prefix}.{s}")).unwrap_or_else(|| panic!("{prefix}.{s}"));
        let (w, u, b) = (get("W"), get("U"), get("b"));
        let width = b.len();
        let d = u.shape()[0];
        RefCell {
            atom,
            input: w.shape()[0],
            d,
            w: rows(w.data(), width),
            u: rows(u.data(), width),
            b: b.data().to_vec(),
        }
    }

    fn x_part(&self, x: &[f64], col: usize) -> f64 {
        let mut s = self.b[col];
        for k in 0..self.input {
            s += x[k] * self.w[k][col];
        }
        s
    }

    fn h_part(&self, h: &[f64], col: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..self.d {
            s += h[k] * self.u[k][col];
        }
        s
    }

    /// Gates i, f, o, candidate c.
    pub fn lstm(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut h_new = vec![0.0; d];
        let mut c_new = vec![0.0; d];
        for j in 0..d {
            let pre = |gate: usize| self.x_part(x, gate * d + j) + self.h_part(h, gate * d + j);
            let i = sigmoid(pre(0));
            let f = sigmoid(pre(1));
            let o = sigmoid(pre(2));
            let cand = pre(3).tanh();
            c_new[j] = f * c[j] + i * cand;
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }

    /// Update z, reset r, candidate n with the reset applied before `U_n`.
    pub fn gru(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let d = self.d;
        let r: Vec<f64> = (0..d).map(|j| sigmoid(self.x_part(x, d + j) + self.h_part(h, d + j))).collect();
        let rh: Vec<f64> = (0..d).map(|k| r[k] * h[k]).collect();
        (0..d)
            .map(|j| {
                let z = sigmoid(self.x_part(x, j) + self.h_part(h, j));
                let n = (self.x_part(x, 2 * d + j) + self.h_part(&rh, 2 * d + j)).tanh();
                z * h[j] + (1.0 - z) * n
            })
            .collect()
    }

    /// Hidden and cell states over `xs` (cell states are `None` for GRU),
    /// left to right or right to left, indexed by time.
    pub fn run(&self, xs: &[Vec<f64>], reverse: bool) -> (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) {
        let n = xs.len();
        let mut h = vec![0.0; self.d];
        let mut c = vec![0.0; self.d];
        let mut hs = vec![Vec::new(); n];
        let mut cs = vec![Vec::new(); n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            match self.atom {
                Atom::Lstm => {
                    let (h2, c2) = self.lstm(&xs[t], &h, &c);
                    h = h2;
                    c = c2;
                    cs[t] = c.clone();
                }
                Atom::Gru => h = self.gru(&xs[t], &h),
            }
            hs[t] = h.clone();
        }
        (hs, (self.atom == Atom::Lstm).then_some(cs))
    }
}

fn join(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

pub fn bidirectional(fwd: &RefCell, bwd: &RefCell, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Option<Vec<Vec<f64>>>) {
    let (hf, cf) = fwd.run(xs, false);
    let (hb, cb) = bwd.run(xs, true);
    let c = match (cf, cb) {
        (Some(a), Some(b)) => Some(join(&a, &b)),
        _ => None,
    };
    (join(&hf, &hb), c)
}

/// RCRN over one unpadded example: the per-timestep `h⁴` vectors.
pub fn rcrn(params: &ParamSet<f64>, prefix: &str, atom: Atom, mode: OutputGateMode, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cell = |s: &str| RefCell::load(params, &format!("{prefix}.{s}"), atom);
    // controller branches are independent recurrences over the same inputs
    let (h1, _) = bidirectional(&cell("controller.fwd.branch1"), &cell("controller.bwd.branch1"), xs);
    let (h2, _) = bidirectional(&cell("controller.fwd.branch2"), &cell("controller.bwd.branch2"), xs);
    let (h3, c3) = bidirectional(&cell("listener.fwd"), &cell("listener.bwd"), xs);
    let width = h1[0].len();
    let mut c4 = vec![0.0; width];
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        for j in 0..width {
            let s = sigmoid(h1[t][j]);
            c4[j] = s * c4[j] + (1.0 - s) * h3[t][j];
        }
        let h4 = (0..width)
            .map(|j| match mode {
                OutputGateMode::Literal => h2[t][j] * c3.as_ref().map_or(h3[t][j], |c| c[t][j]),
                OutputGateMode::GatedC4 => sigmoid(h2[t][j]) * c4[j],
            })
            .collect();
        out.push(h4);
    }
    out
}

/// Stacked bidirectional encoder over one unpadded example.
pub fn stacked(params: &ParamSet<f64>, prefix: &str, atom: Atom, layers: usize, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut input = xs.to_vec();
    for l in 0..layers {
        let fwd = RefCell::load(params, &format!("{prefix}.layer{l}.fwd"), atom);
        let bwd = RefCell::load(params, &format!("{prefix}.layer{l}.bwd"), atom);
        input = bidirectional(&fwd, &bwd, &input).0;
    }
    input
}

/// `[max | mean | min]` over the first `len` rows.
pub fn pool(states: &[Vec<f64>], len: usize) -> Vec<f64> {
    let w = states[0].len();
    let mut max = vec![f64::NEG_INFINITY; w];
    let mut mean = vec![0.0; w];
    let mut min = vec![f64::INFINITY; w];
    for s in &states[..len] {
        for j in 0..w {
            max[j] = max[j].max(s[j]);
            min[j] = min[j].min(s[j]);
            mean[j] += s[j];
        }
    }
    for m in &mut mean {
        *m /= len as f64;
    }
    max.into_iter().chain(mean).chain(min).collect()
}
