//! Finite-difference verification of every component and of whole models.
//!
//! Each component is wrapped in a scalar loss `Σ output ⊙ R` with a fixed
//! random `R`, and its inputs and initial states are registered as
//! parameters so they are checked alongside the weights.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{controller_step, listener_step, Atom, CellParams, ControllerParams, ControllerState, InitScheme, ListenerState};
use crate::data::{Batch, Example};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::numerics::{compare_gradient, Graph, ParamSet, Tensor, Var, FD_EPSILON, FD_TOLERANCE};
use crate::scan::{combine_output, OutputGateMode, ScanStrategy};

/// Largest dims a check may use.
pub const MAX_HIDDEN: usize = 6;
pub const MAX_STEPS: usize = 5;
pub const MAX_BATCH: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub component: String,
    /// Parameter name.
    pub group: String,
    pub max_rel_error: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= FD_TOLERANCE
    }
}

/// Test hook: adds `skew` to the first analytic coordinate of every
/// parameter whose name contains `group`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fault {
    pub group: String,
    pub skew: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub atom: Atom,
    pub output_gate_mode: OutputGateMode,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            atom: Atom::Lstm,
            output_gate_mode: OutputGateMode::GatedC4,
            input_dim: 4,
            hidden_dim: 3,
            steps: MAX_STEPS,
            batch: MAX_BATCH,
            seed: 7,
            fault: None,
        }
    }
}

impl GradcheckOptions {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim > MAX_HIDDEN || self.steps < 3 || self.steps > MAX_STEPS || self.batch == 0 || self.batch > MAX_BATCH || self.input_dim == 0 || self.input_dim > 7 {
            return Err(Error::Contract(format!(
                "gradient checks need 1 <= d <= {MAX_HIDDEN}, 3 <= T <= {MAX_STEPS}, 1 <= B <= {MAX_BATCH}, 1 <= input <= 7"
            )));
        }
        Ok(())
    }

    /// True lengths of the check batch: the first example is full, the
    /// second two steps shorter.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch).map(|b| if b == 0 { self.steps } else { self.steps - 2 }).collect()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `Σ_k sum(outputs[k] ⊙ weights[k])`
fn weighted_sum(g: &mut Graph<f64>, outputs: &[Var], weights: &[Tensor<f64>]) -> Result<Var> {
    let mut total = None;
    for (&o, w) in outputs.iter().zip(weights) {
        let wv = g.constant(w.clone());
        let prod = g.mul(o, wv)?;
        let s = g.sum(prod)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    total.ok_or_else(|| Error::Contract("no outputs to check".into()))
}

/// Checks every trainable parameter of `params`, applying `fault` to the
/// analytic gradients first.
pub fn check_params<F>(component: &str, params: &ParamSet<f64>, fault: Option<&Fault>, build: F) -> Result<Vec<GroupReport>>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss, params)?;
    grads
        .iter()
        .map(|(id, analytic)| {
            let name = params.name(id);
            let mut analytic = analytic.clone();
            if let Some(f) = fault.filter(|f| name.contains(f.group.as_str())) {
                analytic.data_mut()[0] += f.skew;
            }
            Ok(GroupReport {
                component: component.to_string(),
                group: name.to_string(),
                max_rel_error: compare_gradient(&analytic, params, id, FD_EPSILON, &build)?,
            })
        })
        .collect()
}

fn cell_check(opts: &GradcheckOptions, atom: Atom, component: &str, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let (b, i, d) = (opts.batch, opts.input_dim, opts.hidden_dim);
    let mut params = ParamSet::new();
    let cell = CellParams::init(&mut params, component, atom, i, d, InitScheme::GlorotUniform, rng)?;
    let x = params.add(format!("{component}.x"), random(rng, &[b, i]), true)?;
    let h0 = params.add(format!("{component}.h_prev"), random(rng, &[b, d]), true)?;
    let c0 = if atom.has_cell_state() {
        Some(params.add(format!("{component}.c_prev"), random(rng, &[b, d]), true)?)
    } else {
        None
    };
    let weights = [random(rng, &[b, d]), random(rng, &[b, d])];
    check_params(component, &params, opts.fault.as_ref(), |g, p| {
        let vars = cell.bind(g, p)?;
        let (xv, hv) = (g.param(p, x), g.param(p, h0));
        let cv = c0.map(|c| g.param(p, c));
        let (h, c) = vars.step(g, xv, hv, cv)?;
        let outs: Vec<Var> = std::iter::once(h).chain(c).collect();
        weighted_sum(g, &outs, &weights)
    })
}

fn controller_check(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let (b, i, d, atom) = (opts.batch, opts.input_dim, opts.hidden_dim, opts.atom);
    let mut params = ParamSet::new();
    let ctrl = ControllerParams::init(&mut params, "controller", atom, i, d, InitScheme::GlorotUniform, rng)?;
    let x = params.add("controller.x", random(rng, &[b, i]), true)?;
    let mut state_ids = Vec::new();
    for name in ["h1", "h2", "c1", "c2"] {
        if name.starts_with('c') && !atom.has_cell_state() {
            continue;
        }
        state_ids.push(params.add(format!("controller.{name}_prev"), random(rng, &[b, d]), true)?);
    }
    let weights: Vec<_> = (0..4).map(|_| random(rng, &[b, d])).collect();
    check_params("controller_cell", &params, opts.fault.as_ref(), |g, p| {
        let vars = ctrl.bind(g, p)?;
        let xv = g.param(p, x);
        let s: Vec<Var> = state_ids.iter().map(|&id| g.param(p, id)).collect();
        let prev = ControllerState {
            h1: s[0],
            h2: s[1],
            c1: s.get(2).copied(),
            c2: s.get(3).copied(),
        };
        let next = controller_step(g, &vars, xv, &prev)?;
        let outs: Vec<Var> = [Some(next.h1), Some(next.h2), next.c1, next.c2].into_iter().flatten().collect();
        weighted_sum(g, &outs, &weights)
    })
}

fn listener_check(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let (b, i, d, atom) = (opts.batch, opts.input_dim, opts.hidden_dim, opts.atom);
    let mut params = ParamSet::new();
    let cell = CellParams::init(&mut params, "listener", atom, i, d, InitScheme::GlorotUniform, rng)?;
    let x = params.add("listener.x", random(rng, &[b, i]), true)?;
    let h0 = params.add("listener.h3_prev", random(rng, &[b, d]), true)?;
    let c0 = if atom.has_cell_state() {
        Some(params.add("listener.c3_prev", random(rng, &[b, d]), true)?)
    } else {
        None
    };
    let weights = [random(rng, &[b, d]), random(rng, &[b, d])];
    check_params("listener_cell", &params, opts.fault.as_ref(), |g, p| {
        let vars = cell.bind(g, p)?;
        let xv = g.param(p, x);
        let prev = ListenerState {
            h3: g.param(p, h0),
            c3: c0.map(|c| g.param(p, c)),
        };
        let next = listener_step(g, &vars, xv, &prev)?;
        let outs: Vec<Var> = std::iter::once(next.h3).chain(next.c3).collect();
        weighted_sum(g, &outs, &weights)
    })
}

fn scan_check(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let (t, lanes) = (opts.steps, opts.batch * opts.hidden_dim);
    let mut params = ParamSet::new();
    let gate = params.add("scan.gate_seq", random(rng, &[t, lanes]).scale(3.0), true)?;
    let value = params.add("scan.value_seq", random(rng, &[t, lanes]), true)?;
    let c0 = params.add("scan.c0", random(rng, &[lanes]), true)?;
    let weights = [random(rng, &[t, lanes])];
    check_params("scan", &params, opts.fault.as_ref(), |g, p| {
        let (gv, vv, cv) = (g.param(p, gate), g.param(p, value), g.param(p, c0));
        let c4 = g.gated_scan(gv, vv, cv, ScanStrategy::default())?;
        weighted_sum(g, &[c4], &weights)
    })
}

fn combine_check(opts: &GradcheckOptions, mode: OutputGateMode, rng: &mut ChaCha8Rng) -> Result<Vec<GroupReport>> {
    let shape = [opts.steps, opts.batch, 2 * opts.hidden_dim];
    let mut params = ParamSet::new();
    let h2 = params.add("combine.h2", random(rng, &shape).scale(3.0), true)?;
    let c3 = params.add("combine.c3", random(rng, &shape), true)?;
    let c4 = params.add("combine.c4", random(rng, &shape), true)?;
    let weights = [random(rng, &shape)];
    // the unused operand of each mode must still get a (zero) gradient
    check_params(&format!("combine_{mode}"), &params, opts.fault.as_ref(), |g, p| {
        let (a, b, c) = (g.param(p, h2), g.param(p, c3), g.param(p, c4));
        let h4 = combine_output(g, a, b, c, mode)?;
        weighted_sum(g, &[h4], &weights)
    })
}

/// Cell, controller, listener, scan and both combine modes.
pub fn component_suite(opts: &GradcheckOptions) -> Result<Vec<GroupReport>> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    out.extend(cell_check(opts, Atom::Lstm, "lstm_cell", &mut rng)?);
    out.extend(cell_check(opts, Atom::Gru, "gru_cell", &mut rng)?);
    out.extend(controller_check(opts, &mut rng)?);
    out.extend(listener_check(opts, &mut rng)?);
    out.extend(scan_check(opts, &mut rng)?);
    out.extend(combine_check(opts, OutputGateMode::Literal, &mut rng)?);
    out.extend(combine_check(opts, OutputGateMode::GatedC4, &mut rng)?);
    Ok(out)
}

/// Whole classifier (embedding, encoder of `kind`, head) under mean
/// cross-entropy on a batch with lengths [`GradcheckOptions::lengths`].
pub fn model_check(opts: &GradcheckOptions, kind: EncoderKind) -> Result<Vec<GroupReport>> {
    opts.validate()?;
    let mut encoder = EncoderConfig::new(kind, opts.input_dim, opts.hidden_dim);
    encoder.atom = opts.atom;
    encoder.output_gate_mode = opts.output_gate_mode;
    encoder.seed = opts.seed;
    let config = ModelConfig {
        encoder,
        vocab_size: 7,
        head_hidden: 5,
        class_count: 3,
        embed_trainable: true,
    };
    let (model, params) = Classifier::init::<f64>(config, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let examples: Vec<Example> = opts
        .lengths()
        .into_iter()
        .map(|len| Example {
            label: rng.gen_range(0..3),
            tokens: (0..len).map(|_| rng.gen_range(1..7)).collect(),
        })
        .collect();
    let batch = Batch::from_examples(&examples.iter().collect::<Vec<_>>())?;
    let component = format!("model:{kind}/{}/{}", opts.atom, opts.output_gate_mode);
    check_params(&component, &params, opts.fault.as_ref(), |g, p| model.loss(g, p, &batch, ScanStrategy::default()))
}

/// Component suite plus the RCRN model under both output modes.
pub struct SuiteSummary {
    pub reports: Vec<GroupReport>,
    pub seconds: f64,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GroupReport::passed)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn full_suite(opts: &GradcheckOptions) -> Result<SuiteSummary> {
    let start = Instant::now();
    let mut reports = component_suite(opts)?;
    for atom in [Atom::Lstm, Atom::Gru] {
        for mode in [OutputGateMode::Literal, OutputGateMode::GatedC4] {
            let o = GradcheckOptions {
                atom,
                output_gate_mode: mode,
                ..opts.clone()
            };
            reports.extend(model_check(&o, EncoderKind::Rcrn)?);
        }
    }
    Ok(SuiteSummary {
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}
