//! Runs every acceptance criterion in sequence and prints one PASS/FAIL
//! line per criterion. Exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::Instant;

use common::reference;
use common::{config, encode, example_rows, random_encoder, random_tensor, rng};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::Rng;
use rcrn::cells::Atom;
use rcrn::checkpoint::Checkpoint;
use rcrn::data::{gen_first_token_task, gen_random_label_task, Dataset};
use rcrn::encoder::{count_params, EncoderConfig, EncoderKind};
use rcrn::gradcheck::{full_suite, GradcheckOptions};
use rcrn::model::{Classifier, ModelConfig};
use rcrn::numerics::FD_TOLERANCE;
use rcrn::scan::{scan_naive, scan_optimized, OutputGateMode, ScanInput, ScanStrategy};
use rcrn::train::{train_loop, TrainConfig};
use rcrn::{Graph, Tensor};
use rcrn_cli::bench::{run_bench, BenchSettings};
use rcrn_cli::config::DEFAULT_SEQ_LENS;
use rcrn_cli::RunConfig;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let summary = full_suite(&GradcheckOptions::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = summary.worst().ok_or("no groups checked")?;
    let failed: Vec<String> = summary
        .reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{} {:.2e}", r.component, r.group, r.max_rel_error))
        .collect();
    let msg = format!(
        "{} groups, worst {:.2e} ({}/{}), {secs:.1}s",
        summary.reports.len(),
        worst.max_rel_error,
        worst.component,
        worst.group
    );
    check(failed.is_empty() && secs < 120.0, msg.clone(), format!("{msg}; failing: {}", failed.join(", ")))
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    let mut n = 0;
    for atom in [Atom::Lstm, Atom::Gru] {
        for mode in [OutputGateMode::Literal, OutputGateMode::GatedC4] {
            for _ in 0..5 {
                let (input, d) = (r.gen_range(1..6), r.gen_range(1..5));
                let (batch, steps) = (r.gen_range(1..4), r.gen_range(1..7));
                let mut c = config(EncoderKind::Rcrn, input, d);
                c.atom = atom;
                c.output_gate_mode = mode;
                let (enc, params) = random_encoder(c, 5000 + n);
                let seq = random_tensor(&mut r, &[batch, steps, input], 1.5);
                let lengths: Vec<usize> = (0..batch).map(|b| if b == 0 { steps } else { r.gen_range(1..=steps) }).collect();
                let states = encode(&enc, &params, &seq, &lengths, ScanStrategy::Optimized { workers: 2 });
                let w = 2 * d;
                for (b, &len) in lengths.iter().enumerate() {
                    let expected = reference::rcrn(&params, "enc", atom, mode, &example_rows(&seq, b, len));
                    for t in 0..steps {
                        for j in 0..w {
                            let got = states.data()[(b * steps + t) * w + j];
                            let want = expected.get(t).map_or(0.0, |v| v[j]);
                            worst = worst.max((got - want).abs());
                        }
                    }
                }
                n += 1;
            }
        }
    }
    let msg = format!("{n} instances, max |diff| {worst:.2e}");
    check(n == 20 && worst <= 1e-10, msg.clone(), msg)
}

fn scan_equivalence() -> Outcome {
    let mut r = rng(3);
    let mut cells = 0;
    let mut mismatches = Vec::new();
    for t in [1, 2, 16, 256] {
        for d in [1, 3, 200] {
            let gate = random_tensor(&mut r, &[t, d], 4.0);
            let value = random_tensor(&mut r, &[t, d], 2.0);
            let c0 = random_tensor(&mut r, &[d], 2.0);
            let f64_in = ScanInput::new(gate.clone(), value.clone(), c0.clone()).map_err(|e| e.to_string())?;
            let f32_in = ScanInput::new(gate.cast::<f32>(), value.cast::<f32>(), c0.cast::<f32>()).map_err(|e| e.to_string())?;
            let naive64 = scan_naive(&f64_in).map_err(|e| e.to_string())?;
            let naive32 = scan_naive(&f32_in).map_err(|e| e.to_string())?;
            for workers in [1, 4, 8] {
                if scan_optimized(&f64_in, workers).map_err(|e| e.to_string())? != naive64 {
                    mismatches.push(format!("f64 T={t} d={d} w={workers}"));
                }
                if scan_optimized(&f32_in, workers).map_err(|e| e.to_string())? != naive32 {
                    mismatches.push(format!("f32 T={t} d={d} w={workers}"));
                }
                cells += 2;
            }
        }
    }
    check(
        mismatches.is_empty(),
        format!("{cells} cases bit-identical"),
        format!("mismatch: {}", mismatches.join(", ")),
    )
}

fn parameter_parity() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [5, 50, 200] {
        let a = count_params(&config(EncoderKind::Rcrn, 2 * d, d));
        let b = count_params(&config(EncoderKind::StackedBilstm { layers: 3 }, 2 * d, d));
        ok &= a == b;
        parts.push(format!("d={d}: {a} vs {b}"));
    }
    check(ok, parts.join(", "), parts.join(", "))
}

/// Trains until test accuracy reaches 1.0 or the epoch budget runs out;
/// returns the best test accuracy and the epochs used.
fn learn(kind: EncoderKind, train: &Dataset, test: &Dataset, epochs: usize, hidden: usize, embed: usize) -> Result<(f64, usize), String> {
    let mut encoder = EncoderConfig::new(kind, embed, hidden);
    encoder.seed = 1;
    let config = ModelConfig {
        encoder,
        vocab_size: 8,
        head_hidden: 64,
        class_count: train.class_count,
        embed_trainable: true,
    };
    let (model, mut params) = Classifier::init::<f64>(config, None).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs,
        batch_size: 32,
        seed: 1,
        ..Default::default()
    };
    let mut best = 0.0f64;
    let log = train_loop(&model, &mut params, &tc, train, test, |m, _| {
        best = best.max(m.dev_acc);
        Ok(if m.dev_acc >= 1.0 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    })
    .map_err(|e| e.to_string())?;
    Ok((best, log.len()))
}

fn learning_check() -> Outcome {
    let start = Instant::now();
    let (train, test) = gen_first_token_task(2000, 500, 32, 8, 0).map_err(|e| e.to_string())?;
    let (rcrn_acc, rcrn_epochs) = learn(EncoderKind::Rcrn, &train, &test, 50, 32, 16)?;
    let (bilstm_acc, bilstm_epochs) = learn(EncoderKind::Bilstm, &train, &test, 50, 32, 16)?;
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "rcrn {rcrn_acc:.4} after {rcrn_epochs} epochs, bilstm {bilstm_acc:.4} after {bilstm_epochs} epochs, {secs:.0}s"
    );
    check(rcrn_acc >= 0.95 && rcrn_acc >= bilstm_acc - 0.02 && secs < 900.0, msg.clone(), msg)
}

fn capacity_check() -> Outcome {
    let ds = gen_random_label_task(64, 12, 20, 11).map_err(|e| e.to_string())?;
    let mut encoder = EncoderConfig::new(EncoderKind::Rcrn, 16, 16);
    encoder.seed = 4;
    let config = ModelConfig {
        encoder,
        vocab_size: 20,
        head_hidden: 64,
        class_count: 2,
        embed_trainable: true,
    };
    let (model, mut params) = Classifier::init::<f64>(config, None).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 500,
        ..Default::default()
    };
    let log = train_loop(&model, &mut params, &tc, &ds, &ds, |m, _| {
        Ok(if m.dev_acc >= 1.0 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    })
    .map_err(|e| e.to_string())?;
    let last = log.last().ok_or("no epochs ran")?;
    let msg = format!("train accuracy {:.4} at epoch {}", last.dev_acc, last.epoch);
    check(last.dev_acc >= 1.0, msg.clone(), msg)
}

fn fail(e: rcrn::Error) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn masking_invariance(seed: u64, gru: bool, extra: usize) -> Result<(), TestCaseError> {
    let mut c = config(EncoderKind::Rcrn, 3, 2);
    c.atom = if gru { Atom::Gru } else { Atom::Lstm };
    let (enc, params) = random_encoder(c, seed);
    let mut r = rng(seed);
    let (batch, steps) = (r.gen_range(1..4), r.gen_range(1..6));
    let seq = random_tensor(&mut r, &[batch, steps, 3], 1.0);
    let lengths: Vec<usize> = (0..batch).map(|_| r.gen_range(1..=steps)).collect();
    let long_steps = steps + extra;
    let padded = Tensor::from_fn([batch, long_steps, 3], |k| {
        let (b, t, j) = (k / (long_steps * 3), (k / 3) % long_steps, k % 3);
        if t < steps {
            seq.data()[(b * steps + t) * 3 + j]
        } else {
            r.gen_range(-9.0..9.0)
        }
    });
    let short = encode(&enc, &params, &seq, &lengths, ScanStrategy::default());
    let long = encode(&enc, &params, &padded, &lengths, ScanStrategy::default());
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..long_steps {
            for j in 0..4 {
                let v = long.data()[(b * long_steps + t) * 4 + j];
                if t < len {
                    prop_assert_eq!(v.to_bits(), short.data()[(b * steps + t) * 4 + j].to_bits());
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }
    Ok(())
}

fn convex_bound(seed: u64, t: usize, lanes: usize) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let input = ScanInput::new(
        random_tensor(&mut r, &[t, lanes], 30.0),
        random_tensor(&mut r, &[t, lanes], 5.0),
        random_tensor(&mut r, &[lanes], 5.0),
    )
    .map_err(fail)?;
    let out = scan_naive(&input).map_err(fail)?;
    for j in 0..lanes {
        let (mut lo, mut hi) = (input.c0[j], input.c0[j]);
        for s in 0..t {
            lo = lo.min(input.value_seq.data()[s * lanes + j]);
            hi = hi.max(input.value_seq.data()[s * lanes + j]);
        }
        for s in 0..t {
            let c = out.c4_seq.data()[s * lanes + j];
            prop_assert!(lo <= c && c <= hi);
        }
    }
    Ok(())
}

fn pooling_order(seed: u64, batch: usize, steps: usize, width: usize) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let lengths: Vec<usize> = (0..batch).map(|_| r.gen_range(1..=steps)).collect();
    let states = random_tensor(&mut r, &[batch, steps, width], 5.0);
    let mut g = Graph::new();
    let a = g.constant(states.clone());
    let p = g.masked_pool(a, &lengths).map_err(fail)?;
    let pooled = g.value(p);
    for (b, &len) in lengths.iter().enumerate() {
        let row = pooled.row(b);
        for j in 0..width {
            let column: Vec<f64> = (0..len).map(|t| states.data()[(b * steps + t) * width + j]).collect();
            let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = column.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(row[j], max);
            prop_assert_eq!(row[2 * width + j], min);
            prop_assert!(max >= row[width + j] && row[width + j] >= min);
        }
    }
    Ok(())
}

fn softmax_normalization(seed: u64, rows: usize, classes: usize, scale: f64) -> Result<(), TestCaseError> {
    let logits = random_tensor(&mut rng(seed), &[rows, classes], scale);
    let mut g = Graph::new();
    let l = g.constant(logits);
    let p = g.softmax(l).map_err(fail)?;
    for e in 0..rows {
        let row = g.value(p).row(e);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(row.iter().all(|&v| v >= 0.0));
    }
    Ok(())
}

fn tiny_model(seed: u64, kind: EncoderKind) -> ModelConfig {
    let mut encoder = EncoderConfig::new(kind, 3, 2);
    encoder.seed = seed;
    ModelConfig {
        encoder,
        vocab_size: 6,
        head_hidden: 4,
        class_count: 2,
        embed_trainable: true,
    }
}

fn kind(i: usize) -> EncoderKind {
    [EncoderKind::Rcrn, EncoderKind::Bilstm, EncoderKind::StackedBilstm { layers: 3 }][i]
}

fn checkpoint_roundtrip(seed: u64, k: usize) -> Result<(), TestCaseError> {
    let (model, params) = Classifier::init::<f64>(tiny_model(seed, kind(k)), None).map_err(fail)?;
    let ckpt = Checkpoint::from_model(&model, &params, None, &["neg".into(), "pos".into()]);
    let bytes = ckpt.to_bytes().map_err(fail)?;
    let back = Checkpoint::from_bytes(&bytes).map_err(fail)?;
    prop_assert_eq!(&back, &ckpt);
    let (model2, params2) = back.to_model::<f32>().map_err(fail)?;
    prop_assert_eq!(&model2, &model);
    for (id, p) in params.iter() {
        prop_assert_eq!(params2.get(id), &p.value.cast::<f32>());
    }
    prop_assert_eq!(back.to_bytes().map_err(fail)?, bytes);
    Ok(())
}

fn training_determinism(seed: u64, k: usize, workers: usize) -> Result<(), TestCaseError> {
    let (train, dev) = gen_first_token_task(8, 4, 4, 6, seed).map_err(fail)?;
    let (model, init) = Classifier::init::<f64>(tiny_model(seed, kind(k)), None).map_err(fail)?;
    let run = |w: usize| {
        let mut p = init.clone();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            chunk_size: 2,
            seed,
            workers: w,
            ..Default::default()
        };
        let log = train_loop(&model, &mut p, &tc, &train, &dev, |_, _| Ok(ControlFlow::Continue(())));
        log.map(|l| (l, p))
    };
    let a = run(1).map_err(fail)?;
    let b = run(1).map_err(fail)?;
    let c = run(workers).map_err(fail)?;
    prop_assert_eq!(&a, &b);
    prop_assert_eq!(&a, &c);
    Ok(())
}

fn config_roundtrip(hidden: usize, lr: f64, seed: u64, lens: Vec<usize>) -> Result<(), TestCaseError> {
    let c = RunConfig {
        encoder_kind: EncoderKind::StackedBilstm { layers: hidden % 4 + 1 },
        atom: if seed.is_multiple_of(2) { Atom::Gru } else { Atom::Lstm },
        hidden_dim: hidden,
        lr,
        seed,
        seq_lens: lens,
        train_path: Some("data/train.tsv".into()),
        ..Default::default()
    };
    let back = RunConfig::parse(&c.serialize()).map_err(|e| TestCaseError::fail(e.message))?;
    prop_assert_eq!(back, c);
    Ok(())
}

fn property_suites() -> Outcome {
    const CASES: u32 = 128;
    fn suite<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
    where
        S::Value: std::fmt::Debug,
    {
        TestRunner::new(Config {
            failure_persistence: None,
            ..Config::with_cases(CASES)
        }).run(&strategy, test).map_err(|e| e.to_string())
    }
    let results = [
        ("masking invariance", suite((any::<u64>(), any::<bool>(), 1usize..4), |(s, g, e)| masking_invariance(s, g, e))),
        ("convex bound", suite((any::<u64>(), 1usize..30, 1usize..12), |(s, t, l)| convex_bound(s, t, l))),
        ("pooling order", suite((any::<u64>(), 1usize..4, 1usize..8, 1usize..6), |(s, b, t, w)| pooling_order(s, b, t, w))),
        (
            "softmax normalization",
            suite((any::<u64>(), 1usize..5, 2usize..9, 0.1f64..300.0), |(s, r, c, x)| softmax_normalization(s, r, c, x)),
        ),
        ("checkpoint roundtrip", suite((any::<u64>(), 0usize..3), |(s, k)| checkpoint_roundtrip(s, k))),
        ("training determinism", suite((any::<u64>(), 0usize..3, 2usize..5), |(s, k, w)| training_determinism(s, k, w))),
        (
            "config roundtrip",
            suite(
                (1usize..1000, 1e-8f64..1.0, any::<u64>(), proptest::collection::vec(1usize..512, 1..6)),
                |(h, lr, s, l)| config_roundtrip(h, lr, s, l),
            ),
        ),
    ];
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    check(
        failed.is_empty(),
        format!("{} suites x {CASES} cases", results.len()),
        failed.join("; "),
    )
}

fn bench_structure() -> Outcome {
    let settings = BenchSettings {
        hidden_dim: 200,
        batch: 32,
        seq_lens: DEFAULT_SEQ_LENS.to_vec(),
        warmup: 3,
        reps: 5,
        workers: 1,
        atom: Atom::Lstm,
        seed: 0,
    };
    let start = Instant::now();
    let report = run_bench(&settings, |_| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let missing = report.missing(&settings.seq_lens);
    let slow = report.non_increasing(&settings.seq_lens, 0.8);
    let positive = report.rows.iter().all(|r| r.seconds > 0.0);
    let msg = format!("{} rows, gated, {secs:.0}s", report.rows.len());
    check(
        report.rows.len() == 40 && missing.is_empty() && slow.is_empty() && positive,
        msg.clone(),
        format!("{msg}; missing {missing:?}; not increasing {slow:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("scan equivalence", scan_equivalence),
        ("parameter parity", parameter_parity),
        ("learning check", learning_check),
        ("capacity check", capacity_check),
        ("invariant suites", property_suites),
        ("benchmark structure", bench_structure),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    println!("tolerance for finite differences: {FD_TOLERANCE:e}");
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|a| name.contains(a.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
