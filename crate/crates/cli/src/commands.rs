//! Subcommand bodies. Each writes its report to `out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;

use rcrn::checkpoint::{save_checkpoint, Checkpoint};
use rcrn::data::{gen_first_token_task, load_tsv, load_word_vectors, Vocab};
use rcrn::encoder::EncoderConfig;
use rcrn::gradcheck::{component_suite, model_check, Fault, GradcheckOptions, GroupReport};
use rcrn::model::{Classifier, ModelConfig};
use rcrn::scan::ScanStrategy;
use rcrn::train::{evaluate, train_loop, AdamConfig, TrainConfig};

use crate::bench::{run_bench, BenchSettings};
use crate::config::RunConfig;
use crate::error::CliError;

pub const METRICS_HEADER: &str = "epoch,train_loss,dev_acc";
pub const EVAL_BATCH: usize = 32;

fn strategy(config: &RunConfig) -> ScanStrategy {
    ScanStrategy::Optimized { workers: config.workers }
}

pub fn metrics_row(epoch: usize, train_loss: f64, dev_acc: f64) -> String {
    format!("{epoch},{train_loss:.6},{dev_acc:.4}")
}

/// Trains on `train_path`, checks against `dev_path`, and rewrites the
/// checkpoint after every epoch (and once before the first).
pub fn cmd_train(config: &RunConfig, out: &mut dyn Write) -> Result<f64, CliError> {
    let train_path = config.require("train_path")?;
    let dev_path = config.require("dev_path")?;
    let checkpoint_path = config.require("checkpoint_path")?.to_path_buf();
    let metrics_path = config.metrics_path()?;

    let corpus = load_tsv(train_path)?;
    if corpus.is_empty() {
        return Err(CliError::data(format!("{}: no examples", train_path.display())));
    }
    let labels = corpus.label_names();
    if labels.len() < 2 {
        return Err(CliError::data(format!("{}: need at least two labels", train_path.display())));
    }
    let vocab = corpus.vocab();
    let train = corpus.to_dataset(&vocab, &labels)?;
    let dev = load_tsv(dev_path)?.to_dataset(&vocab, &labels)?;

    let table = match &config.embed_path {
        Some(p) => {
            let t = load_word_vectors::<f64>(p, &vocab, config.seed)?;
            if t.dim() != config.embed_dim {
                return Err(CliError::config(format!(
                    "embed_dim={} but {} holds {}-dimensional vectors",
                    config.embed_dim,
                    p.display(),
                    t.dim()
                )));
            }
            Some(t)
        }
        None => None,
    };
    let mut encoder = EncoderConfig::new(config.encoder_kind, config.embed_dim, config.hidden_dim);
    encoder.atom = config.atom;
    encoder.output_gate_mode = config.output_gate_mode;
    encoder.seed = config.seed;
    let model_config = ModelConfig {
        encoder,
        vocab_size: vocab.len(),
        head_hidden: config.head_hidden,
        class_count: labels.len(),
        embed_trainable: true,
    };
    let (model, mut params) = Classifier::init::<f64>(model_config, table)?;
    let train_config = TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        adam: AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        seed: config.seed,
        workers: config.workers,
        strategy: strategy(config),
        ..Default::default()
    };

    save_checkpoint(&checkpoint_path, &model, &params, Some(&vocab), &labels)?;
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;
    let log = train_loop(&model, &mut params, &train_config, &train, &dev, |m, p| {
        save_checkpoint(&checkpoint_path, &model, p, Some(&vocab), &labels)?;
        writeln!(metrics, "{}", metrics_row(m.epoch, m.train_loss, m.dev_acc))?;
        metrics.flush()?;
        writeln!(out, "epoch {} train_loss {:.6} dev_acc {:.4}", m.epoch, m.train_loss, m.dev_acc)?;
        Ok(ControlFlow::Continue(()))
    })?;
    let final_acc = match log.last() {
        Some(m) => m.dev_acc,
        None => evaluate(&model, &rcrn::model::storage_rounded(&params), &dev, config.batch_size, strategy(config))?,
    };
    writeln!(out, "final dev_acc {final_acc:.4}")?;
    Ok(final_acc)
}

/// Accuracy of a saved model on a TSV file, with labels mapped through the
/// checkpoint's label list.
pub fn cmd_eval(checkpoint: &Path, data: &Path, workers: usize, out: &mut dyn Write) -> Result<f64, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, params) = ckpt.to_model::<f64>()?;
    let vocab = ckpt
        .vocab()?
        .ok_or_else(|| CliError::data("checkpoint has no vocabulary"))?;
    let labels = ckpt.labels();
    if labels.len() != model.config.class_count {
        return Err(CliError::data(format!(
            "checkpoint lists {} labels for {} classes",
            labels.len(),
            model.config.class_count
        )));
    }
    let corpus = load_tsv(data)?;
    if let Some(extra) = corpus.label_names().into_iter().find(|l| !labels.contains(l)) {
        return Err(CliError::data(format!(
            "class count mismatch: label {extra:?} is not one of the checkpoint's {} classes",
            labels.len()
        )));
    }
    let dataset = corpus.to_dataset(&vocab, &labels)?;
    let acc = evaluate(&model, &params, &dataset, EVAL_BATCH, ScanStrategy::Optimized { workers })?;
    writeln!(out, "accuracy {acc:.4}")?;
    Ok(acc)
}

/// Finite-difference check of every component and of the configured
/// model at small fixed dims.
pub fn cmd_gradcheck(config: &RunConfig, fault: Option<Fault>, out: &mut dyn Write) -> Result<Vec<GroupReport>, CliError> {
    let opts = GradcheckOptions {
        atom: config.atom,
        output_gate_mode: config.output_gate_mode,
        seed: config.seed,
        fault,
        ..Default::default()
    };
    writeln!(
        out,
        "gradcheck d={} T={} B={} input={} ({} / {} / {})",
        opts.hidden_dim, opts.steps, opts.batch, opts.input_dim, config.encoder_kind, opts.atom, opts.output_gate_mode
    )?;
    let mut reports = component_suite(&opts)?;
    reports.extend(model_check(&opts, config.encoder_kind)?);
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{:<28} {:<40} {:.3e} {verdict}", r.component, r.group, r.max_rel_error)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.group.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::numerical(format!("gradient check failed for: {}", failed.join(", "))));
    }
    writeln!(out, "all {} groups within tolerance", reports.len())?;
    Ok(reports)
}

/// Times the benchmark grid and writes it as CSV to `bench_path`, or to
/// `out` when unset.
pub fn cmd_bench(config: &RunConfig, out: &mut dyn Write, log: &mut dyn Write) -> Result<crate::bench::BenchReport, CliError> {
    let settings = BenchSettings {
        hidden_dim: config.hidden_dim,
        batch: config.batch_size,
        seq_lens: config.seq_lens.clone(),
        warmup: config.warmup,
        reps: config.reps,
        workers: config.workers,
        atom: config.atom,
        seed: config.seed,
    };
    let report = run_bench(&settings, |r| {
        let _ = writeln!(log, "{} T={} {} {:.4e}s", r.variant, r.seq_len, r.phase, r.seconds);
    })?;
    let csv = report.to_csv();
    match &config.bench_path {
        Some(p) => fs::write(p, csv)?,
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(report)
}

/// Writes `train.tsv` and `test.tsv` for the first-token task.
pub fn cmd_gen_first_token(dir: &Path, n_train: usize, n_test: usize, steps: usize, vocab_size: usize, seed: u64) -> Result<(), CliError> {
    let (train, test) = gen_first_token_task(n_train, n_test, steps, vocab_size, seed)?;
    let vocab = Vocab::synthetic(vocab_size);
    fs::create_dir_all(dir)?;
    train.to_corpus(&vocab).write_tsv(dir.join("train.tsv"))?;
    test.to_corpus(&vocab).write_tsv(dir.join("test.tsv"))?;
    Ok(())
}
