use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use proptest::prelude::*;
use rcrn::cells::Atom;
use rcrn::encoder::EncoderKind;
use rcrn::scan::OutputGateMode;
use rcrn_cli::bench::{BenchReport, Phase, Variant, CSV_HEADER};
use rcrn_cli::commands::{cmd_eval, cmd_gen_first_token, cmd_train, METRICS_HEADER};
use rcrn_cli::error::{EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE};
use rcrn_cli::{run, RunConfig};
use tempfile::TempDir;

fn run_args(args: &[&str]) -> (Result<(), rcrn_cli::CliError>, String) {
    let mut out = Vec::new();
    let mut log = Vec::new();
    let mut full = vec!["rcrn"];
    full.extend_from_slice(args);
    let r = run(full, &mut out, &mut log);
    (r, String::from_utf8(out).unwrap())
}

fn small_config(dir: &Path, name: &str) -> RunConfig {
    RunConfig {
        hidden_dim: 4,
        embed_dim: 4,
        head_hidden: 8,
        epochs: 2,
        batch_size: 16,
        seed: 3,
        train_path: Some(dir.join("train.tsv")),
        dev_path: Some(dir.join("test.tsv")),
        checkpoint_path: Some(dir.join(format!("{name}.ckpt"))),
        ..Default::default()
    }
}

fn task_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_first_token(dir.path(), 64, 40, 8, 8, 1).unwrap();
    dir
}

#[test]
fn printed_final_accuracy_matches_metrics_and_eval() {
    let dir = task_dir();
    let config = small_config(dir.path(), "a");
    let mut out = Vec::new();
    let acc = cmd_train(&config, &mut out).unwrap();
    let printed = String::from_utf8(out).unwrap();
    let last_line = printed.lines().last().unwrap();
    assert_eq!(last_line, format!("final dev_acc {acc:.4}"));

    let csv = fs::read_to_string(config.metrics_path().unwrap()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    let last_acc = rows[1].rsplit(',').next().unwrap();
    assert_eq!(last_line, format!("final dev_acc {last_acc}"));

    let mut eval_out = Vec::new();
    let eval_acc = cmd_eval(config.checkpoint_path.as_ref().unwrap(), config.dev_path.as_ref().unwrap(), 1, &mut eval_out).unwrap();
    assert_eq!(eval_acc, acc);
    assert_eq!(String::from_utf8(eval_out).unwrap(), format!("accuracy {last_acc}\n"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = task_dir();
    let csvs: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let config = small_config(dir.path(), name);
            cmd_train(&config, &mut Vec::new()).unwrap();
            fs::read_to_string(config.metrics_path().unwrap()).unwrap()
        })
        .collect();
    assert_eq!(csvs[0], csvs[1]);
    let ckpts: Vec<Vec<u8>> = ["a", "b"].iter().map(|n| fs::read(dir.path().join(format!("{n}.ckpt"))).unwrap()).collect();
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn metrics_row_format() {
    assert_eq!(rcrn_cli::commands::metrics_row(3, 0.5, 0.25), "3,0.500000,0.2500");
}

#[test]
fn missing_train_path_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "hidden_dim=4\ndev_path=x.tsv\ncheckpoint_path=y\n").unwrap();
    let (r, _) = run_args(&["train", "--config", cfg.to_str().unwrap()]);
    let e = r.unwrap_err();
    assert_eq!(e.message, "missing key: train_path");
    assert_eq!(e.code, EXIT_USAGE);
}

#[test]
fn unknown_key_is_rejected() {
    let e = RunConfig::parse("hidden_dim=4\nlayers=3\n").unwrap_err();
    assert_eq!(e.message, "unknown key: layers");
    assert_eq!(e.code, EXIT_USAGE);
}

#[test]
fn eval_rejects_foreign_labels() {
    let dir = task_dir();
    let config = small_config(dir.path(), "a");
    cmd_train(&RunConfig { epochs: 0, ..config.clone() }, &mut Vec::new()).unwrap();
    let other = dir.path().join("other.tsv");
    fs::write(&other, "w2\tw2 w3\nw9\tw3\n").unwrap();
    let e = cmd_eval(config.checkpoint_path.as_ref().unwrap(), &other, 1, &mut Vec::new()).unwrap_err();
    assert_eq!(e.code, EXIT_DATA);
    assert!(e.message.contains("class count mismatch"), "{}", e.message);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_rcrn");
    let dir = task_dir();
    let config = small_config(dir.path(), "a");
    cmd_train(&RunConfig { epochs: 0, ..config.clone() }, &mut Vec::new()).unwrap();
    let ckpt = config.checkpoint_path.clone().unwrap();
    let bytes = fs::read(&ckpt).unwrap();
    let corrupt = dir.path().join("corrupt.ckpt");
    fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();

    let eval = |c: &PathBuf| {
        Command::new(bin)
            .args(["eval", "--checkpoint"])
            .arg(c)
            .arg("--data")
            .arg(config.dev_path.as_ref().unwrap())
            .output()
            .unwrap()
    };
    let ok = eval(&ckpt);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("accuracy 0."));

    let bad = eval(&corrupt);
    assert_eq!(bad.status.code(), Some(EXIT_DATA as i32));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("format error"));

    let none = Command::new(bin).output().unwrap();
    assert_eq!(none.status.code(), Some(EXIT_USAGE as i32));
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour=blue\n").unwrap();
    let bad_cfg = Command::new(bin).args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(bad_cfg.status.code(), Some(EXIT_USAGE as i32));
    assert!(String::from_utf8_lossy(&bad_cfg.stderr).contains("unknown key: colour"));
}

#[test]
fn gradcheck_reports_every_group_and_catches_a_fault() {
    let (r, out) = run_args(&["gradcheck"]);
    r.unwrap();
    assert!(out.lines().last().unwrap().starts_with("all "));
    assert!(out.contains(" ok"));
    assert!(!out.contains("FAIL"));

    let (r, out) = run_args(&["gradcheck", "--inject-fault", "scan.c0"]);
    let e = r.unwrap_err();
    assert_eq!(e.code, EXIT_NUMERICAL);
    assert!(e.message.contains("scan.c0"));
    let failing: Vec<&str> = out.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert!(!failing.is_empty());
    assert!(failing.iter().all(|l| l.contains("scan.c0")), "{failing:?}");
}

#[test]
fn bench_grid_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.cfg");
    let csv = dir.path().join("bench.csv");
    fs::write(
        &cfg,
        format!("hidden_dim=3\nbatch_size=2\nseq_lens=2,4,8\nwarmup=0\nreps=1\nworkers=2\nbench_path={}\n", csv.display()),
    )
    .unwrap();
    let (r, out) = run_args(&["bench", "--config", cfg.to_str().unwrap()]);
    r.unwrap();
    assert!(out.is_empty());
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let report = BenchReport::from_csv(&text).unwrap();
    assert_eq!(report.rows.len(), 4 * 3 * 2);
    assert!(report.missing(&[2, 4, 8]).is_empty());
    for v in Variant::ALL {
        for p in [Phase::Train, Phase::Inference] {
            let row = report.get(v, 8, p).unwrap();
            assert!(row.seconds > 0.0);
            assert_eq!(row.workers, 2);
        }
    }
}

#[test]
fn generated_task_files() {
    let dir = tempfile::tempdir().unwrap();
    let (r, _) = run_args(&["gen-first-token", "--out-dir", dir.path().to_str().unwrap(), "--n-train", "10", "--n-test", "4", "--steps", "5"]);
    r.unwrap();
    let train = fs::read_to_string(dir.path().join("train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 10);
    for line in train.lines() {
        let (label, text) = line.split_once('\t').unwrap();
        assert_eq!(text.split(' ').count(), 5);
        let first = text.split(' ').next().unwrap();
        assert_eq!(first, if label == "0" { "w2" } else { "w3" }, "{line}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("test.tsv")).unwrap().lines().count(), 4);
}

fn arb_path() -> impl Strategy<Value = Option<PathBuf>> {
    proptest::option::of("[a-z][a-z0-9_./]{0,12}".prop_map(PathBuf::from))
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    let kinds = prop_oneof![
        Just(EncoderKind::Rcrn),
        Just(EncoderKind::Bilstm),
        (1usize..6).prop_map(|layers| EncoderKind::StackedBilstm { layers }),
    ];
    let model = (
        kinds,
        prop_oneof![Just(Atom::Lstm), Just(Atom::Gru)],
        1usize..512,
        prop_oneof![Just(OutputGateMode::Literal), Just(OutputGateMode::GatedC4)],
        (1e-8f64..10.0),
        1usize..256,
        0usize..1000,
        any::<u64>(),
        1usize..512,
    );
    let paths = (arb_path(), arb_path(), arb_path(), arb_path(), arb_path(), arb_path());
    let rest = (1usize..512, 1usize..16, proptest::collection::vec(1usize..1024, 1..6), 0usize..10, 1usize..10);
    (model, paths, rest).prop_map(|(m, p, r)| RunConfig {
        encoder_kind: m.0,
        atom: m.1,
        hidden_dim: m.2,
        output_gate_mode: m.3,
        lr: m.4,
        batch_size: m.5,
        epochs: m.6,
        seed: m.7,
        embed_dim: m.8,
        embed_path: p.0,
        train_path: p.1,
        dev_path: p.2,
        checkpoint_path: p.3,
        metrics_path: p.4,
        bench_path: p.5,
        head_hidden: r.0,
        workers: r.1,
        seq_lens: r.2,
        warmup: r.3,
        reps: r.4,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn config_parse_serialize_parse_is_identity(c in arb_config()) {
        let text = c.serialize();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.serialize(), text);
    }

    #[test]
    fn serialized_keys_are_known_and_ordered(c in arb_config()) {
        let text = c.serialize();
        let positions: Vec<usize> = text
            .lines()
            .map(|l| {
                let key = l.split_once('=').unwrap().0;
                rcrn_cli::config::KEYS.iter().position(|k| *k == key).unwrap()
            })
            .collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
}
