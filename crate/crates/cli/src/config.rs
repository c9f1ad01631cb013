//! Flat `key=value` run configuration.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rcrn::cells::Atom;
use rcrn::encoder::EncoderKind;
use rcrn::scan::OutputGateMode;

use crate::error::CliError;

pub const DEFAULT_SEQ_LENS: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub encoder_kind: EncoderKind,
    pub atom: Atom,
    pub hidden_dim: usize,
    pub output_gate_mode: OutputGateMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub embed_path: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv` appended.
    pub metrics_path: Option<PathBuf>,
    pub head_hidden: usize,
    pub workers: usize,
    pub seq_lens: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub bench_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder_kind: EncoderKind::Rcrn,
            atom: Atom::Lstm,
            hidden_dim: 200,
            output_gate_mode: OutputGateMode::GatedC4,
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            embed_dim: 200,
            embed_path: None,
            train_path: None,
            dev_path: None,
            checkpoint_path: None,
            metrics_path: None,
            head_hidden: rcrn::head::DEFAULT_HIDDEN,
            workers: 1,
            seq_lens: DEFAULT_SEQ_LENS.to_vec(),
            warmup: 3,
            reps: 5,
            bench_path: None,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "encoder_kind",
    "atom",
    "hidden_dim",
    "output_gate_mode",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "embed_dim",
    "embed_path",
    "train_path",
    "dev_path",
    "checkpoint_path",
    "metrics_path",
    "head_hidden",
    "workers",
    "seq_lens",
    "warmup",
    "reps",
    "bench_path",
];

fn value<V: FromStr>(key: &str, raw: &str) -> Result<V, CliError> {
    raw.parse()
        .map_err(|_| CliError::config(format!("invalid value for {key}: {raw:?}")))
}

fn positive(key: &str, raw: &str) -> Result<usize, CliError> {
    match value::<usize>(key, raw)? {
        0 => Err(CliError::config(format!("{key} must be at least 1"))),
        n => Ok(n),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key=value", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if seen.contains(&key) {
                return Err(CliError::config(format!("duplicate key: {key}")));
            }
            c.set(key, raw)?;
            seen.push(key);
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        let path = || Some(PathBuf::from(raw));
        match key {
            "encoder_kind" => self.encoder_kind = value(key, raw)?,
            "atom" => self.atom = value(key, raw)?,
            "hidden_dim" => self.hidden_dim = positive(key, raw)?,
            "output_gate_mode" => self.output_gate_mode = value(key, raw)?,
            "lr" => {
                self.lr = value(key, raw)?;
                if !(self.lr > 0.0 && self.lr.is_finite()) {
                    return Err(CliError::config(format!("lr must be positive, got {raw}")));
                }
            }
            "batch_size" => self.batch_size = positive(key, raw)?,
            "epochs" => self.epochs = value(key, raw)?,
            "seed" => self.seed = value(key, raw)?,
            "embed_dim" => self.embed_dim = positive(key, raw)?,
            "embed_path" => self.embed_path = path(),
            "train_path" => self.train_path = path(),
            "dev_path" => self.dev_path = path(),
            "checkpoint_path" => self.checkpoint_path = path(),
            "metrics_path" => self.metrics_path = path(),
            "head_hidden" => self.head_hidden = positive(key, raw)?,
            "workers" => self.workers = positive(key, raw)?,
            "seq_lens" => {
                self.seq_lens = raw.split(',').map(|s| positive(key, s.trim())).collect::<Result<_, _>>()?;
            }
            "warmup" => self.warmup = value(key, raw)?,
            "reps" => self.reps = positive(key, raw)?,
            "bench_path" => self.bench_path = path(),
            _ => return Err(CliError::config(format!("unknown key: {key}"))),
        }
        Ok(())
    }

    /// Every key, one per line, in [`KEYS`] order. Unset paths are omitted.
    pub fn serialize(&self) -> String {
        fn line(out: &mut String, key: &str, v: impl Display) {
            out.push_str(&format!("{key}={v}\n"));
        }
        let mut out = String::new();
        line(&mut out, "encoder_kind", self.encoder_kind);
        line(&mut out, "atom", self.atom);
        line(&mut out, "hidden_dim", self.hidden_dim);
        line(&mut out, "output_gate_mode", self.output_gate_mode);
        line(&mut out, "lr", self.lr);
        line(&mut out, "batch_size", self.batch_size);
        line(&mut out, "epochs", self.epochs);
        line(&mut out, "seed", self.seed);
        line(&mut out, "embed_dim", self.embed_dim);
        let paths = [
            ("embed_path", &self.embed_path),
            ("train_path", &self.train_path),
            ("dev_path", &self.dev_path),
            ("checkpoint_path", &self.checkpoint_path),
            ("metrics_path", &self.metrics_path),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                line(&mut out, k, p.display());
            }
        }
        line(&mut out, "head_hidden", self.head_hidden);
        line(&mut out, "workers", self.workers);
        let lens: Vec<String> = self.seq_lens.iter().map(usize::to_string).collect();
        line(&mut out, "seq_lens", lens.join(","));
        line(&mut out, "warmup", self.warmup);
        line(&mut out, "reps", self.reps);
        if let Some(p) = &self.bench_path {
            line(&mut out, "bench_path", p.display());
        }
        out
    }

    pub fn require(&self, key: &str) -> Result<&Path, CliError> {
        let p = match key {
            "train_path" => &self.train_path,
            "dev_path" => &self.dev_path,
            "checkpoint_path" => &self.checkpoint_path,
            "embed_path" => &self.embed_path,
            "metrics_path" => &self.metrics_path,
            "bench_path" => &self.bench_path,
            _ => &None,
        };
        p.as_deref().ok_or_else(|| CliError::config(format!("missing key: {key}")))
    }

    pub fn metrics_path(&self) -> Result<PathBuf, CliError> {
        if let Some(p) = &self.metrics_path {
            return Ok(p.clone());
        }
        let mut p = self.require("checkpoint_path")?.as_os_str().to_owned();
        p.push(".metrics.csv");
        Ok(PathBuf::from(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_spacing() {
        let c = RunConfig::parse("# run\n\nhidden_dim = 16\n  atom=gru\nencoder_kind=stacked_bilstm\n").unwrap();
        assert_eq!(c.hidden_dim, 16);
        assert_eq!(c.atom, Atom::Gru);
        assert_eq!(c.encoder_kind, EncoderKind::StackedBilstm { layers: 3 });
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert_eq!(RunConfig::parse("hiden_dim=3").unwrap_err().to_string(), "unknown key: hiden_dim");
        assert!(RunConfig::parse("seed=1\nseed=2").unwrap_err().to_string().contains("duplicate"));
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("batch_size=0").is_err());
        assert!(RunConfig::parse("lr=-1").is_err());
    }

    #[test]
    fn missing_path_message() {
        let c = RunConfig::default();
        assert_eq!(c.require("train_path").unwrap_err().to_string(), "missing key: train_path");
    }

    #[test]
    fn metrics_path_defaults_next_to_checkpoint() {
        let c = RunConfig::parse("checkpoint_path=/tmp/m.ckpt").unwrap();
        assert_eq!(c.metrics_path().unwrap(), PathBuf::from("/tmp/m.ckpt.metrics.csv"));
    }

    #[test]
    fn serialize_covers_every_key() {
        let mut c = RunConfig::default();
        for k in ["embed_path", "train_path", "dev_path", "checkpoint_path", "metrics_path", "bench_path"] {
            c.set(k, "/x").unwrap();
        }
        let text = c.serialize();
        let keys: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
        assert_eq!(keys, KEYS);
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }
}
