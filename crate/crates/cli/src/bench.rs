//! Encoder timing grid: variants × sequence lengths × {train, inference}.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcrn::cells::Atom;
use rcrn::data::{Batch, Example};
use rcrn::encoder::{EncoderConfig, EncoderKind};
use rcrn::model::{Classifier, ModelConfig};
use rcrn::scan::ScanStrategy;
use rcrn::{Graph, ParamSet};

use crate::error::CliError;

pub const CSV_HEADER: &str = "variant,seq_len,phase,seconds,workers";
const BENCH_VOCAB: usize = 100;
/// Cells faster than this keep repeating past `reps` so a short burst of
/// machine noise cannot own the median.
pub const MIN_CELL_SECONDS: f64 = 1.0;
const MAX_REPS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Bilstm,
    ThreeLayerBilstm,
    RcrnNaiveScan,
    RcrnOptimizedScan,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Bilstm, Variant::ThreeLayerBilstm, Variant::RcrnNaiveScan, Variant::RcrnOptimizedScan];

    fn kind(self) -> EncoderKind {
        match self {
            Variant::Bilstm => EncoderKind::Bilstm,
            Variant::ThreeLayerBilstm => EncoderKind::StackedBilstm { layers: 3 },
            Variant::RcrnNaiveScan | Variant::RcrnOptimizedScan => EncoderKind::Rcrn,
        }
    }

    fn strategy(self, workers: usize) -> ScanStrategy {
        match self {
            Variant::RcrnOptimizedScan => ScanStrategy::Optimized { workers },
            _ => ScanStrategy::Naive,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bilstm => "bilstm",
            Variant::ThreeLayerBilstm => "3l-bilstm",
            Variant::RcrnNaiveScan => "rcrn-naive-scan",
            Variant::RcrnOptimizedScan => "rcrn-optimized-scan",
        })
    }
}

impl FromStr for Variant {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| CliError::data(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Inference,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Inference => "inference",
        })
    }
}

impl FromStr for Phase {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "train" => Ok(Phase::Train),
            "inference" => Ok(Phase::Inference),
            _ => Err(CliError::data(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub seq_len: usize,
    pub phase: Phase,
    /// Median seconds for one pass over one batch.
    pub seconds: f64,
    pub workers: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.6e},{}\n", r.variant, r.seq_len, r.phase, r.seconds, r.workers));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(CliError::data(format!("bench CSV must start with {CSV_HEADER}")));
        }
        let rows = lines
            .enumerate()
            .map(|(n, line)| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || CliError::data(format!("bench CSV line {}: {line:?}", n + 2));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(BenchRow {
                    variant: f[0].parse()?,
                    seq_len: f[1].parse().map_err(|_| bad())?,
                    phase: f[2].parse()?,
                    seconds: f[3].parse().map_err(|_| bad())?,
                    workers: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(BenchReport { rows })
    }

    pub fn get(&self, variant: Variant, seq_len: usize, phase: Phase) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seq_len == seq_len && r.phase == phase)
    }

    /// Grid cells that are absent or hold a non-positive time.
    pub fn missing(&self, seq_lens: &[usize]) -> Vec<String> {
        let mut out = Vec::new();
        for v in Variant::ALL {
            for &t in seq_lens {
                for p in [Phase::Train, Phase::Inference] {
                    match self.get(v, t, p) {
                        Some(r) if r.seconds > 0.0 && r.seconds.is_finite() => {}
                        _ => out.push(format!("{v},{t},{p}")),
                    }
                }
            }
        }
        out
    }

    /// Adjacent length pairs whose time drops below `slack` times the
    /// shorter length's time.
    pub fn non_increasing(&self, seq_lens: &[usize], slack: f64) -> Vec<String> {
        let mut out = Vec::new();
        for v in Variant::ALL {
            for p in [Phase::Train, Phase::Inference] {
                for pair in seq_lens.windows(2) {
                    if let (Some(a), Some(b)) = (self.get(v, pair[0], p), self.get(v, pair[1], p)) {
                        if b.seconds < slack * a.seconds {
                            out.push(format!("{v} {p}: T={} {:.3e}s, T={} {:.3e}s", pair[0], a.seconds, pair[1], b.seconds));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSettings {
    pub hidden_dim: usize,
    pub batch: usize,
    pub seq_lens: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub workers: usize,
    pub atom: Atom,
    pub seed: u64,
}

pub fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2.0
    }
}

fn random_batch(batch: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<Batch, CliError> {
    let examples: Vec<Example> = (0..batch)
        .map(|i| Example {
            label: i % 2,
            tokens: (0..steps).map(|_| rng.gen_range(2..BENCH_VOCAB)).collect(),
        })
        .collect();
    Ok(Batch::from_examples(&examples.iter().collect::<Vec<_>>())?)
}

fn pass(model: &Classifier, params: &ParamSet<f32>, batch: &Batch, phase: Phase, strategy: ScanStrategy) -> Result<(), CliError> {
    let mut g = Graph::new();
    match phase {
        Phase::Inference => {
            model.forward(&mut g, params, batch, strategy)?;
        }
        Phase::Train => {
            let loss = model.loss(&mut g, params, batch, strategy)?;
            g.backward(loss, params)?;
        }
    }
    Ok(())
}

/// Refuses to time a variant whose output disagrees with its reference:
/// the naive scan for RCRN, a repeated run for the baselines.
fn gate(model: &Classifier, params: &ParamSet<f32>, batch: &Batch, variant: Variant, workers: usize) -> Result<(), CliError> {
    let states = |strategy: ScanStrategy| -> Result<_, CliError> {
        let mut g = Graph::new();
        let f = model.forward(&mut g, params, batch, strategy)?;
        Ok(g.value(f.encoded).clone())
    };
    let candidate = states(variant.strategy(workers))?;
    let reference = states(ScanStrategy::Naive)?;
    if candidate != reference {
        return Err(CliError::numerical(format!("{variant}: output differs from its reference at T={}", batch.mask.steps())));
    }
    Ok(())
}

/// Runs the grid, calling `progress` after each cell.
pub fn run_bench(s: &BenchSettings, mut progress: impl FnMut(&BenchRow)) -> Result<BenchReport, CliError> {
    if s.reps == 0 || s.seq_lens.is_empty() {
        return Err(CliError::config("bench needs reps >= 1 and at least one length"));
    }
    let mut report = BenchReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    for variant in Variant::ALL {
        let mut encoder = EncoderConfig::new(variant.kind(), s.hidden_dim, s.hidden_dim);
        encoder.atom = s.atom;
        encoder.seed = s.seed;
        let config = ModelConfig {
            encoder,
            vocab_size: BENCH_VOCAB,
            head_hidden: s.hidden_dim,
            class_count: 2,
            embed_trainable: true,
        };
        let (model, params) = Classifier::init::<f32>(config, None)?;
        let strategy = variant.strategy(s.workers);
        for &steps in &s.seq_lens {
            let batch = random_batch(s.batch, steps, &mut rng)?;
            gate(&model, &params, &batch, variant, s.workers)?;
            for phase in [Phase::Train, Phase::Inference] {
                for _ in 0..s.warmup {
                    pass(&model, &params, &batch, phase, strategy)?;
                }
                let mut times = Vec::with_capacity(s.reps);
                let mut total = 0.0;
                while times.len() < s.reps || (total < MIN_CELL_SECONDS && times.len() < MAX_REPS) {
                    let start = Instant::now();
                    pass(&model, &params, &batch, phase, strategy)?;
                    let secs = start.elapsed().as_secs_f64();
                    total += secs;
                    times.push(secs);
                }
                let row = BenchRow {
                    variant,
                    seq_len: steps,
                    phase,
                    seconds: median(&mut times),
                    workers: s.workers,
                };
                progress(&row);
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn tiny_grid_is_complete_and_parses_back() {
        let s = BenchSettings {
            hidden_dim: 3,
            batch: 2,
            seq_lens: vec![2, 4],
            warmup: 1,
            reps: 1,
            workers: 2,
            atom: Atom::Lstm,
            seed: 0,
        };
        let report = run_bench(&s, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 16);
        assert!(report.missing(&s.seq_lens).is_empty());
        let back = BenchReport::from_csv(&report.to_csv()).unwrap();
        assert_eq!(back.rows.len(), 16);
        assert_eq!(back.to_csv(), report.to_csv());
    }
}
