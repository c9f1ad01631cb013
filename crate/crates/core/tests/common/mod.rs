#![allow(dead_code)]

pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcrn::encoder::{Encoder, EncoderConfig, EncoderKind, Mask};
use rcrn::scan::ScanStrategy;
use rcrn::{Graph, ParamSet, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Registers an encoder under the prefix `enc` and perturbs every
/// parameter so biases are nonzero.
pub fn random_encoder(config: EncoderConfig, seed: u64) -> (Encoder, ParamSet<f64>) {
    let mut params = ParamSet::new();
    let mut r = rng(seed);
    let enc = Encoder::init(&mut params, "enc", config, &mut r).unwrap();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let noise = random_tensor(&mut r, params.get(id).shape(), 0.3);
        let v = params.get(id).add(&noise).unwrap();
        params.set(id, v).unwrap();
    }
    (enc, params)
}

pub fn config(kind: EncoderKind, input: usize, hidden: usize) -> EncoderConfig {
    EncoderConfig::new(kind, input, hidden)
}

/// Encodes a `B×T×in` tensor; returns the `B×T×2d` states.
pub fn encode(enc: &Encoder, params: &ParamSet<f64>, seq: &Tensor<f64>, lengths: &[usize], strategy: ScanStrategy) -> Tensor<f64> {
    let mask = Mask::from_lengths(lengths.to_vec(), seq.shape()[1]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(seq.clone());
    let out = enc.encode(&mut g, params, x, &mask, strategy).unwrap();
    g.value(out.states).clone()
}

/// Example `b`'s first `len` input rows of a `B×T×in` tensor.
pub fn example_rows(seq: &Tensor<f64>, b: usize, len: usize) -> Vec<Vec<f64>> {
    let (t, w) = (seq.shape()[1], seq.shape()[2]);
    (0..len).map(|s| seq.data()[(b * t + s) * w..(b * t + s + 1) * w].to_vec()).collect()
}
