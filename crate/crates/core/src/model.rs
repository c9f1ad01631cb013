//! Sentence classifier: embedding lookup, sequence encoder, pooled head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, EmbeddingTable, PAD};
use crate::encoder::{EncodedSequence, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{argmax_rows, masked_pool, HeadParams};
use crate::numerics::{Graph, ParamId, ParamSet, Real, Tensor, Var};
use crate::scan::ScanStrategy;

pub const EMBEDDING: &str = "embedding";
pub const ENCODER_PREFIX: &str = "encoder";
pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// `encoder.input_dim` is the embedding width.
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub head_hidden: usize,
    pub class_count: usize,
    pub embed_trainable: bool,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.encoder.input_dim
    }

    /// Width of the pooled feature vector.
    pub fn pooled_dim(&self) -> usize {
        3 * self.encoder.output_dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ModelConfig,
    pub embedding: ParamId,
    pub encoder: Encoder,
    pub head: HeadParams,
}

/// Forward results for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub encoded: Var,
    pub pooled: Var,
    pub logits: Var,
}

impl Classifier {
    /// Registers every parameter, drawing from `config.encoder.seed`. A
    /// supplied table replaces the random embedding and sets its trainable
    /// flag.
    pub fn init<T: Real>(mut config: ModelConfig, table: Option<EmbeddingTable<T>>) -> Result<(Self, ParamSet<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
        let table = match table {
            Some(t) => {
                if t.vocab_size() != config.vocab_size || t.dim() != config.embed_dim() {
                    return Err(Error::dim("embedding", t.table.shape(), &[config.vocab_size, config.embed_dim()]));
                }
                config.embed_trainable = t.trainable;
                t
            }
            None => {
                let mut t = EmbeddingTable::random(config.vocab_size, config.embed_dim(), &mut rng);
                t.trainable = config.embed_trainable;
                t
            }
        };
        let mut params = ParamSet::new();
        let embedding = params.add(EMBEDDING, table.table, table.trainable)?;
        let encoder = Encoder::init(&mut params, ENCODER_PREFIX, config.encoder, &mut rng)?;
        let head = HeadParams::init(&mut params, HEAD_PREFIX, config.pooled_dim(), config.head_hidden, config.class_count, &mut rng)?;
        Ok((
            Classifier {
                config,
                embedding,
                encoder,
                head,
            },
            params,
        ))
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, batch: &Batch, strategy: ScanStrategy) -> Result<EncodedSequence> {
        let (b, steps, e) = (batch.len(), batch.mask.steps(), self.config.embed_dim());
        if let Some(&bad) = batch.flat_ids().iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let table = g.param(params, self.embedding);
        let rows = g.gather(table, &batch.flat_ids(), Some(PAD))?;
        let seq = g.reshape(rows, [b, steps, e])?;
        self.encoder.encode(g, params, seq, &batch.mask, strategy)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, batch: &Batch, strategy: ScanStrategy) -> Result<Forward> {
        let enc = self.encode(g, params, batch, strategy)?;
        let pooled = masked_pool(g, &enc)?;
        let logits = self.head.logits(g, params, pooled)?;
        Ok(Forward {
            encoded: enc.states,
            pooled,
            logits,
        })
    }

    /// Mean cross-entropy of the batch.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, batch: &Batch, strategy: ScanStrategy) -> Result<Var> {
        let f = self.forward(g, params, batch, strategy)?;
        g.softmax_cross_entropy(f.logits, &batch.labels)
    }

    pub fn probabilities<T: Real>(&self, params: &ParamSet<T>, batch: &Batch, strategy: ScanStrategy) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, params, batch, strategy)?;
        let p = g.softmax(f.logits)?;
        Ok(g.value(p).clone())
    }

    /// Argmax class per example, lower class id on ties.
    pub fn predict<T: Real>(&self, params: &ParamSet<T>, batch: &Batch, strategy: ScanStrategy) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, params, batch, strategy)?;
        Ok(argmax_rows(g.value(f.logits)))
    }
}

/// `params` after a round trip through single precision, the precision
/// checkpoints store.
pub fn storage_rounded<T: Real>(params: &ParamSet<T>) -> ParamSet<T> {
    params.cast::<f32>().cast::<T>()
}
