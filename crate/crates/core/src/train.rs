//! Adam, the epoch loop and accuracy evaluation.
//!
//! A batch is split into fixed-size chunks, each differentiated on its own
//! graph. Chunk losses are weighted by their share of the batch and
//! gradients are summed in chunk order, so results never depend on how many
//! workers ran the chunks.

use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{batch_pad, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{storage_rounded, Classifier};
use crate::numerics::{GradientMap, Graph, ParamSet, Real, Tensor};
use crate::scan::ScanStrategy;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter, indexed like the parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every trainable parameter in `grads`.
    /// Non-finite gradients abort before anything is modified.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &GradientMap<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim("adam", g.shape(), params.get(id).shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", params.name(id))));
            }
        }
        self.step += 1;
        let c = self.config;
        let f = T::from_f64_lossy;
        let (b1, b2, eps, lr) = (f(c.beta1), f(c.beta2), f(c.eps), f(c.lr));
        let one = T::one();
        let t = self.step as i32;
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for (((pk, mk), vk), &gk) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mk = b1 * *mk + (one - b1) * gk;
                *vk = b2 * *vk + (one - b2) * gk * gk;
                let m_hat = *mk / corr1;
                let v_hat = *vk / corr2;
                *pk = *pk - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut ParamSet<T>, grads: &GradientMap<T>) -> Result<()> {
    state.update(params, grads)
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut GradientMap<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm {
        grads.scale(T::from_f64_lossy(max_norm / norm));
    }
    norm
}

pub const CLIP_NORM: f64 = 5.0;
/// Examples per gradient chunk.
pub const CHUNK_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub workers: usize,
    pub chunk_size: usize,
    pub strategy: ScanStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: CLIP_NORM,
            seed: 0,
            workers: 1,
            chunk_size: CHUNK_SIZE,
            strategy: ScanStrategy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Example-weighted mean loss over the epoch's updates.
    pub train_loss: f64,
    /// Accuracy on the dev set with parameters rounded to stored precision.
    pub dev_acc: f64,
}

/// Runs `work` over `items` on `workers` threads, keeping input order.
fn ordered_map<I: Sync, O: Send>(items: &[I], workers: usize, work: impl Fn(&I) -> Result<O> + Sync + Send) -> Result<Vec<O>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(work).collect())
}

fn chunks(batch: &Batch, chunk_size: usize) -> Result<Vec<Batch>> {
    let size = chunk_size.max(1);
    (0..batch.len())
        .step_by(size)
        .map(|start| batch.sub_batch(start, size.min(batch.len() - start)))
        .collect()
}

/// Mean loss and its gradient for one batch.
pub fn batch_gradients<T: Real>(
    model: &Classifier,
    params: &ParamSet<T>,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(f64, GradientMap<T>)> {
    let total = batch.len() as f64;
    let parts = chunks(batch, config.chunk_size)?;
    let results = ordered_map(&parts, config.workers, |chunk| {
        let mut g = Graph::new();
        let mean = model.loss(&mut g, params, chunk, config.strategy)?;
        let loss = g.scale(mean, T::from_f64_lossy(chunk.len() as f64 / total))?;
        let value = g.value(loss).item().as_f64();
        Ok((value, g.backward(loss, params)?))
    })?;
    let mut grads = GradientMap::zeros(params);
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        grads.accumulate(g)?;
    }
    Ok((loss, grads))
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn evaluate<T: Real>(model: &Classifier, params: &ParamSet<T>, dataset: &Dataset, batch_size: usize, strategy: ScanStrategy) -> Result<f64> {
    if dataset.class_count != model.config.class_count {
        return Err(Error::Input(format!(
            "dataset has {} classes, model has {}",
            dataset.class_count, model.config.class_count
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let mut correct = 0usize;
    for batch in batch_pad(dataset, batch_size, None)? {
        let predicted = model.predict(params, &batch, strategy)?;
        correct += predicted.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Trains `params` in place. `on_epoch` sees each epoch's metrics and the
/// updated parameters and may stop the run early.
pub fn train_loop<T: Real>(
    model: &Classifier,
    params: &mut ParamSet<T>,
    config: &TrainConfig,
    train: &Dataset,
    dev: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics, &ParamSet<T>) -> Result<ControlFlow<()>>,
) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut adam = AdamState::new(params, config.adam);
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for batch in batch_pad(train, config.batch_size, Some(seeds.gen()))? {
            let (loss, mut grads) = batch_gradients(model, params, &batch, config)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss diverged to {loss} in epoch {epoch}")));
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.update(params, &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let dev_acc = evaluate(model, &storage_rounded(params), dev, config.batch_size, config.strategy)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_acc,
        };
        log.push(metrics);
        if on_epoch(&metrics, params)?.is_break() {
            break;
        }
    }
    Ok(log)
}
