//! Unsupervised training under a weighted multi-task loss.

use rand::seq::SliceRandom;

use crate::distill::DistillMode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, stream};
use crate::synth::MultiModalClip;
use crate::tasks::LossBuilder;
use crate::weights::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub distill_mode: DistillMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 0.05,
            distill_mode: DistillMode::Bidirectional,
            seed: 0,
        }
    }
}

/// Yields batches of dataset indices: each epoch is a fresh seeded
/// permutation cut into full batches (an incomplete tail is dropped unless
/// the whole dataset is smaller than one batch).
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0 && batch > 0);
        let mut s = Self {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    /// Full batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut rng::rng(self.seed, &[stream::BATCH, self.epoch]));
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let b = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        b
    }
}

/// Loss trajectory of a training run; `None` where no component was active.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<Option<f64>>,
}

/// Seed used for the task randomness of one step.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    rng::derive(seed, &[stream::TASK, step as u64])
}

/// Runs `cfg.steps` SGD steps minimizing `Σ λ_k L_k` on `data`. Misaligned
/// audio for alignment tasks is drawn from `data` as well.
pub fn train(model: &mut Model, weights: &LossWeights, data: &[MultiModalClip], cfg: &TrainConfig) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if weights.values().iter().all(|&w| w == 0.0) {
        log.losses = vec![None; cfg.steps];
        return Ok(log);
    }
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed);
    for step in 0..cfg.steps {
        let clips: Vec<&MultiModalClip> = sampler.next_batch().iter().map(|&i| &data[i]).collect();
        let mut b = LossBuilder::new(model, &clips, data, step_seed(cfg.seed, step), cfg.distill_mode);
        let Some(total) = b.total(weights)? else {
            log.losses.push(None);
            continue;
        };
        let value = b.graph().value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = b.graph().backward(total)?;
        let bound = b.bound().clone();
        model.sgd_step(&bound, &grads, cfg.learning_rate);
        if !model.all_finite() {
            return Err(Error::NonFinite("parameters after update"));
        }
        log.losses.push(Some(value));
    }
    Ok(log)
}
