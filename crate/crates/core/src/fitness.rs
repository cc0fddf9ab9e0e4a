//! Fitness of a weight vector: train from a fixed seeded initialization,
//! embed a labeled probe subset with the RGB encoder, cluster it, and score
//! agreement between clusters and classes.

use std::time::Instant;

use crate::cluster::{ari, kmeans, nmi};
use crate::distill::DistillMode;
use crate::error::{Error, Result};
use crate::model::{embed_clips, Dims, Modality, Model};
use crate::rng::{self, stream};
use crate::synth::{gen_dataset, DatasetSpec, MultiModalClip};
use crate::tasks::compute_all_losses;
use crate::train::{train, TrainConfig};
use crate::weights::{ComponentLosses, LossKey, LossWeights};

/// The three data splits of an experiment.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub geometry: DatasetSpec,
    pub unlabeled: Vec<MultiModalClip>,
    /// Labeled clips used for fitness clustering and probe training.
    pub labeled: Vec<MultiModalClip>,
    /// Held-out labeled clips for evaluation.
    pub test: Vec<MultiModalClip>,
}

impl Corpus {
    pub fn split_spec(geometry: &DatasetSpec, n: usize, seed: u64, split: u64) -> DatasetSpec {
        geometry.with(n, rng::derive(seed, &[stream::SPLIT, split]))
    }

    pub fn generate(geometry: &DatasetSpec, n_unlabeled: usize, n_labeled: usize, n_test: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            geometry: geometry.with(n_unlabeled, seed),
            unlabeled: gen_dataset(&Self::split_spec(geometry, n_unlabeled, seed, 0))?,
            labeled: gen_dataset(&Self::split_spec(geometry, n_labeled, seed, 1))?,
            test: gen_dataset(&Self::split_spec(geometry, n_test, seed, 2))?,
        })
    }

    pub fn classes(&self) -> usize {
        self.geometry.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitnessConfig {
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub probe_size: usize,
    pub kmeans_restarts: usize,
    pub base_seed: u64,
    pub distill_mode: DistillMode,
    #[serde(skip)]
    pub dims: Dims,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self {
            train_steps: 300,
            batch_size: 16,
            learning_rate: 0.05,
            probe_size: 400,
            kmeans_restarts: 8,
            base_seed: 0,
            distill_mode: DistillMode::Bidirectional,
            dims: Dims::default(),
        }
    }
}

impl FitnessConfig {
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("train_steps", self.train_steps),
            ("batch_size", self.batch_size),
            ("probe_size", self.probe_size),
            ("kmeans_restarts", self.kmeans_restarts),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".into());
        }
        if self.probe_size > corpus.labeled.len() {
            problems.push(format!(
                "probe_size {} exceeds labeled subset size {}",
                self.probe_size,
                corpus.labeled.len()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join(", ")))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            distill_mode: self.distill_mode,
            seed: rng::derive(self.base_seed, &[stream::BATCH]),
        }
    }

    /// Seed of the shared encoder initialization.
    pub fn init_seed(&self) -> u64 {
        rng::derive(self.base_seed, &[stream::INIT])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessResult {
    /// NMI between k-means clusters and classes, in `[0, 1]`.
    pub fitness: f64,
    /// Adjusted Rand index of the same clustering; logged only.
    pub ari: f64,
    /// Component losses of the trained model on a fixed batch.
    pub losses: ComponentLosses,
    pub seed: u64,
    pub wall_ms: u128,
}

impl FitnessResult {
    pub fn csv_header() -> String {
        let keys: Vec<String> = LossKey::ALL.iter().map(|k| format!("loss_{k}")).collect();
        format!("fitness,ari,{},seed,wall_ms", keys.join(","))
    }

    pub fn to_csv_row(&self) -> String {
        let losses: Vec<String> = self.losses.values().iter().map(|v| v.to_string()).collect();
        format!("{},{},{},{},{}", self.fitness, self.ari, losses.join(","), self.seed, self.wall_ms)
    }
}

/// Fresh seeded model trained under `w`.
pub fn train_with_weights(w: &LossWeights, data: &[MultiModalClip], geometry: &DatasetSpec, cfg: &FitnessConfig) -> Result<Model> {
    let mut model = Model::init(geometry, cfg.dims, cfg.init_seed());
    train(&mut model, w, data, &cfg.train_config())?;
    Ok(model)
}

/// Clusters RGB embeddings of the first `probe_size` labeled clips into `K`
/// groups and scores them against the true classes. Returns `(nmi, ari)`.
pub fn cluster_score(model: &Model, corpus: &Corpus, cfg: &FitnessConfig) -> Result<(f64, f64)> {
    let probe: Vec<&MultiModalClip> = corpus.labeled.iter().take(cfg.probe_size).collect();
    let emb = embed_clips(model.encoder(Modality::Rgb), &probe)?;
    let km = kmeans(&emb, corpus.classes(), rng::derive(cfg.base_seed, &[stream::KMEANS]), cfg.kmeans_restarts)?;
    let labels: Vec<usize> = probe.iter().map(|c| c.class_id).collect();
    Ok((nmi(&km.assignments, &labels)?, ari(&km.assignments, &labels)?))
}

pub fn evaluate_fitness(w: &LossWeights, corpus: &Corpus, cfg: &FitnessConfig) -> Result<FitnessResult> {
    w.validate()?;
    cfg.validate(corpus)?;
    let start = Instant::now();
    let model = train_with_weights(w, &corpus.unlabeled, &corpus.geometry, cfg)?;
    let (fitness, ari) = cluster_score(&model, corpus, cfg)?;
    let batch: Vec<&MultiModalClip> = corpus.unlabeled.iter().take(cfg.batch_size.max(2)).collect();
    let losses = compute_all_losses(
        &model,
        &batch,
        &corpus.unlabeled,
        rng::derive(cfg.base_seed, &[stream::TASK, u64::MAX]),
        cfg.distill_mode,
    )?;
    Ok(FitnessResult {
        fitness,
        ari,
        losses,
        seed: cfg.base_seed,
        wall_ms: start.elapsed().as_millis(),
    })
}
