//! Run configuration, read from a TOML file.
//!
//! Every section and key is optional and falls back to its default; unknown
//! keys are rejected. All randomness derives from the top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::DistillMode;
use crate::error::{Error, Result};
use crate::evolution::EvolutionConfig;
use crate::fitness::{Corpus, FitnessConfig};
use crate::model::Dims;
use crate::probe::ProbeConfig;
use crate::synth::DatasetSpec;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_len: usize,
    pub n_unlabeled: usize,
    pub n_labeled: usize,
    pub n_test: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            classes: d.classes,
            frames: d.frames,
            height: d.height,
            width: d.width,
            audio_len: d.audio_len,
            n_unlabeled: 2000,
            n_labeled: 400,
            n_test: 400,
        }
    }
}

impl DatasetSection {
    pub fn geometry(&self, n_clips: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_clips,
            classes: self.classes,
            frames: self.frames,
            height: self.height,
            width: self.width,
            audio_len: self.audio_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitnessSection {
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub probe_size: usize,
    pub kmeans_restarts: usize,
    pub distill_mode: DistillMode,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for FitnessSection {
    fn default() -> Self {
        let f = FitnessConfig::default();
        Self {
            train_steps: f.train_steps,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            probe_size: f.probe_size,
            kmeans_restarts: f.kmeans_restarts,
            distill_mode: f.distill_mode,
            hidden: f.dims.hidden,
            embed: f.dims.embed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionSection {
    pub population_size: usize,
    pub rounds: usize,
    pub top_fraction: f64,
}

impl Default for EvolutionSection {
    fn default() -> Self {
        let e = EvolutionConfig::default();
        Self {
            population_size: e.population_size,
            rounds: e.rounds,
            top_fraction: e.top_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub kmeans_restarts: usize,
    pub finetune_fraction: f64,
    pub fractions: Vec<f64>,
    pub amounts: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            probe_steps: p.probe_steps,
            probe_lr: p.probe_lr,
            finetune_steps: p.finetune_steps,
            finetune_lr: p.finetune_lr,
            finetune_batch: p.finetune_batch,
            kmeans_restarts: p.kmeans_restarts,
            finetune_fraction: 1.0,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            amounts: vec![250, 500, 1000, 2000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub fitness: FitnessSection,
    pub evolution: EvolutionSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            fitness: FitnessSection::default(),
            evolution: EvolutionSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let d = &self.dataset;
        if let Err(e) = d.geometry(d.n_unlabeled, self.seed).validate() {
            problems.push(e.to_string());
        }
        for (name, v) in [
            ("dataset.n_unlabeled", d.n_unlabeled),
            ("dataset.n_labeled", d.n_labeled),
            ("dataset.n_test", d.n_test),
            ("fitness.train_steps", self.fitness.train_steps),
            ("fitness.batch_size", self.fitness.batch_size),
            ("fitness.probe_size", self.fitness.probe_size),
            ("fitness.kmeans_restarts", self.fitness.kmeans_restarts),
            ("fitness.hidden", self.fitness.hidden),
            ("fitness.embed", self.fitness.embed),
            ("eval.finetune_batch", self.eval.finetune_batch),
            ("eval.kmeans_restarts", self.eval.kmeans_restarts),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.fitness.probe_size > d.n_labeled {
            problems.push(format!(
                "fitness.probe_size {} exceeds dataset.n_labeled {}",
                self.fitness.probe_size, d.n_labeled
            ));
        }
        if self.fitness.probe_size < d.classes {
            problems.push("fitness.probe_size must be at least dataset.classes".into());
        }
        for (name, v) in [
            ("fitness.learning_rate", self.fitness.learning_rate),
            ("eval.probe_lr", self.eval.probe_lr),
            ("eval.finetune_lr", self.eval.finetune_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive"));
            }
        }
        for f in std::iter::once(self.eval.finetune_fraction).chain(self.eval.fractions.iter().copied()) {
            if !(f > 0.0 && f <= 1.0) {
                problems.push(format!("fraction {f} is outside (0, 1]"));
            }
        }
        problems.extend(amount_problems(&self.eval.amounts, d.n_unlabeled));
        if let Err(e) = self.evolution_config(1).validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Short digest of every setting that affects results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `config_hash=… version=…`, used as the comment line of emitted CSVs.
    pub fn provenance(&self) -> String {
        format!("config_hash={} version={VERSION}", self.hash())
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let d = &self.dataset;
        Corpus::generate(&d.geometry(d.n_unlabeled, self.seed), d.n_unlabeled, d.n_labeled, d.n_test, self.seed)
    }

    pub fn fitness_config(&self) -> FitnessConfig {
        let f = &self.fitness;
        FitnessConfig {
            train_steps: f.train_steps,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            probe_size: f.probe_size,
            kmeans_restarts: f.kmeans_restarts,
            base_seed: self.seed,
            distill_mode: f.distill_mode,
            dims: Dims {
                hidden: f.hidden,
                embed: f.embed,
            },
        }
    }

    pub fn evolution_config(&self, workers: usize) -> EvolutionConfig {
        EvolutionConfig {
            population_size: self.evolution.population_size,
            rounds: self.evolution.rounds,
            top_fraction: self.evolution.top_fraction,
            seed: self.seed,
            workers,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let e = &self.eval;
        ProbeConfig {
            probe_steps: e.probe_steps,
            probe_lr: e.probe_lr,
            finetune_steps: e.finetune_steps,
            finetune_lr: e.finetune_lr,
            finetune_batch: e.finetune_batch,
            kmeans_restarts: e.kmeans_restarts,
        }
    }
}

/// Problems with a list of unlabeled-data amounts.
pub fn amount_problems(amounts: &[usize], available: usize) -> Vec<String> {
    let mut problems = Vec::new();
    if amounts.is_empty() {
        problems.push("amounts must not be empty".into());
    }
    for &a in amounts {
        if a == 0 || a > available {
            problems.push(format!("amount {a} must lie in [1, {available}]"));
        }
    }
    problems
}
