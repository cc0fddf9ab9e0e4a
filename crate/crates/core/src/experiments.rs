//! End-to-end experiment drivers shared by the CLI and the acceptance suite:
//! train-then-evaluate, the random-weights baseline, the labeled-fraction
//! sweep, and the unlabeled-amount sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::fitness::{train_with_weights, Corpus, FitnessConfig};
use crate::model::{Modality, Model};
use crate::probe::{eval_finetune, eval_kmeans, eval_linear_probe, EvalReport, ProbeConfig};
use crate::rng::{self, stream};
use crate::synth::MultiModalClip;
use crate::train::train;
use crate::weights::LossWeights;

/// The `i`-th random weight vector of the baseline for `seed`.
pub fn random_weights(seed: u64, i: usize) -> LossWeights {
    LossWeights::random(&mut rng::rng(seed, &[stream::RANDOM_WEIGHTS, i as u64]))
}

fn evaluate_model(
    method: &str,
    model: &Model,
    corpus: &Corpus,
    seed: u64,
    fraction: f64,
    probe: &ProbeConfig,
) -> Result<EvalReport> {
    let enc = model.encoder(Modality::Rgb);
    let k = corpus.classes();
    Ok(EvalReport {
        method: method.to_string(),
        kmeans_acc: eval_kmeans(enc, &corpus.test, k, seed, probe)?,
        probe_acc: eval_linear_probe(enc, &corpus.labeled, &corpus.test, k, probe)?,
        finetune_acc: eval_finetune(enc, &corpus.labeled, &corpus.test, k, fraction, seed, probe)?,
        seed,
    })
}

/// Trains under `w` and runs all three protocols.
pub fn eval_weights(
    method: &str,
    w: &LossWeights,
    corpus: &Corpus,
    fit: &FitnessConfig,
    probe: &ProbeConfig,
    fraction: f64,
) -> Result<EvalReport> {
    w.validate()?;
    let model = train_with_weights(w, &corpus.unlabeled, &corpus.geometry, fit)?;
    evaluate_model(method, &model, corpus, fit.base_seed, fraction, probe)
}

/// Protocols applied to the untrained, seeded initialization.
pub fn eval_random_init(corpus: &Corpus, fit: &FitnessConfig, probe: &ProbeConfig, fraction: f64) -> Result<EvalReport> {
    let model = Model::init(&corpus.geometry, fit.dims, fit.init_seed());
    evaluate_model("Random Init", &model, corpus, fit.base_seed, fraction, probe)
}

/// Mean of the protocols over `n` random weight vectors.
pub fn eval_random_loss(
    n: usize,
    corpus: &Corpus,
    fit: &FitnessConfig,
    probe: &ProbeConfig,
    fraction: f64,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::Config("need at least one random weight vector".into()));
    }
    let reports = (0..n)
        .map(|i| eval_weights("Random Loss", &random_weights(fit.base_seed, i), corpus, fit, probe, fraction))
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    Ok(EvalReport {
        method: "Random Loss".into(),
        kmeans_acc: mean(|r| r.kmeans_acc),
        probe_acc: mean(|r| r.probe_acc),
        finetune_acc: mean(|r| r.finetune_acc),
        seed: fit.base_seed,
    })
}

/// Fine-tune accuracy for each labeled fraction, starting from the RGB encoder of `model`.
pub fn fraction_sweep(model: &Model, corpus: &Corpus, fractions: &[f64], seed: u64, probe: &ProbeConfig) -> Result<Vec<(f64, f64)>> {
    let enc = model.encoder(Modality::Rgb);
    fractions
        .iter()
        .map(|&f| Ok((f, eval_finetune(enc, &corpus.labeled, &corpus.test, corpus.classes(), f, seed, probe)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Same number of SGD steps for every amount.
    FixedSteps,
    /// Same number of passes over the data; steps scale with the amount.
    FixedEpochs,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::FixedSteps => "fixed_steps",
            Regime::FixedEpochs => "fixed_epochs",
        })
    }
}

impl Regime {
    pub const BOTH: [Regime; 2] = [Regime::FixedSteps, Regime::FixedEpochs];

    /// Steps for `amount` clips when `train_steps` is the budget for the
    /// full `available` clips.
    pub fn steps(self, amount: usize, available: usize, train_steps: usize) -> usize {
        match self {
            Regime::FixedSteps => train_steps,
            Regime::FixedEpochs => {
                let scaled = (train_steps as u128 * amount as u128 + available as u128 / 2) / available as u128;
                (scaled as usize).max(1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub amount: usize,
    pub regime: Regime,
    pub steps: usize,
    pub probe_acc: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "amount,regime,steps,probe_acc";

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{}", self.amount, self.regime, self.steps, self.probe_acc)
    }
}

/// Probe accuracy after training on the first `amount` unlabeled clips,
/// for every amount under both regimes.
pub fn sweep_data(
    w: &LossWeights,
    amounts: &[usize],
    corpus: &Corpus,
    fit: &FitnessConfig,
    probe: &ProbeConfig,
) -> Result<Vec<SweepRow>> {
    w.validate()?;
    let available = corpus.unlabeled.len();
    let problems = crate::config::amount_problems(amounts, available);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut rows = Vec::new();
    for &amount in amounts {
        let data: &[MultiModalClip] = &corpus.unlabeled[..amount];
        for regime in Regime::BOTH {
            let steps = regime.steps(amount, available, fit.train_steps);
            let mut model = Model::init(&corpus.geometry, fit.dims, fit.init_seed());
            let mut tc = fit.train_config();
            tc.steps = steps;
            train(&mut model, w, data, &tc)?;
            let probe_acc = eval_linear_probe(
                model.encoder(Modality::Rgb),
                &corpus.labeled,
                &corpus.test,
                corpus.classes(),
                probe,
            )?;
            rows.push(SweepRow {
                amount,
                regime,
                steps,
                probe_acc,
            });
        }
    }
    Ok(rows)
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either variable is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
