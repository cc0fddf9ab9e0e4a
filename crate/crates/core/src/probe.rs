//! Downstream evaluation of a trained RGB encoder: k-means clustering,
//! a linear probe on frozen embeddings, and full fine-tuning.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::Graph;
use crate::cluster::kmeans;
use crate::error::{Error, Result};
use crate::model::{embed_clips, encode_node, stack_rows, Encoder, Linear};
use crate::rng::{self, stream};
use crate::synth::MultiModalClip;
use crate::tensor::Tensor;
use crate::train::BatchSampler;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub kmeans_restarts: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probe_steps: 500,
            probe_lr: 0.5,
            finetune_steps: 500,
            finetune_lr: 0.05,
            finetune_batch: 16,
            kmeans_restarts: 8,
        }
    }
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub kmeans_acc: f64,
    pub probe_acc: f64,
    pub finetune_acc: f64,
    pub seed: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,kmeans,1-layer,fine-tune";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4}",
            self.method, self.kmeans_acc, self.probe_acc, self.finetune_acc
        )
    }
}

fn labels_of(clips: &[MultiModalClip]) -> Vec<usize> {
    clips.iter().map(|c| c.class_id).collect()
}

fn embed(enc: &Encoder, clips: &[MultiModalClip]) -> Result<Tensor> {
    let refs: Vec<&MultiModalClip> = clips.iter().collect();
    embed_clips(enc, &refs)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Clusters `features` into `classes` groups, labels each cluster by majority
/// vote over a seeded held-in half, and scores the other half.
pub fn kmeans_accuracy(features: &Tensor, labels: &[usize], classes: usize, seed: u64, restarts: usize) -> Result<f64> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Clustering("need at least two labeled points".into()));
    }
    let k = classes.min(n);
    let km = kmeans(features, k, rng::derive(seed, &[stream::KMEANS]), restarts)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed, &[stream::SPLIT]));
    let (held_in, held_out) = order.split_at(n / 2);

    let mut votes = vec![vec![0usize; classes]; k];
    let mut overall = vec![0usize; classes];
    for &i in held_in {
        votes[km.assignments[i]][labels[i]] += 1;
        overall[labels[i]] += 1;
    }
    let fallback = argmax(&overall.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let mapping: Vec<usize> = votes
        .iter()
        .map(|v| {
            if v.iter().all(|&c| c == 0) {
                fallback
            } else {
                argmax(&v.iter().map(|&c| c as f64).collect::<Vec<_>>())
            }
        })
        .collect();
    let pred: Vec<usize> = held_out.iter().map(|&i| mapping[km.assignments[i]]).collect();
    let truth: Vec<usize> = held_out.iter().map(|&i| labels[i]).collect();
    Ok(accuracy(&pred, &truth))
}

pub fn eval_kmeans(enc: &Encoder, test: &[MultiModalClip], classes: usize, seed: u64, cfg: &ProbeConfig) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Clustering("empty test set".into()));
    }
    kmeans_accuracy(&embed(enc, test)?, &labels_of(test), classes, seed, cfg.kmeans_restarts)
}

fn standardize(train: &Tensor, other: &Tensor) -> (Tensor, Tensor) {
    let d = train.cols();
    let n = train.rows() as f64;
    let mut mean = vec![0.0; d];
    for r in 0..train.rows() {
        for (m, v) in mean.iter_mut().zip(train.row(r)) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in 0..train.rows() {
        for ((s, v), m) in std.iter_mut().zip(train.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std: Vec<f64> = std.iter().map(|s| if *s > 1e-12 { s.sqrt() } else { 1.0 }).collect();
    let apply = |t: &Tensor| {
        let data = t
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s))
            .collect();
        Tensor::matrix(t.rows(), d, data).expect("same shape")
    };
    (apply(train), apply(other))
}

/// Full-batch softmax regression on standardized features.
pub fn linear_probe_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let (xtr, xte) = standardize(train_x, test_x);
    let d = xtr.cols();
    let mut head = Linear {
        weight: Tensor::zeros(&[d, classes]),
        bias: Tensor::zeros(&[classes]),
    };
    for _ in 0..cfg.probe_steps {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let w = g.param(head.weight.clone());
        let b = g.param(head.bias.clone());
        let logits = g.affine(x, w, b)?;
        let loss = g.softmax_ce(logits, train_y)?;
        let grads = g.backward(loss)?;
        head.weight.axpy(-cfg.probe_lr, &grads[&w]);
        head.bias.axpy(-cfg.probe_lr, &grads[&b]);
    }
    let mut g = Graph::new();
    let x = g.constant(xte);
    let w = g.constant(head.weight);
    let b = g.constant(head.bias);
    let logits = g.affine(x, w, b)?;
    let z = g.value(logits);
    let pred: Vec<usize> = (0..z.rows()).map(|r| argmax(z.row(r))).collect();
    Ok(accuracy(&pred, test_y))
}

/// Trains one affine layer on frozen embeddings. The encoder is borrowed
/// immutably and never modified.
pub fn eval_linear_probe(
    enc: &Encoder,
    train: &[MultiModalClip],
    test: &[MultiModalClip],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    linear_probe_accuracy(
        &embed(enc, train)?,
        &labels_of(train),
        &embed(enc, test)?,
        &labels_of(test),
        classes,
        cfg,
    )
}

/// Fine-tunes a copy of the encoder plus a fresh classifier head on a seeded
/// `fraction` of the labeled training clips.
pub fn eval_finetune(
    enc: &Encoder,
    train: &[MultiModalClip],
    test: &[MultiModalClip],
    classes: usize,
    fraction: f64,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} is outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::rng(seed, &[stream::PROBE, 0]));
    let take = ((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len());
    let subset: Vec<&MultiModalClip> = order[..take].iter().map(|&i| &train[i]).collect();

    let mut enc = enc.clone();
    let embed_dim = enc.block2.weight.shape()[1];
    let bound = (6.0 / (embed_dim + classes) as f64).sqrt();
    let mut r = rng::rng(seed, &[stream::PROBE, 1]);
    let mut head = Linear {
        weight: Tensor::new(
            vec![embed_dim, classes],
            (0..embed_dim * classes).map(|_| r.random_range(-bound..=bound)).collect(),
        )?,
        bias: Tensor::zeros(&[classes]),
    };

    let mut sampler = BatchSampler::new(subset.len(), cfg.finetune_batch, rng::derive(seed, &[stream::PROBE, 2]));
    for _ in 0..cfg.finetune_steps {
        let idx = sampler.next_batch().to_vec();
        let clips: Vec<&MultiModalClip> = idx.iter().map(|&i| subset[i]).collect();
        let labels: Vec<usize> = clips.iter().map(|c| c.class_id).collect();
        let mut g = Graph::new();
        let e = enc.map_params(|t| g.param(t.clone()));
        let hw = g.param(head.weight.clone());
        let hb = g.param(head.bias.clone());
        let x = g.constant(stack_rows(clips.iter().map(|c| enc.modality.of_clip(c).data())));
        let tr = encode_node(&mut g, &e, x)?;
        let logits = g.affine(tr.embedding, hw, hb)?;
        let loss = g.softmax_ce(logits, &labels)?;
        let grads = g.backward(loss)?;
        for (t, id) in enc.params_mut().into_iter().zip(e.params()) {
            t.axpy(-cfg.finetune_lr, &grads[id]);
        }
        head.weight.axpy(-cfg.finetune_lr, &grads[&hw]);
        head.bias.axpy(-cfg.finetune_lr, &grads[&hb]);
    }

    let emb = embed(&enc, test)?;
    let mut g = Graph::new();
    let x = g.constant(emb);
    let w = g.constant(head.weight);
    let b = g.constant(head.bias);
    let logits = g.affine(x, w, b)?;
    let z = g.value(logits);
    let pred: Vec<usize> = (0..z.rows()).map(|r| argmax(z.row(r))).collect();
    Ok(accuracy(&pred, &labels_of(test)))
}
