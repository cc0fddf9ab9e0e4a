//! k-means with k-means++ seeding, and partition agreement scores.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};
use crate::tensor::Tensor;

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// `k × D`, row-major.
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
    pub iterations: usize,
    /// WCSS after every assignment step of the winning restart.
    pub wcss_trace: Vec<f64>,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Best of `restarts` Lloyd runs (lowest WCSS, earliest restart on ties),
/// each seeded by k-means++ from a derived seed.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, restarts: usize) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::Clustering(format!("need N >= k >= 1, got N = {n}, k = {k}")));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut g = rng::rng(seed, &[stream::KMEANS, r as u64]);
        let run = lloyd(points, k, &mut g);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus(points: &Tensor, k: usize, g: &mut Rng) -> Vec<f64> {
    let n = points.rows();
    let mut centroids = Vec::with_capacity(k * points.cols());
    centroids.extend_from_slice(points.row(g.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq(points.row(i), &centroids[..])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = g.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            g.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq(points.row(i), &c));
        }
        centroids.extend(c);
    }
    centroids
}

fn assign(points: &Tensor, centroids: &[f64], k: usize, out: &mut [usize]) -> f64 {
    let d = points.cols();
    let mut wcss = 0.0;
    for (i, slot) in out.iter_mut().enumerate() {
        let p = points.row(i);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for c in 0..k {
            let dist = sq(p, &centroids[c * d..(c + 1) * d]);
            if dist < best_d {
                best = c;
                best_d = dist;
            }
        }
        *slot = best;
        wcss += best_d;
    }
    wcss
}

fn lloyd(points: &Tensor, k: usize, g: &mut Rng) -> KMeans {
    let (n, d) = (points.rows(), points.cols());
    let mut centroids = plus_plus(points, k, g);
    let mut assignments = vec![0; n];
    let mut wcss = assign(points, &centroids, k, &mut assignments);
    let mut trace = vec![wcss];
    let mut iterations = 0;
    for _ in 0..MAX_LLOYD_ITERS {
        iterations += 1;
        // update: empty clusters keep their centroid
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        let mut next = vec![0; n];
        let next_wcss = assign(points, &centroids, k, &mut next);
        debug_assert!(
            next_wcss <= wcss * (1.0 + 1e-12) + 1e-12,
            "WCSS increased: {wcss} -> {next_wcss}"
        );
        trace.push(next_wcss);
        let converged = next == assignments;
        assignments = next;
        wcss = next_wcss;
        if converged {
            break;
        }
    }
    KMeans {
        assignments,
        centroids,
        wcss,
        iterations,
        wcss_trace: trace,
    }
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

struct Contingency {
    joint: BTreeMap<(usize, usize), usize>,
    a: BTreeMap<usize, usize>,
    b: BTreeMap<usize, usize>,
    n: usize,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(Error::Clustering(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Clustering("empty partitions".into()));
    }
    let mut c = Contingency {
        joint: BTreeMap::new(),
        a: BTreeMap::new(),
        b: BTreeMap::new(),
        n: a.len(),
    };
    for (&x, &y) in a.iter().zip(b) {
        *c.joint.entry((x, y)).or_default() += 1;
        *c.a.entry(x).or_default() += 1;
        *c.b.entry(y).or_default() += 1;
    }
    Ok(c)
}

/// Normalized mutual information `I(a; b) / sqrt(H(a)·H(b))`.
///
/// When either partition has zero entropy the ratio is undefined; the score
/// is then 1 if both partitions are a single cluster and 0 otherwise.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    let c = contingency(assignments, labels)?;
    let n = c.n as f64;
    let ha = entropy(c.a.values().copied(), n);
    let hb = entropy(c.b.values().copied(), n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(if c.a.len() == 1 && c.b.len() == 1 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (&(x, y), &nxy) in &c.joint {
        let pxy = nxy as f64 / n;
        let px = c.a[&x] as f64 / n;
        let py = c.b[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let c = contingency(a, b)?;
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = c.joint.values().map(|&v| choose2(v)).sum();
    let sa: f64 = c.a.values().map(|&v| choose2(v)).sum();
    let sb: f64 = c.b.values().map(|&v| choose2(v)).sum();
    let total = choose2(c.n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}
