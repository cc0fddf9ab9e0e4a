//! Evolutionary search over loss weight vectors.
//!
//! Each round selects a parent uniformly among the top individuals, mutates
//! exactly one coordinate, evaluates the child, and lets it replace the
//! current worst member when strictly fitter. Every round draws from its own
//! derived generator, so a run can be replayed from its history alone.
//!
//! With `workers > 1` children of several upcoming rounds are evaluated
//! speculatively against the current population. Results are committed in
//! round order; a speculated child is only used if regenerating it from the
//! committed state yields the same individual, so output does not depend on
//! the worker count.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::fitness::{evaluate_fitness, Corpus, FitnessConfig};
use crate::rng::{self, stream, Rng};
use crate::weights::{LossKey, LossWeights, NUM_WEIGHTS};

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: usize,
    pub parent_id: Option<usize>,
    pub birth_round: usize,
    pub weights: LossWeights,
    pub fitness: Option<f64>,
    pub ari: Option<f64>,
}

impl Individual {
    fn score(&self) -> f64 {
        self.fitness.expect("individual evaluated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub rounds: usize,
    pub top_fraction: f64,
    pub seed: u64,
    #[serde(skip)]
    pub workers: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            rounds: 100,
            top_fraction: 0.25,
            seed: 0,
            workers: 1,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.population_size < 2 {
            problems.push(format!("population_size must be at least 2, got {}", self.population_size));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            problems.push(format!("top_fraction must lie in (0, 1], got {}", self.top_fraction));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join(", ")))
        }
    }

    /// Number of individuals eligible as parents.
    pub fn top_count(&self) -> usize {
        ((self.top_fraction * self.population_size as f64).ceil() as usize).clamp(1, self.population_size)
    }
}

/// Fitness value plus the logged agreement score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub fitness: f64,
    pub ari: f64,
}

pub trait Fitness: Sync {
    fn evaluate(&self, w: &LossWeights) -> Result<Score>;
}

/// Trains and clusters; the real objective.
pub struct ClusteringFitness<'a> {
    pub corpus: &'a Corpus,
    pub config: FitnessConfig,
}

impl Fitness for ClusteringFitness<'_> {
    fn evaluate(&self, w: &LossWeights) -> Result<Score> {
        let r = evaluate_fitness(w, self.corpus, &self.config)?;
        Ok(Score {
            fitness: r.fitness,
            ari: r.ari,
        })
    }
}

/// `f(w) = w[key]`, for exercising the search without training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubFitness {
    pub key: LossKey,
}

impl Fitness for StubFitness {
    fn evaluate(&self, w: &LossWeights) -> Result<Score> {
        Ok(Score {
            fitness: w[self.key],
            ari: 0.0,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvolutionHistory {
    /// Every evaluated individual, in id order.
    pub individuals: Vec<Individual>,
    /// Best fitness in the population after initialization and after each round.
    pub best_so_far: Vec<f64>,
}

impl EvolutionHistory {
    pub fn best(&self) -> Option<&Individual> {
        self.individuals
            .iter()
            .filter(|i| i.fitness.is_some())
            .fold(None, |best: Option<&Individual>, i| match best {
                Some(b) if b.score() >= i.score() => Some(b),
                _ => Some(i),
            })
    }
}

pub fn init_population(cfg: &EvolutionConfig) -> Vec<Individual> {
    let mut r = rng::rng(cfg.seed, &[stream::EVOLUTION, 0]);
    (0..cfg.population_size)
        .map(|id| Individual {
            id,
            parent_id: None,
            birth_round: 0,
            weights: LossWeights::random(&mut r),
            fitness: None,
            ari: None,
        })
        .collect()
}

/// Copy of `parent` with one uniformly chosen coordinate resampled from
/// `[0, 1]` (redrawn until it differs from the old value).
pub fn mutate(parent: &Individual, id: usize, birth_round: usize, r: &mut Rng) -> Individual {
    let mut weights = parent.weights;
    let k = r.random_range(0..NUM_WEIGHTS);
    let old = weights.values()[k];
    let new = loop {
        let v = r.random_range(0.0..=1.0);
        if v != old {
            break v;
        }
    };
    weights.values_mut()[k] = new;
    Individual {
        id,
        parent_id: Some(parent.id),
        birth_round,
        weights,
        fitness: None,
        ari: None,
    }
}

/// Population members ordered best first, ties broken by smaller id.
fn ranked(population: &[Individual]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..population.len()).collect();
    idx.sort_by(|&a, &b| {
        population[b]
            .score()
            .total_cmp(&population[a].score())
            .then(population[a].id.cmp(&population[b].id))
    });
    idx
}

/// The child of round `round` given the committed population.
fn spawn_child(cfg: &EvolutionConfig, population: &[Individual], round: usize) -> Individual {
    let mut r = rng::rng(cfg.seed, &[stream::EVOLUTION, round as u64]);
    let order = ranked(population);
    let parent = &population[order[r.random_range(0..cfg.top_count())]];
    mutate(parent, cfg.population_size + round - 1, round, &mut r)
}

/// Applies elitist truncation; returns whether the child entered.
fn commit(population: &mut [Individual], child: &Individual) -> bool {
    let worst = *ranked(population).last().expect("nonempty population");
    if child.score() > population[worst].score() {
        population[worst] = child.clone();
        true
    } else {
        false
    }
}

fn best_of(population: &[Individual]) -> f64 {
    population.iter().map(Individual::score).fold(f64::NEG_INFINITY, f64::max)
}

/// Evaluates `items` with up to `workers` threads; results keep input order.
fn par_evaluate(fitness: &dyn Fitness, items: &[&LossWeights], workers: usize) -> Vec<Result<Score>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(|w| fitness.evaluate(w)).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<Result<Score>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = fitness.evaluate(items[i]);
                out.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every item evaluated"))
        .collect()
}

fn set_score(ind: &mut Individual, s: Score) {
    ind.fitness = Some(s.fitness);
    ind.ari = Some(s.ari);
}

/// Runs the search from scratch. `sink` sees every evaluated individual in
/// id order as soon as it is final.
pub fn evolve(
    cfg: &EvolutionConfig,
    fitness: &dyn Fitness,
    sink: &mut dyn FnMut(&Individual) -> Result<()>,
) -> Result<EvolutionHistory> {
    resume(cfg, fitness, &[], sink)
}

/// Continues a run whose first individuals are `prior` (as read back from a
/// history file). Prior records are replayed, not re-evaluated, and are not
/// passed to `sink` again.
pub fn resume(
    cfg: &EvolutionConfig,
    fitness: &dyn Fitness,
    prior: &[Individual],
    sink: &mut dyn FnMut(&Individual) -> Result<()>,
) -> Result<EvolutionHistory> {
    cfg.validate()?;
    let p = cfg.population_size;
    let workers = cfg.workers.max(1);
    let mut history = EvolutionHistory::default();

    let mut population = init_population(cfg);
    for (ind, rec) in population.iter_mut().zip(prior) {
        if rec.id != ind.id || rec.weights != ind.weights || rec.fitness.is_none() {
            return Err(Error::format("history", format!("record {} does not match the seeded population", rec.id)));
        }
        ind.fitness = rec.fitness;
        ind.ari = rec.ari;
    }
    let pending: Vec<usize> = (prior.len().min(p)..p).collect();
    let weights: Vec<&LossWeights> = pending.iter().map(|&i| &population[i].weights).collect();
    let scores = par_evaluate(fitness, &weights, workers);
    for (i, s) in pending.into_iter().zip(scores) {
        let s = s?;
        set_score(&mut population[i], s);
        if !s.fitness.is_finite() {
            return Err(Error::NonFinite("fitness"));
        }
        sink(&population[i])?;
    }
    history.individuals.extend(population.iter().cloned());
    history.best_so_far.push(best_of(&population));

    let mut round = 1;
    for rec in prior.iter().skip(p) {
        if round > cfg.rounds {
            return Err(Error::format("history", "more records than configured rounds"));
        }
        let mut child = spawn_child(cfg, &population, round);
        if rec.id != child.id || rec.parent_id != child.parent_id || rec.weights != child.weights {
            return Err(Error::format("history", format!("record {} does not replay", rec.id)));
        }
        child.fitness = rec.fitness;
        child.ari = rec.ari;
        if child.fitness.is_none() {
            return Err(Error::format("history", format!("record {} has no fitness", rec.id)));
        }
        commit(&mut population, &child);
        history.individuals.push(child);
        history.best_so_far.push(best_of(&population));
        round += 1;
    }

    while round <= cfg.rounds {
        let batch_end = (round + workers - 1).min(cfg.rounds);
        let speculative: Vec<Individual> = (round..=batch_end).map(|r| spawn_child(cfg, &population, r)).collect();
        let weights: Vec<&LossWeights> = speculative.iter().map(|c| &c.weights).collect();
        let scores = par_evaluate(fitness, &weights, workers);
        for (mut spec, score) in speculative.into_iter().zip(scores) {
            let actual = spawn_child(cfg, &population, round);
            if actual != spec {
                break;
            }
            let s = score?;
            if !s.fitness.is_finite() {
                return Err(Error::NonFinite("fitness"));
            }
            set_score(&mut spec, s);
            sink(&spec)?;
            commit(&mut population, &spec);
            history.individuals.push(spec);
            history.best_so_far.push(best_of(&population));
            round += 1;
        }
    }
    Ok(history)
}

pub fn history_header() -> String {
    let keys: Vec<String> = LossKey::ALL.iter().map(|k| k.code()).collect();
    format!("id,parent_id,birth_round,{},fitness,ari", keys.join(","))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn history_row(ind: &Individual) -> String {
    let w: Vec<String> = ind.weights.values().iter().map(|v| v.to_string()).collect();
    format!(
        "{},{},{},{},{},{}",
        ind.id,
        ind.parent_id.map(|p| p.to_string()).unwrap_or_default(),
        ind.birth_round,
        w.join(","),
        opt(ind.fitness),
        opt(ind.ari)
    )
}

/// Writes history rows as they arrive, flushing after each one.
pub struct HistoryWriter<W: Write> {
    out: W,
}

impl<W: Write> HistoryWriter<W> {
    /// Writes `comment` (as a `#` line, if given) and the header.
    pub fn new(mut out: W, comment: Option<&str>) -> std::io::Result<Self> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "{}", history_header())?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, ind: &Individual) -> std::io::Result<()> {
        writeln!(self.out, "{}", history_row(ind))?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format("history", format!("line {line}: bad {name} `{s}`")))
}

fn parse_opt_f64(line: usize, name: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_field(line, name, s).map(Some)
    }
}

/// Reads a history CSV. `#` lines are skipped; the header must match.
pub fn read_history<R: BufRead>(input: R) -> Result<Vec<Individual>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    let expected = history_header();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::format("history", e.to_string()))?;
        let line_no = n + 1;
        let line = line.trim_end();
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != expected {
                return Err(Error::format("history", format!("line {line_no}: unexpected header")));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 + NUM_WEIGHTS + 2 {
            return Err(Error::format(
                "history",
                format!("line {line_no}: expected {} fields, got {}", 5 + NUM_WEIGHTS, f.len()),
            ));
        }
        let mut values = [0.0; NUM_WEIGHTS];
        for (k, v) in values.iter_mut().enumerate() {
            *v = parse_field(line_no, "weight", f[3 + k])?;
        }
        let weights = LossWeights::from_array(values);
        weights
            .validate()
            .map_err(|e| Error::format("history", format!("line {line_no}: {e}")))?;
        let ind = Individual {
            id: parse_field(line_no, "id", f[0])?,
            parent_id: if f[1].is_empty() { None } else { Some(parse_field(line_no, "parent_id", f[1])?) },
            birth_round: parse_field(line_no, "birth_round", f[2])?,
            weights,
            fitness: parse_opt_f64(line_no, "fitness", f[3 + NUM_WEIGHTS])?,
            ari: parse_opt_f64(line_no, "ari", f[4 + NUM_WEIGHTS])?,
        };
        if ind.id != out.len() {
            return Err(Error::format("history", format!("line {line_no}: id {} out of sequence", ind.id)));
        }
        out.push(ind);
    }
    if !saw_header {
        return Err(Error::format("history", "missing header"));
    }
    Ok(out)
}

/// Best-so-far fitness after initialization and after each round, recomputed
/// from a history by replaying elitist truncation.
pub fn replay_best_so_far(individuals: &[Individual], population_size: usize) -> Result<Vec<f64>> {
    if individuals.len() < population_size || population_size == 0 {
        return Err(Error::format("history", "fewer records than the population size"));
    }
    let mut population: Vec<Individual> = individuals[..population_size].to_vec();
    if population.iter().any(|i| i.fitness.is_none()) {
        return Err(Error::format("history", "unevaluated individual"));
    }
    let mut out = vec![best_of(&population)];
    for child in &individuals[population_size..] {
        if child.fitness.is_none() {
            return Err(Error::format("history", "unevaluated individual"));
        }
        commit(&mut population, child);
        out.push(best_of(&population));
    }
    Ok(out)
}

/// Population size of a history: the number of leading parentless records.
pub fn initial_population_size(individuals: &[Individual]) -> usize {
    individuals.iter().take_while(|i| i.parent_id.is_none()).count()
}
