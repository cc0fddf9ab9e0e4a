//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Arguments select criteria by number (`cargo test --test acceptance -- 4 5`);
//! with none, all ten run. The argument `smoke` adds the supplementary
//! task-level checks, which are reported but not counted as criteria. A FAIL line does not change the exit status unless
//! `EVOLOSS_ACCEPTANCE_STRICT=1` is set; harness errors always exit non-zero.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use rand::Rng as _;

use evoloss::autodiff::fd_check;
use evoloss::cluster::{kmeans, nmi};
use evoloss::config::RunConfig;
use evoloss::distill::{distill_loss, DistillSlot};
use evoloss::evolution::{
    evolve, init_population, mutate, read_history, replay_best_so_far, EvolutionConfig, HistoryWriter, StubFitness,
    ClusteringFitness,
};
use evoloss::experiments::{fraction_sweep, random_weights, spearman, sweep_data, Regime};
use evoloss::fitness::{evaluate_fitness, train_with_weights, Corpus, FitnessConfig};
use evoloss::model::{encode, Dims, ModalInput, Modality, Model};
use evoloss::probe::{eval_finetune, eval_linear_probe};
use evoloss::report::parse_heatmap_csv;
use evoloss::rng;
use evoloss::synth::{gen_dataset, DatasetSpec, MultiModalClip};
use evoloss::tasks::{task_loss, LossBuilder};
use evoloss::train::{train, TrainConfig};
use evoloss::weights::{total_loss, ComponentLosses, LossKey, LossWeights, NUM_WEIGHTS};

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 5;
const EQ1_TOL: f64 = 1e-12;
const MUTATION_TRIALS: usize = 10_000;
const PLANTED_SEEDS: u64 = 20;
const PLANTED_ROUNDS: usize = 50;
const PLANTED_TARGET: f64 = 0.9;
const PLANTED_NEEDED: usize = 19;
const WCSS_TOL: f64 = 1e-9;
const TABLE_SEEDS: u64 = 5;
const TABLE_MARGIN: f64 = 0.05;
const TABLE_NEEDED: usize = 4;
const SCRATCH_SLACK: f64 = 0.05;
const DISTILL_STEPS: usize = 300;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Per-seed results of the evolution runs, shared by criteria 6, 7, 8 and 10.
struct Evolved {
    seed: u64,
    cfg: RunConfig,
    corpus: Corpus,
    weights: LossWeights,
    history: PathBuf,
}

struct Ctx {
    dir: tempfile::TempDir,
    workers: usize,
    evolved: Option<Vec<Evolved>>,
}

impl Ctx {
    fn evolved(&mut self) -> Result<&[Evolved]> {
        if self.evolved.is_none() {
            let mut runs = Vec::new();
            for seed in 0..TABLE_SEEDS {
                let t = Instant::now();
                let cfg = RunConfig {
                    seed,
                    ..RunConfig::default()
                };
                let corpus = cfg.corpus()?;
                let fitness = ClusteringFitness {
                    corpus: &corpus,
                    config: cfg.fitness_config(),
                };
                let history = self.dir.path().join(format!("evolved-{seed}.csv"));
                let file = std::fs::File::create(&history)?;
                let mut writer = HistoryWriter::new(std::io::BufWriter::new(file), Some(&cfg.provenance()))?;
                let h = evolve(&cfg.evolution_config(self.workers), &fitness, &mut |i| {
                    writer.append(i).map_err(|e| evoloss::Error::io(&history, e))
                })?;
                drop(writer);
                let best = h.best().context("empty history")?;
                println!(
                    "  evolved seed {seed}: best nmi {:.4} in {:.0?}",
                    best.fitness.unwrap_or(f64::NAN),
                    t.elapsed()
                );
                let weights = best.weights;
                runs.push(Evolved {
                    seed,
                    cfg,
                    corpus,
                    weights,
                    history,
                });
            }
            self.evolved = Some(runs);
        }
        Ok(self.evolved.as_deref().unwrap_or_default())
    }
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_clips: 12,
        classes: 3,
        frames: 5,
        height: 3,
        width: 3,
        audio_len: 8,
        seed,
    }
}

const SMALL_DIMS: Dims = Dims { hidden: 5, embed: 3 };

/// Seeded model with every parameter jittered, so zero biases cannot pin a
/// pre-activation exactly on the relu kink.
fn fd_model(seed: u64) -> Model {
    let mut model = Model::init(&small_spec(seed), SMALL_DIMS, seed);
    let mut r = rng::rng(seed, &[98]);
    for t in model.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
    }
    model
}

fn criterion_1(_: &mut Ctx) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut failures = Vec::new();
    for seed in 0..FD_SEEDS {
        let clips = gen_dataset(&small_spec(seed))?;
        let batch: Vec<&MultiModalClip> = clips.iter().take(6).collect();
        let model = fd_model(seed);
        let w = LossWeights::random(&mut rng::rng(seed, &[99]));
        let mut targets: Vec<Option<LossKey>> = LossKey::ALL.into_iter().map(Some).collect();
        targets.push(None);
        for key in targets {
            let mut b = LossBuilder::new(&model, &batch, &clips, seed, Default::default());
            let id = match key {
                Some(k) => b.loss(k)?,
                None => b.total(&w)?.context("random weights are all zero")?,
            };
            let err = fd_check(b.graph(), id, FD_EPS)?;
            checks += 1;
            worst = worst.max(err);
            if err >= FD_TOL {
                let name = key.map_or("total".to_string(), |k| k.to_string());
                failures.push(format!("{name}@seed{seed}={err:.2e}"));
            }
        }
    }
    Ok(Outcome::new(
        failures.is_empty(),
        format!("{checks} checks, worst rel err {worst:.2e} (tol {FD_TOL:e}){}", list(&failures)),
    ))
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", items.join(", "))
    }
}

fn criterion_2(_: &mut Ctx) -> Result<Outcome> {
    let mut r = rng::rng(2, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let w = LossWeights::random(&mut r);
        let mut c = [0.0; NUM_WEIGHTS];
        c.iter_mut().for_each(|v| *v = r.random_range(0.0..10.0));
        let c = ComponentLosses::from_array(c);
        // independent oracle: reverse-order accumulation over the raw arrays
        let oracle: f64 = (0..NUM_WEIGHTS).rev().map(|i| w.values()[i] * c.values()[i]).sum();
        worst = worst.max((total_loss(&w, &c) - oracle).abs());
    }
    let zero = total_loss(&LossWeights::zeros(), &ComponentLosses::filled(3.5));
    Ok(Outcome::new(
        worst <= EQ1_TOL && zero == 0.0,
        format!("100 pairs, max |diff| {worst:.1e} (tol {EQ1_TOL:e}); zero weights give {zero}"),
    ))
}

fn run_cli(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_evoloss")).args(args).output()?;
    ensure!(
        out.status.success(),
        "evoloss {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn stub_run(dir: &Path, seed: u64, workers: usize) -> Result<PathBuf> {
    let out = dir.join(format!("stub-{seed}-w{workers}"));
    run_cli(&[
        "evolve",
        "--stub-fitness",
        "--seed",
        &seed.to_string(),
        "--workers",
        &workers.to_string(),
        "--out",
        out.to_str().context("non-utf8 path")?,
    ])?;
    Ok(out.join("history.csv"))
}

fn criterion_3(ctx: &mut Ctx) -> Result<Outcome> {
    let mut r = rng::rng(3, &[]);
    let pop = init_population(&EvolutionConfig::default());
    let mut violations = 0;
    for trial in 0..MUTATION_TRIALS {
        let parent = &pop[trial % pop.len()];
        let child = mutate(parent, trial, 1, &mut r);
        let changed = (0..NUM_WEIGHTS)
            .filter(|&i| child.weights.values()[i] != parent.weights.values()[i])
            .count();
        if changed != 1 || child.weights.validate().is_err() {
            violations += 1;
        }
    }

    let mut problems = Vec::new();
    let mut identical = true;
    for seed in 0..3 {
        let one = stub_run(ctx.dir.path(), seed, 1)?;
        let four = stub_run(ctx.dir.path(), seed, 4)?;
        let again = stub_run(&ctx.dir.path().join("again"), seed, 1)?;
        let bytes = std::fs::read(&one)?;
        identical &= bytes == std::fs::read(&four)? && bytes == std::fs::read(&again)?;
        let h = read_history(std::io::BufReader::new(std::fs::File::open(&one)?))?;
        if h.iter().any(|i| i.weights.validate().is_err()) {
            problems.push(format!("seed {seed}: weight outside [0,1]"));
        }
        let best = replay_best_so_far(&h, EvolutionConfig::default().population_size)?;
        if best.windows(2).any(|p| p[1] < p[0]) {
            problems.push(format!("seed {seed}: best-so-far decreased"));
        }
    }
    Ok(Outcome::new(
        violations == 0 && identical && problems.is_empty(),
        format!(
            "{violations} mutation violations in {MUTATION_TRIALS} trials; histories byte-identical across runs and workers 1/4: {identical}{}",
            list(&problems)
        ),
    ))
}

fn criterion_4(_: &mut Ctx) -> Result<Outcome> {
    let mut hits = 0;
    let mut finals = Vec::new();
    for seed in 0..PLANTED_SEEDS {
        let key: LossKey = "RA".parse()?;
        let cfg = EvolutionConfig {
            rounds: PLANTED_ROUNDS,
            seed,
            ..EvolutionConfig::default()
        };
        let h = evolve(&cfg, &StubFitness { key }, &mut |_| Ok(()))?;
        let v = h.best().context("empty history")?.weights[key];
        finals.push(format!("{v:.3}"));
        if v > PLANTED_TARGET {
            hits += 1;
        }
    }
    Ok(Outcome::new(
        hits >= PLANTED_NEEDED,
        format!(
            "{hits}/{PLANTED_SEEDS} seeds above {PLANTED_TARGET} after {PLANTED_ROUNDS} rounds (need {PLANTED_NEEDED}); finals [{}]",
            finals.join(" ")
        ),
    ))
}

fn brute_force_wcss(x: &[f64]) -> f64 {
    let n = x.len();
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << n) - 1 {
        let mut w = 0.0;
        for side in [true, false] {
            let pts: Vec<f64> = (0..n).filter(|&i| (mask >> i & 1 == 1) == side).map(|i| x[i]).collect();
            let m = pts.iter().sum::<f64>() / pts.len() as f64;
            w += pts.iter().map(|p| (p - m) * (p - m)).sum::<f64>();
        }
        best = best.min(w);
    }
    best
}

fn criterion_5(_: &mut Ctx) -> Result<Outcome> {
    let mut r = rng::rng(5, &[]);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-5.0..5.0)).collect();
        let km = kmeans(&evoloss::tensor::Tensor::matrix(6, 1, x.clone())?, 2, inst, 8)?;
        worst = worst.max((km.wcss - brute_force_wcss(&x)).abs());
    }
    let same = nmi(&[0, 0, 1, 1, 2, 2], &[2, 2, 0, 0, 1, 1])?;
    let hand = nmi(&[0, 1, 0, 1], &[0, 0, 1, 1])?;
    Ok(Outcome::new(
        worst <= WCSS_TOL && (same - 1.0).abs() < 1e-12 && hand.abs() < 1e-12,
        format!("20 instances, max wcss gap {worst:.1e}; nmi identical {same}, hand instance {hand}"),
    ))
}

fn probe_after(w: &LossWeights, e: &Evolved) -> Result<f64> {
    let fit = e.cfg.fitness_config();
    let model = train_with_weights(w, &e.corpus.unlabeled, &e.corpus.geometry, &fit)?;
    Ok(eval_linear_probe(
        model.encoder(Modality::Rgb),
        &e.corpus.labeled,
        &e.corpus.test,
        e.corpus.classes(),
        &e.cfg.probe_config(),
    )?)
}

fn criterion_6(ctx: &mut Ctx) -> Result<Outcome> {
    let mut wins = 0;
    let mut rows = Vec::new();
    for e in ctx.evolved()? {
        let fit = e.cfg.fitness_config();
        let evolved = probe_after(&e.weights, e)?;
        let random: Vec<f64> = (0..5)
            .map(|i| probe_after(&random_weights(e.seed, i), e))
            .collect::<Result<_>>()?;
        let random_mean = random.iter().sum::<f64>() / random.len() as f64;
        let init = Model::init(&e.corpus.geometry, fit.dims, fit.init_seed());
        let init_acc = eval_linear_probe(
            init.encoder(Modality::Rgb),
            &e.corpus.labeled,
            &e.corpus.test,
            e.corpus.classes(),
            &e.cfg.probe_config(),
        )?;
        let ok = evolved > random_mean && evolved - random_mean >= TABLE_MARGIN && evolved > init_acc && evolved - init_acc >= TABLE_MARGIN;
        wins += usize::from(ok);
        rows.push(format!(
            "seed {}: evolved {evolved:.3} random {random_mean:.3} init {init_acc:.3}{}",
            e.seed,
            if ok { "" } else { " (miss)" }
        ));
    }
    Ok(Outcome::new(
        wins >= TABLE_NEEDED,
        format!("{wins}/{TABLE_SEEDS} seeds clear both baselines by {TABLE_MARGIN}; {}", rows.join("; ")),
    ))
}

fn criterion_7(ctx: &mut Ctx) -> Result<Outcome> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let (mut half, mut scratch) = (Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for e in ctx.evolved()? {
        let fit = e.cfg.fitness_config();
        let probe = e.cfg.probe_config();
        let fractions = &e.cfg.eval.fractions;
        let model = train_with_weights(&e.weights, &e.corpus.unlabeled, &e.corpus.geometry, &fit)?;
        let sweep = fraction_sweep(&model, &e.corpus, fractions, e.seed, &probe)?;
        for &(f, acc) in &sweep {
            xs.push(f);
            ys.push(acc);
            if f == 0.5 {
                half.push(acc);
            }
        }
        let init = Model::init(&e.corpus.geometry, fit.dims, fit.init_seed());
        let s = eval_finetune(
            init.encoder(Modality::Rgb),
            &e.corpus.labeled,
            &e.corpus.test,
            e.corpus.classes(),
            1.0,
            e.seed,
            &probe,
        )?;
        scratch.push(s);
        let accs: Vec<String> = sweep.iter().map(|(_, a)| format!("{a:.3}")).collect();
        rows.push(format!("seed {}: [{}] scratch {s:.3}", e.seed, accs.join(" ")));
    }
    ensure!(!half.is_empty(), "fraction list must contain 0.5");
    let rho = spearman(&xs, &ys);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (h, s) = (mean(&half), mean(&scratch));
    Ok(Outcome::new(
        rho > 0.0 && h >= s - SCRATCH_SLACK,
        format!(
            "pooled spearman {rho:.3}; mean evolved@0.5 {h:.3} vs scratch@1.0 {s:.3} (slack {SCRATCH_SLACK}); {}",
            rows.join("; ")
        ),
    ))
}

fn criterion_8(ctx: &mut Ctx) -> Result<Outcome> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = Vec::new();
    for e in ctx.evolved()? {
        let fit = e.cfg.fitness_config();
        let sweep = sweep_data(&e.weights, &e.cfg.eval.amounts, &e.corpus, &fit, &e.cfg.probe_config())?;
        let epochs: Vec<_> = sweep.iter().filter(|r| r.regime == Regime::FixedEpochs).collect();
        for r in &epochs {
            xs.push(r.amount as f64);
            ys.push(r.probe_acc);
        }
        let accs: Vec<String> = epochs.iter().map(|r| format!("{:.3}", r.probe_acc)).collect();
        rows.push(format!("seed {}: [{}]", e.seed, accs.join(" ")));
    }
    let rho = spearman(&xs, &ys);
    Ok(Outcome::new(
        rho > 0.0,
        format!("fixed-epochs pooled spearman {rho:.3}; {}", rows.join("; ")),
    ))
}

fn rgb_grads(model: &Model, w: &LossWeights, clips: &[MultiModalClip]) -> Result<Vec<Vec<f64>>> {
    let batch: Vec<&MultiModalClip> = clips.iter().take(8).collect();
    let mut b = LossBuilder::new(model, &batch, clips, 9, Default::default());
    let total = b.total(w)?.context("all weights zero")?;
    let grads = b.graph().backward(total)?;
    let bound = b.bound();
    let mut ids = bound.encoder(Modality::Rgb).params();
    let h = &bound.heads;
    ids.extend([&h.rgb_shuffle.weight, &h.rgb_reverse.weight, &h.rgb_future.weight, &h.rgb_flow.weight]);
    Ok(ids.into_iter().map(|id| grads[id].data().to_vec()).collect())
}

fn perturb_non_rgb(model: &Model, seed: u64) -> Model {
    let mut r = rng::rng(seed, &[77]);
    let mut m = model.clone();
    let mut bump = |t: &mut evoloss::tensor::Tensor| t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
    for modality in [Modality::Audio, Modality::Flow, Modality::Grey] {
        m.encoder_mut(modality).params_mut().into_iter().for_each(&mut bump);
    }
    let h = &mut m.heads;
    for t in [
        &mut h.flow_shuffle.weight,
        &mut h.flow_reverse.weight,
        &mut h.flow_align.main,
        &mut h.flow_align.audio,
        &mut h.grey_colorize.weight,
        &mut h.rgb_align.audio,
    ] {
        bump(t);
    }
    m
}

fn criterion_9(_: &mut Ctx) -> Result<Outcome> {
    let geometry = DatasetSpec {
        n_clips: 400,
        ..DatasetSpec::default()
    };
    let mut shrunk = 0;
    let mut total = 0;
    let mut misses = Vec::new();
    for seed in 0..5 {
        let clips = gen_dataset(&DatasetSpec { seed, ..geometry })?;
        let probe: Vec<&MultiModalClip> = clips.iter().take(64).collect();
        let fit = FitnessConfig {
            base_seed: seed,
            train_steps: DISTILL_STEPS,
            ..FitnessConfig::default()
        };
        for slot in DistillSlot::ALL {
            let mut model = Model::init(&geometry, fit.dims, fit.init_seed());
            let gap = |m: &Model| -> Result<f64> {
                let main = encode(m.encoder(Modality::Rgb), &ModalInput::stack(Modality::Rgb, &probe))?;
                let other = encode(m.encoder(slot.source), &ModalInput::stack(slot.source, &probe))?;
                Ok(distill_loss(&main, &other, slot)?)
            };
            let before = gap(&model)?;
            let mut w = LossWeights::zeros();
            w[LossKey::Distill(slot)] = 1.0;
            train(&mut model, &w, &clips, &fit.train_config())?;
            let after = gap(&model)?;
            total += 1;
            if after < before {
                shrunk += 1;
            } else {
                misses.push(format!("{}@seed{seed}: {before:.4}->{after:.4}", LossKey::Distill(slot)));
            }
        }
    }

    // RA and RE read audio and grey embeddings directly, so they are zeroed here
    let clips = gen_dataset(&small_spec(9))?;
    let mut independent = true;
    let mut coupled_when_cross_tasks_on = true;
    for seed in 0..5 {
        let model = Model::init(&small_spec(9), SMALL_DIMS, seed);
        let other = perturb_non_rgb(&model, seed);
        let mut w = LossWeights::random(&mut rng::rng(seed, &[91]));
        for key in LossKey::ALL.into_iter().filter(|k| k.is_distill()) {
            w[key] = 0.0;
        }
        let with_cross = w;
        w["RA".parse::<LossKey>()?] = 0.0;
        w["RE".parse::<LossKey>()?] = 0.0;
        independent &= rgb_grads(&model, &w, &clips)? == rgb_grads(&other, &w, &clips)?;
        coupled_when_cross_tasks_on &= rgb_grads(&model, &with_cross, &clips)? != rgb_grads(&other, &with_cross, &clips)?;
    }
    Ok(Outcome::new(
        shrunk == total && independent,
        format!(
            "gap reduced in {shrunk}/{total} (slot, seed) runs{}; rgb gradients bitwise independent of non-rgb parameters with distill and RA/RE at 0: {independent} (with RA/RE active they differ: {coupled_when_cross_tasks_on})",
            list(&misses)
        ),
    ))
}

fn check_report(history: &Path, out: &Path) -> Result<Vec<String>> {
    run_cli(&[
        "report",
        "--history",
        history.to_str().context("non-utf8 path")?,
        "--out",
        out.to_str().context("non-utf8 path")?,
    ])?;
    let mut problems = Vec::new();
    let cells = parse_heatmap_csv(&std::fs::read_to_string(out.join("heatmap.csv"))?)?;
    if cells.len() != NUM_WEIGHTS {
        problems.push(format!("{} heatmap cells", cells.len()));
    }
    if cells.iter().any(|(_, v)| !(0.0..=1.0).contains(v)) {
        problems.push("heatmap value outside [0,1]".into());
    }
    let trajectory = std::fs::read_to_string(out.join("trajectory.csv"))?;
    let mut lines = trajectory.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().context("empty trajectory")?.split(',').collect();
    let col = header.iter().position(|h| *h == "best_so_far").context("no best_so_far column")?;
    let best: Vec<f64> = lines
        .map(|l| l.split(',').nth(col).context("short row")?.parse::<f64>().context("bad number"))
        .collect::<Result<_>>()?;
    if best.windows(2).any(|p| p[1] < p[0]) {
        problems.push("best_so_far decreased".into());
    }
    Ok(problems)
}

fn criterion_10(ctx: &mut Ctx) -> Result<Outcome> {
    let mut histories = Vec::new();
    for seed in 0..3 {
        histories.push(stub_run(&ctx.dir.path().join("c10"), seed, 1)?);
    }
    if let Some(runs) = &ctx.evolved {
        histories.extend(runs.iter().map(|e| e.history.clone()));
    }
    let mut problems = Vec::new();
    for (n, h) in histories.iter().enumerate() {
        let out = ctx.dir.path().join(format!("report-{n}"));
        problems.extend(check_report(h, &out)?.into_iter().map(|p| format!("{}: {p}", h.display())));
    }
    Ok(Outcome::new(
        problems.is_empty(),
        format!("{} histories reported{}", histories.len(), list(&problems)),
    ))
}

const SMOKE_BATCH: usize = 256;
const SMOKE_RA_MAX: f64 = 0.5;
const SMOKE_RF_DROP: f64 = 0.3;
const SMOKE_AF_MARGIN: f64 = 0.05;

fn single(k: &str) -> LossWeights {
    let mut w = LossWeights::zeros();
    w[k.parse::<LossKey>().expect("weight key")] = 1.0;
    w
}

/// Loss of `k` on a fixed batch before and after default training on `k` alone.
fn trained_task_loss(k: &str) -> Result<(f64, f64)> {
    let spec = DatasetSpec::default();
    let clips = gen_dataset(&spec)?;
    let batch: Vec<&MultiModalClip> = clips.iter().take(SMOKE_BATCH).collect();
    let key: LossKey = k.parse()?;
    let mut model = Model::init(&spec, Dims::default(), 0);
    let before = task_loss(&model, key, &batch, &clips, 1)?;
    train(&mut model, &single(k), &clips, &TrainConfig::default())?;
    Ok((before, task_loss(&model, key, &batch, &clips, 1)?))
}

fn smoke_checks() -> Result<Vec<(&'static str, bool, String)>> {
    let mut out = Vec::new();
    let (ra0, ra) = trained_task_loss("RA")?;
    out.push(("RA trained loss", ra < SMOKE_RA_MAX, format!("{ra0:.4} -> {ra:.4}, need < {SMOKE_RA_MAX}")));
    let (rf0, rf) = trained_task_loss("RF")?;
    let drop = 1.0 - rf / rf0;
    out.push((
        "RF loss drop",
        drop >= SMOKE_RF_DROP,
        format!("{rf0:.5} -> {rf:.5} ({:.1}%), need >= {:.0}%", drop * 100.0, SMOKE_RF_DROP * 100.0),
    ));
    let cfg = RunConfig::default();
    let corpus = cfg.corpus()?;
    let fit = cfg.fitness_config();
    let mut af = single("RA");
    af["RF".parse::<LossKey>()?] = 1.0;
    let base = evaluate_fitness(&LossWeights::zeros(), &corpus, &fit)?.fitness;
    let got = evaluate_fitness(&af, &corpus, &fit)?.fitness;
    out.push((
        "A+F fitness margin",
        got >= base + SMOKE_AF_MARGIN,
        format!("nmi {got:.4} vs random init {base:.4}, need +{SMOKE_AF_MARGIN}"),
    ));
    Ok(out)
}

type Criterion = fn(&mut Ctx) -> Result<Outcome>;

const CRITERIA: [(u32, &str, Criterion, Duration); 10] = [
    (1, "gradient correctness", criterion_1, Duration::from_secs(60)),
    (2, "weighted-sum contract", criterion_2, Duration::from_secs(10)),
    (3, "evolution mechanics", criterion_3, Duration::from_secs(120)),
    (4, "planted-signal recovery", criterion_4, Duration::from_secs(60)),
    (5, "clustering oracle", criterion_5, Duration::from_secs(10)),
    (6, "evolved vs random loss", criterion_6, Duration::from_secs(30 * 60)),
    (7, "labeled-fraction trend", criterion_7, Duration::from_secs(10 * 60)),
    (8, "unlabeled-amount trend", criterion_8, Duration::from_secs(15 * 60)),
    (9, "distillation effect", criterion_9, Duration::from_secs(120)),
    (10, "report schema", criterion_10, Duration::from_secs(10)),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let selected: BTreeSet<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let smoke = args.iter().any(|a| a == "smoke");
    let run_all = selected.is_empty() && !smoke;
    let strict = std::env::var("EVOLOSS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut ctx = Ctx {
        dir: match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => {
                eprintln!("cannot create scratch directory: {e}");
                return ExitCode::FAILURE;
            }
        },
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        evolved: None,
    };
    let (mut passed, mut failed, mut errors) = (0, 0, 0);
    for (n, name, run, budget) in CRITERIA {
        if !(run_all || selected.contains(&n)) {
            continue;
        }
        // the shared evolution runs are timed under criterion 6
        if matches!(n, 7 | 8) && ctx.evolved.is_none() {
            if let Err(e) = ctx.evolved() {
                println!("criterion {n} ({name}): ERROR {e:#}");
                errors += 1;
                continue;
            }
        }
        let t = Instant::now();
        match run(&mut ctx) {
            Ok(o) => {
                let elapsed = t.elapsed();
                let in_budget = elapsed <= budget;
                let pass = o.pass && in_budget;
                println!(
                    "criterion {n} ({name}): {} [{:.1}s, budget {}s{}] {}",
                    if pass { "PASS" } else { "FAIL" },
                    elapsed.as_secs_f64(),
                    budget.as_secs(),
                    if in_budget { "" } else { ", over budget" },
                    o.detail
                );
                if pass {
                    passed += 1;
                } else {
                    failed += 1;
                }
            }
            Err(e) => {
                println!("criterion {n} ({name}): ERROR {e:#}");
                errors += 1;
            }
        }
    }
    if smoke || run_all {
        match smoke_checks() {
            Ok(checks) => {
                for (name, pass, detail) in checks {
                    println!("smoke ({name}): {} {detail}", if pass { "PASS" } else { "FAIL" });
                }
            }
            Err(e) => {
                println!("smoke: ERROR {e:#}");
                errors += 1;
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {errors} errors");
    if errors > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
