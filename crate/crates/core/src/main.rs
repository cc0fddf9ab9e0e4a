use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use evoloss::config::RunConfig;
use evoloss::evolution::{read_history, resume, ClusteringFitness, Fitness, HistoryWriter, StubFitness};
use evoloss::experiments::{eval_random_init, eval_random_loss, eval_weights, sweep_data, SweepRow};
use evoloss::probe::EvalReport;
use evoloss::report;
use evoloss::synth::write_dataset;
use evoloss::weights::{LossKey, LossWeights};

#[derive(Parser)]
#[command(name = "evoloss", version, about = "Evolve weightings of self-supervised multi-modal losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolutionary search.
    Evolve {
        #[command(flatten)]
        common: Common,
        /// Parallel fitness evaluations; does not change any output.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Use f(w) = w[key] instead of training.
        #[arg(long)]
        stub_fitness: bool,
        #[arg(long, default_value = "RA")]
        stub_key: String,
        /// Continue from the history file in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train with given weights and run all evaluation protocols.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Weights file in canonical `KEY = value` form.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also report the mean over N random weight vectors.
        #[arg(long)]
        random_weights: Option<usize>,
    },
    /// Emit trajectory, heatmap and fitness-curve files from a history.
    Report {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe accuracy versus amount of unlabeled data.
    SweepData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated clip counts; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        amounts: Option<Vec<usize>>,
    },
    /// Export a generated split in the binary dataset format.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Split::Unlabeled)]
        split: Split,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Unlabeled,
    Labeled,
    Test,
}

/// Errors attributable to the invocation rather than to the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!(UsageError(e.to_string()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        return 2;
    }
    match err.downcast_ref::<evoloss::Error>() {
        Some(
            evoloss::Error::Config(_)
            | evoloss::Error::InvalidWeights(_)
            | evoloss::Error::InvalidSpec(_)
            | evoloss::Error::Format { .. },
        ) => 2,
        _ => 3,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_weights(path: &Path) -> Result<LossWeights> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    LossWeights::parse_canonical(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_evolve(common: &Common, workers: usize, stub: bool, stub_key: &str, resume_run: bool) -> Result<()> {
    let cfg = load_config(common)?;
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let key: LossKey = stub_key.parse().map_err(usage)?;
    create_out(&cfg.out)?;
    let history_path = cfg.out.join("history.csv");
    let prior = if resume_run {
        let f = File::open(&history_path).map_err(|e| usage(format!("cannot resume from {}: {e}", history_path.display())))?;
        read_history(BufReader::new(f))?
    } else {
        Vec::new()
    };

    let provenance = cfg.provenance();
    let file = File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?;
    let mut writer = HistoryWriter::new(BufWriter::new(file), Some(&provenance))?;
    for ind in &prior {
        writer.append(ind)?;
    }

    let ecfg = cfg.evolution_config(workers);
    let corpus;
    let stub_fitness = StubFitness { key };
    let clustering;
    let fitness: &dyn Fitness = if stub {
        &stub_fitness
    } else {
        corpus = cfg.corpus()?;
        clustering = ClusteringFitness {
            corpus: &corpus,
            config: cfg.fitness_config(),
        };
        &clustering
    };
    let history = resume(&ecfg, fitness, &prior, &mut |ind| {
        writer.append(ind).map_err(|e| evoloss::Error::io(&history_path, e))
    })?;
    drop(writer);

    let best = history.best().ok_or_else(|| anyhow!("empty history"))?;
    write_file(&cfg.out.join("best_weights.txt"), &best.weights.to_canonical_string())?;
    let summary = report::summarize(&history.individuals)?;
    write_file(
        &cfg.out.join("fitness_curve.csv"),
        &report::fitness_curve_csv(&summary, Some(&provenance)),
    )?;
    eprintln!(
        "evolved {} rounds; best fitness {} (id {})",
        ecfg.rounds,
        best.fitness.unwrap_or(f64::NAN),
        best.id
    );
    Ok(())
}

fn cmd_eval(common: &Common, weights: Option<&Path>, random: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    if weights.is_none() && random.is_none() {
        return Err(usage("eval needs --weights, --random-weights, or both"));
    }
    if random == Some(0) {
        return Err(usage("--random-weights must be at least 1"));
    }
    let w = weights.map(load_weights).transpose()?;
    create_out(&cfg.out)?;
    let corpus = cfg.corpus()?;
    let fit = cfg.fitness_config();
    let probe = cfg.probe_config();
    let fraction = cfg.eval.finetune_fraction;

    let mut rows: Vec<EvalReport> = vec![eval_random_init(&corpus, &fit, &probe, fraction)?];
    if let Some(n) = random {
        rows.push(eval_random_loss(n, &corpus, &fit, &probe, fraction)?);
    }
    if let Some(w) = &w {
        rows.push(eval_weights("Weights", w, &corpus, &fit, &probe, fraction)?);
    }
    let mut csv = format!("# {}\n{}\n", cfg.provenance(), EvalReport::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    write_file(&cfg.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_report(history: &Path, out: &Path) -> Result<()> {
    let f = File::open(history).map_err(|e| usage(format!("cannot read {}: {e}", history.display())))?;
    let text = std::io::read_to_string(f).map_err(|e| usage(format!("cannot read {}: {e}", history.display())))?;
    let individuals = read_history(text.as_bytes())?;
    let comment = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .map(str::to_string)
        .unwrap_or_else(|| format!("version={}", evoloss::config::VERSION));
    let summary = report::summarize(&individuals)?;
    let last = summary.last().expect("at least the initial round");
    create_out(out)?;
    write_file(&out.join("trajectory.csv"), &report::trajectory_csv(&summary, Some(&comment)))?;
    write_file(&out.join("fitness_curve.csv"), &report::fitness_curve_csv(&summary, Some(&comment)))?;
    write_file(&out.join("heatmap.csv"), &report::heatmap_csv(&last.best.weights, Some(&comment)))?;
    write_file(&out.join("heatmap.svg"), &report::heatmap_svg(&last.best.weights))?;
    Ok(())
}

fn cmd_sweep_data(common: &Common, weights: &Path, amounts: Option<&[usize]>) -> Result<()> {
    let cfg = load_config(common)?;
    let w = load_weights(weights)?;
    let amounts = amounts.map(<[usize]>::to_vec).unwrap_or_else(|| cfg.eval.amounts.clone());
    let problems = evoloss::config::amount_problems(&amounts, cfg.dataset.n_unlabeled);
    if !problems.is_empty() {
        return Err(usage(problems.join("; ")));
    }
    create_out(&cfg.out)?;
    let corpus = cfg.corpus()?;
    let rows = sweep_data(&w, &amounts, &corpus, &cfg.fitness_config(), &cfg.probe_config())?;
    let mut csv = format!("# {}\n{}\n", cfg.provenance(), SweepRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    write_file(&cfg.out.join("sweep_data.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gen_data(common: &Common, split: Split) -> Result<()> {
    let cfg = load_config(common)?;
    let corpus = cfg.corpus()?;
    let (name, clips, index) = match split {
        Split::Unlabeled => ("unlabeled", &corpus.unlabeled, 0),
        Split::Labeled => ("labeled", &corpus.labeled, 1),
        Split::Test => ("test", &corpus.test, 2),
    };
    let spec = evoloss::fitness::Corpus::split_spec(&corpus.geometry, clips.len(), cfg.seed, index);
    create_out(&cfg.out)?;
    let path = cfg.out.join(format!("{name}.evml"));
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_dataset(&mut w, &spec, clips).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    eprintln!("wrote {} clips to {}", clips.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Evolve {
            common,
            workers,
            stub_fitness,
            stub_key,
            resume,
        } => cmd_evolve(&common, workers, stub_fitness, &stub_key, resume),
        Command::Eval {
            common,
            weights,
            random_weights,
        } => cmd_eval(&common, weights.as_deref(), random_weights),
        Command::Report { history, out } => cmd_report(&history, &out),
        Command::SweepData {
            common,
            weights,
            amounts,
        } => cmd_sweep_data(&common, &weights, amounts.as_deref()),
        Command::GenData { common, split } => cmd_gen_data(&common, split),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
