use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csn_core::checkpoint::Checkpoint;
use csn_core::config::{resolve_output, DataSource, RunConfig};
use csn_core::data::{
    build_vocabulary, encode_sets, write_records, CandidateSet, DatasetFormat, RawCandidateSet, CANDIDATES_PER_SET,
};
use csn_core::eval::evaluate;
use csn_core::inspect::{render, selection_view};
use csn_core::pipeline::{
    load_corpus, load_raw, metrics_file, read_splits, run_training, split_file, synthetic_splits, MetricsReport, RawSplits,
    SPLITS, VOCAB_FILE,
};
use csn_core::selection::SelectionLevel;
use csn_core::sweep::{parse_grid, sweep, SweepParam};
use csn_core::CsnError;

#[derive(Parser)]
#[command(name = "csn", version, about = "Content selection network: data, training, evaluation and sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a dataset (or generate a synthetic one) and write its vocabulary.
    Prepare(PrepareArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train one model per grid value and seed and tabulate test metrics.
    Sweep(SweepArgs),
    /// Show which document sentences and words a checkpoint keeps for one set.
    InspectSelection(InspectArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Generate a synthetic corpus instead of reading one.
    #[arg(long, conflicts_with_all = ["format", "input"])]
    synthetic: bool,
    /// Number of synthetic candidate sets.
    #[arg(long, default_value_t = 500)]
    sets: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Raw dataset format: persona, cmudog or records.
    #[arg(long, requires = "input")]
    format: Option<String>,
    /// Directory holding the raw split files.
    #[arg(long = "in", value_name = "DIR")]
    input: Option<PathBuf>,
    /// Output directory (under the output root when relative).
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Run configuration supplying corpus limits and split fractions.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Metrics file; defaults to `metrics_<split>.json` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// gamma or eta.
    #[arg(long)]
    param: String,
    /// Comma-separated values, e.g. 0,0.3,1.0.
    #[arg(long)]
    grid: String,
    /// Comma-separated seeds; defaults to the configuration seed.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index of the candidate set within the split.
    #[arg(long)]
    sample: usize,
    #[arg(long, default_value = "test")]
    split: String,
    /// sentence or word; defaults to the checkpoint's level.
    #[arg(long)]
    level: Option<String>,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<CsnError> for Failure {
    fn from(e: CsnError) -> Self {
        let code = match &e {
            CsnError::Config(_) => 2,
            CsnError::NonFinite(_) | CsnError::GradientCheck(_) | CsnError::Shape(_) => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn require_path(path: &Path) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::usage(format!("{}: no such file or directory", path.display())))
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    require_path(path)?;
    let config = RunConfig::load(path)?;
    if let Some(dir) = &config.data.dir {
        if config.data.source != DataSource::Synthetic {
            require_path(dir)?;
        }
    }
    for p in &config.model.pretrained {
        require_path(p)?;
    }
    Ok(config)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| CsnError::io(path, e).into()
}

fn print_stats(name: &str, sets: &[RawCandidateSet]) {
    let turns: usize = sets.iter().map(|s| s.context.len()).sum();
    let sentences: usize = sets.iter().map(|s| s.document.len()).sum();
    let per = |n: usize| if sets.is_empty() { 0.0 } else { n as f64 / sets.len() as f64 };
    println!(
        "{name}: {} candidate sets, {} samples, {:.2} turns/set, {:.2} sentences/set",
        sets.len(),
        sets.len() * CANDIDATES_PER_SET,
        per(turns),
        per(sentences)
    );
}

fn cmd_prepare(args: PrepareArgs) -> CmdResult {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let splits: RawSplits = if args.synthetic {
        config.data.source = DataSource::Synthetic;
        config.data.sets = args.sets;
        config.data.seed = Some(args.seed);
        config.validate()?;
        synthetic_splits(&config)
    } else {
        let (Some(format), Some(input)) = (&args.format, &args.input) else {
            return Err(Failure::usage("prepare needs --synthetic or --format with --in"));
        };
        let format: DatasetFormat = format.parse()?;
        require_path(input)?;
        for split in SPLITS {
            require_path(&input.join(split_file(format, split)))?;
        }
        read_splits(input, format, &config)?
    };

    let out = resolve_output(&args.out);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    for split in SPLITS {
        let sets = splits.get(split).expect("known split");
        write_records(&out.join(split_file(DatasetFormat::Records, split)), sets)?;
        print_stats(split, sets);
    }
    let vocab = build_vocabulary(&splits.train, config.corpus.min_count, config.corpus.max_vocab)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    println!("vocabulary: {} entries", vocab.size());
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let corpus = load_corpus(&config)?;
    let out = config.resolved_output_dir();
    println!(
        "config {} seed {}: {} train / {} valid / {} test sets, vocabulary {}",
        config.hash(),
        config.seed,
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        corpus.vocab.size()
    );
    let result = run_training(&config, &corpus, &out, |r| {
        println!(
            "epoch {:3} lr {:.3e} loss {:.5} valid R@1 {:.4}{}",
            r.epoch,
            r.learning_rate,
            r.train_loss,
            r.valid_r_at_1,
            if r.improved { " *" } else { "" }
        )
    })?;
    println!("best epoch {}", result.outcome.best_epoch);
    println!("{}", result.valid.summary());
    if let Some(test) = &result.test {
        println!("{}", test.summary());
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// One split of the checkpoint's corpus, encoded with its stored vocabulary.
fn load_split(ck: &Checkpoint, split: &str) -> Result<Vec<CandidateSet>, Failure> {
    let raw = load_raw(&ck.config)?;
    let sets = raw
        .get(split)
        .ok_or_else(|| Failure::usage(format!("unknown split {split:?} (expected train, valid or test)")))?;
    Ok(encode_sets(sets, &ck.vocab, &ck.config.corpus)?)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    require_path(&args.checkpoint)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let sets = load_split(&ck, &args.split)?;
    if sets.is_empty() {
        return Err(CsnError::EmptyCorpus.into());
    }
    let report = MetricsReport::new(&args.split, &evaluate(&ck.model, &sets)?, &ck.config);
    let path = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(metrics_file(&args.split))
    });
    report.write(&path)?;
    println!("{}", report.summary());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CmdResult {
    let mut config = load_config(&args.config)?;
    let param: SweepParam = args.param.parse()?;
    let grid = parse_grid(&args.grid)?;
    let seeds: Vec<u64> = match &args.seeds {
        Some(text) => text
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Failure::usage(format!("bad seed {s:?}"))))
            .collect::<Result<_, _>>()?,
        None => vec![config.seed],
    };
    for &value in &grid {
        let mut probe = config.clone();
        param.apply(&mut probe, value);
        probe.validate()?;
    }
    // Every run sees the same corpus.
    config.data.seed = Some(config.data.seed.unwrap_or(config.seed));
    let corpus = load_corpus(&config)?;
    let out = config.resolved_output_dir().join(format!("sweep_{param}"));
    let table = sweep(&config, &corpus, param, &grid, &seeds, &out, |value, seed, r| {
        println!(
            "{param}={value} seed {seed} epoch {:3} loss {:.5} valid R@1 {:.4}",
            r.epoch, r.train_loss, r.valid_r_at_1
        )
    })?;
    let path = table.write(&out)?;
    print!("{}", table.to_tsv());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CmdResult {
    require_path(&args.checkpoint)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let level = ck.config.selection.level;
    let shown = match args.level.as_deref() {
        None => level,
        Some("sentence") => SelectionLevel::Sentence,
        Some("word") => SelectionLevel::Word,
        Some(other) => return Err(Failure::usage(format!("unknown level {other:?} (expected sentence or word)"))),
    };
    if shown == SelectionLevel::Word && level == SelectionLevel::Sentence {
        return Err(Failure::usage("checkpoint selects whole sentences; word-level view unavailable"));
    }
    let sets = load_split(&ck, &args.split)?;
    let set = sets.get(args.sample).ok_or_else(|| {
        Failure::usage(format!(
            "sample {} out of range ({} sets in {})",
            args.sample,
            sets.len(),
            args.split
        ))
    })?;
    let mut views = selection_view(&ck.model, &ck.vocab, set)?;
    if shown == SelectionLevel::Sentence {
        for v in &mut views {
            v.words.clear();
        }
    }
    println!(
        "{} set {} level {} gamma {} eta {}",
        args.split, args.sample, level_name(level), ck.config.selection.gamma, ck.config.selection.eta
    );
    print!("{}", render(&views, &ck.vocab, set));
    Ok(())
}

fn level_name(level: SelectionLevel) -> &'static str {
    match level {
        SelectionLevel::Sentence => "sentence",
        SelectionLevel::Word => "word",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::InspectSelection(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
