use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::info;
use muse::checkpoint::{load_checkpoint, save_checkpoint};
use muse::corpus::{expand_all, parse_log, read_sessions, write_log, write_sessions, Session, SplitSpec, Vocabulary};
use muse::eval::{evaluate_with, popularity_baseline, unique_transition_rate, MetricsReport, DEFAULT_KS};
use muse::pipeline::prepare;
use muse::rng::stream_for_key;
use muse::synth::{generate, SynthConfig};
use muse::trainer::{fit, TrainConfig};
use muse::transitions::{LogMode, NormalizedTransitions};
use muse::{augment, Params};

#[derive(Parser, Debug)]
#[command(name = "muse", version, about = "Shuffle-aware session recommender pipeline")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic listening log.
    Synth(SynthArgs),
    /// Turn a listening log into split session files and a vocabulary.
    Ingest(IngestArgs),
    /// Session counts, shuffle share and unique-transition rates.
    Stats(StatsArgs),
    /// Write an augmented copy of a session file.
    Augment(AugmentArgs),
    /// Train a model and write a checkpoint plus a per-epoch CSV.
    Train(TrainArgs),
    /// Score test sessions and write metrics as CSV.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_tracks: usize,
    #[arg(long, default_value_t = 20)]
    n_clusters: usize,
    #[arg(long, default_value_t = 20_000)]
    n_sessions: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0.4)]
    shuffle_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    skip_prob_shuffle: f64,
    #[arg(long, default_value_t = 0.9)]
    within_cluster_prob: f64,
    #[arg(long, default_value_t = 5)]
    n_successors: usize,
    #[arg(long, default_value_t = 0.8)]
    successor_mass: f64,
    #[arg(long, default_value_t = 5)]
    n_days: usize,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    log: PathBuf,
    /// Receives train.tsv, valid.tsv, test.tsv and vocab.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Inclusive day range `a-b` or a single day.
    #[arg(long, default_value = "0-2", value_parser = parse_days)]
    train_days: RangeInclusive<i64>,
    #[arg(long, default_value = "3", value_parser = parse_days)]
    valid_days: RangeInclusive<i64>,
    #[arg(long, default_value = "4", value_parser = parse_days)]
    test_days: RangeInclusive<i64>,
    #[arg(long, default_value_t = muse::corpus::MIN_COUNT)]
    min_count: u64,
    #[arg(long, default_value_t = muse::corpus::MAX_LEN)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    sessions: PathBuf,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sessions the transition tables are built from (default: the input).
    #[arg(long)]
    transitions_from: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = muse::corpus::MAX_LEN)]
    max_len: usize,
    #[arg(long, default_value = "log1p")]
    log_mode: LogMode,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` lines; flags below override them.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `ingest`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV (default: the checkpoint path with a .csv extension).
    #[arg(long)]
    log_csv: Option<PathBuf>,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("scorer").required(true).args(["model", "popularity_from"])))]
struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score by label frequency in this training session file instead.
    #[arg(long)]
    popularity_from: Option<PathBuf>,
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
}

fn parse_days(s: &str) -> Result<RangeInclusive<i64>, String> {
    let bad = || format!("expected a day or a range `a-b`, got `{s}`");
    match s.split_once('-') {
        Some((a, b)) => Ok(a.trim().parse().map_err(|_| bad())?..=b.trim().parse().map_err(|_| bad())?),
        None => {
            let d = s.trim().parse().map_err(|_| bad())?;
            Ok(d..=d)
        }
    }
}

/// A data or validation failure; exits with status 2.
#[derive(Debug)]
struct Failure(String);

impl Failure {
    fn at(path: &Path, err: impl std::fmt::Display) -> Self {
        Failure(format!("{}: {err}", path.display()))
    }
}

impl From<muse::Error> for Failure {
    fn from(e: muse::Error) -> Self {
        Failure(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::at(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::at(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::at(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> muse::Result<()>) -> Outcome {
    let mut w = create(path)?;
    f(&mut w).map_err(|e| Failure::at(path, e))?;
    w.flush().map_err(|e| Failure::at(path, e))
}

fn load_sessions(path: &Path) -> Result<Vec<Session>, Failure> {
    read_sessions(open(path)?).map_err(|e| Failure::at(path, e))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    Vocabulary::read_tsv(open(path)?).map_err(|e| Failure::at(path, e))
}

fn dim_of(sessions: &[&[Session]]) -> usize {
    sessions.iter().flat_map(|s| s.iter()).flat_map(|s| s.tracks.iter()).map(|&t| t as usize + 1).max().unwrap_or(0)
}

fn synth(a: SynthArgs, seed: u64) -> Outcome {
    let cfg = SynthConfig {
        n_tracks: a.n_tracks,
        n_clusters: a.n_clusters,
        n_sessions: a.n_sessions,
        session_len_range: (a.min_len, a.max_len),
        shuffle_fraction: a.shuffle_fraction,
        skip_prob_shuffle: a.skip_prob_shuffle,
        within_cluster_prob: a.within_cluster_prob,
        n_successors: a.n_successors,
        successor_mass: a.successor_mass,
        n_days: a.n_days,
        seed,
    };
    let (_, sessions) = generate(&cfg)?;
    write_file(&a.out, |w| write_log(w, &sessions))?;
    info!("wrote {} sessions to {}", sessions.len(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Outcome {
    let raw = parse_log(open(&a.log)?).map_err(|e| Failure::at(&a.log, e))?;
    let split = SplitSpec::new(a.train_days, a.valid_days, a.test_days)?;
    let ds = prepare(raw, &split, a.min_count, a.max_len);
    if ds.vocab.is_empty() {
        return Err(Failure::at(&a.log, "no track reaches the minimum count in the training days"));
    }
    write_file(&a.out_dir.join("vocab.tsv"), |w| ds.vocab.write_tsv(w))?;
    for (name, s) in [("train", &ds.sessions.train), ("valid", &ds.sessions.valid), ("test", &ds.sessions.test)] {
        write_file(&a.out_dir.join(format!("{name}.tsv")), |w| write_sessions(w, s))?;
        println!("{name}\t{} sessions", s.len());
    }
    println!("vocab\t{} tracks", ds.vocab.len());
    Ok(())
}

fn stats(a: StatsArgs) -> Outcome {
    let sessions = load_sessions(&a.sessions)?;
    let shuffle: Vec<&Session> = sessions.iter().filter(|s| s.shuffle).collect();
    let plain: Vec<&Session> = sessions.iter().filter(|s| !s.shuffle).collect();
    let rate = |s: &[&Session]| {
        let tracks: Vec<&[u32]> = s.iter().map(|x| x.tracks.as_slice()).collect();
        unique_transition_rate(&tracks).map(|r| format!("{r:.2}")).unwrap_or_else(|_| "-".into())
    };
    let share = if sessions.is_empty() { 0.0 } else { shuffle.len() as f64 / sessions.len() as f64 };
    let all: Vec<&Session> = sessions.iter().collect();
    println!("segment\tsessions\tunique_transition_rate_pct");
    println!("all\t{}\t{}", all.len(), rate(&all));
    println!("shuffle\t{}\t{}", shuffle.len(), rate(&shuffle));
    println!("non_shuffle\t{}\t{}", plain.len(), rate(&plain));
    println!("shuffle_proportion\t{share:.4}");
    Ok(())
}

fn augment_cmd(a: AugmentArgs, seed: u64) -> Outcome {
    use rayon::prelude::*;
    let sessions = load_sessions(&a.sessions)?;
    let source = match &a.transitions_from {
        Some(p) => load_sessions(p)?,
        None => sessions.clone(),
    };
    let dim = dim_of(&[&sessions, &source]);
    let trans: NormalizedTransitions<f64> = NormalizedTransitions::from_sessions(&source, dim, a.log_mode)?;
    let cfg = augment::AugmentConfig { gamma: a.gamma, max_len: a.max_len, ..Default::default() };
    augment::validate_gamma(cfg.gamma)?;
    let out: Vec<Session> = sessions
        .par_iter()
        .map(|s| {
            let mut rng = stream_for_key(seed, &s.id);
            augment::augment_tracks(&s.tracks, s.shuffle, &trans, &cfg, &mut rng).map(|t| s.with_tracks(t))
        })
        .collect::<muse::Result<_>>()?;
    write_file(&a.out, |w| write_sessions(w, &out))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    let mut s = String::new();
    for line in open(path)?.lines() {
        s.push_str(&line.map_err(|e| Failure::at(path, e))?);
        s.push('\n');
    }
    Ok(s)
}

fn train(a: TrainArgs, seed: Option<u64>) -> Outcome {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_kv(&read_text(path)?).map_err(|e| Failure::at(path, e))?;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags = [
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("learning_rate", a.learning_rate.map(|v| v.to_string())),
        ("hidden_dim", a.hidden_dim.map(|v| v.to_string())),
        ("seed", seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;

    let vocab = load_vocab(&a.data.join("vocab.tsv"))?;
    let train_sessions = load_sessions(&a.data.join("train.tsv"))?;
    let train = expand_all(&train_sessions);
    let valid_path = a.data.join("valid.tsv");
    let valid = if valid_path.exists() { expand_all(&load_sessions(&valid_path)?) } else { Vec::new() };
    let trans = NormalizedTransitions::<f64>::from_sessions(&train_sessions, vocab.len(), cfg.log_mode)?;
    info!("training on {} instances, {} validation, {} tracks", train.len(), valid.len(), vocab.len());
    let (params, report) = fit(&train, &valid, &trans, vocab.len(), &cfg)?;
    save_checkpoint(&params, &a.out).map_err(|e| Failure::at(&a.out, e))?;
    let csv = a.log_csv.unwrap_or_else(|| a.out.with_extension("csv"));
    write_file(&csv, |w| report.write_csv(w))?;
    print!("{report}");
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let sessions = load_sessions(&a.sessions)?;
    let test = expand_all(&sessions);
    let report: MetricsReport = match (&a.model, &a.popularity_from) {
        (Some(path), _) => {
            let params: Params = load_checkpoint(path).map_err(|e| Failure::at(path, e))?;
            evaluate_with(&test, &a.ks, |inst| params.score(&inst.prefix))?
        }
        (None, Some(path)) => {
            let train = load_sessions(path)?;
            let dim = dim_of(&[&train, &sessions]);
            popularity_baseline(&expand_all(&train), dim)?.evaluate(&test, &a.ks)?
        }
        (None, None) => unreachable!("clap requires one scorer"),
    };
    write_file(&a.out, |w| report.write_csv(w))?;
    print!("{report}");
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Ingest(a) => ingest(a),
        Command::Stats(a) => stats(a),
        Command::Augment(a) => augment_cmd(a, seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            let _ = writeln!(io::stderr(), "error: {msg}");
            ExitCode::from(2)
        }
    }
}
