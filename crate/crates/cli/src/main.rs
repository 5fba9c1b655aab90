//! `memotion` command-line tool.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memotion::checkpoint::{load_checkpoint, CheckpointError};
use memotion::config::FlatConfig;
use memotion::dataset::{
    class_distribution, load_corpus, DatasetError, Task, TaskHead, TaskSchema,
};
use memotion::embeddings::{build_vocab, word_list, EmbeddingError};
use memotion::models::{Architecture, ModelError};
use memotion::pipeline::{
    evaluate_files, predict_corpus, rerun_manifest, run_gridsearch, run_train, write_predictions,
    PipelineError, RunManifest, RunPaths, TrainRequest,
};
use memotion::synth::{synthetic_corpus, SyntheticConfig};
use memotion::textnorm::{ContractionDict, Normalizer, TextNormError};
use memotion::training::{OptimizerKind, TrainError};

/// Environment variable naming the directory relative input paths fall back to.
const DATA_DIR_VAR: &str = "MEMOTION_DATA_DIR";

mod exit {
    pub const BAD_ARGS: u8 = 2;
    pub const MISSING_INPUT: u8 = 3;
    pub const SCHEMA: u8 = 4;
    pub const NUMERIC: u8 = 5;
    pub const LABEL_MISMATCH: u8 = 6;
}

#[derive(Parser)]
#[command(
    name = "memotion",
    version,
    about = "Multimodal meme sentiment toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize caption lines from stdin, one token line per input line.
    Normalize {
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Word list (first token of each line) consulted when collapsing elongations.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Class histograms of a labeled corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "a")]
        task: Task,
        #[arg(long)]
        json: bool,
    },
    /// Write the vocabulary of a corpus, one token per line in index order.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model for one task head.
    Train(TrainArgs),
    /// Grid search over layers, epochs and learning rate.
    Gridsearch {
        #[command(flatten)]
        train: TrainArgs,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// JSON table of every cell's dev scores.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Predict labels for every meme of a corpus.
    Predict {
        /// One checkpoint per head; repeat for several heads.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        image_embeddings: Option<PathBuf>,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic corpus (`corpus.csv`) and image file (`images.memb`).
    Synth {
        #[arg(long, default_value_t = 60)]
        records: usize,
        #[arg(long, default_value_t = 2048)]
        image_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a prediction file against gold labels.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        task: Task,
        /// Leave the motivational subtask out of the task B/C average.
        #[arg(long)]
        exclude_motivational: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Re-run the training described by a manifest; other inputs are ignored.
    #[arg(long, conflicts_with_all = ["corpus", "task", "arch"])]
    from_manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_manifest")]
    corpus: Option<PathBuf>,
    /// Task head: a, b-humour, b-sarcasm, b-offense, b-motivational, c-humour, …
    #[arg(long, required_unless_present = "from_manifest")]
    task: Option<TaskHead>,
    /// bilstm, mnn1 or mnn2.
    #[arg(long, required_unless_present = "from_manifest")]
    arch: Option<Architecture>,
    /// Semantic word vectors (`token v1 … vd`).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Sentiment-specific word vectors for mnn2.
    #[arg(long)]
    sentiment_embeddings: Option<PathBuf>,
    /// MEMB image-embedding file.
    #[arg(long)]
    image_embeddings: Option<PathBuf>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    no_oversample: bool,
    /// Checkpoint path; report and manifest are written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    quiet: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn dataset_code(e: &DatasetError) -> u8 {
    match e {
        DatasetError::Csv { source, .. } if source.is_io_error() => exit::MISSING_INPUT,
        DatasetError::EmptyCorpus { .. } => exit::LABEL_MISMATCH,
        _ => exit::SCHEMA,
    }
}

fn embedding_code(e: &EmbeddingError) -> u8 {
    match e {
        EmbeddingError::UnreadableFile { .. } => exit::MISSING_INPUT,
        EmbeddingError::NonFinite => exit::NUMERIC,
        _ => exit::SCHEMA,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::MissingInput { .. }
            | PipelineError::MissingModality(_)
            | PipelineError::Io { .. } => exit::MISSING_INPUT,
            PipelineError::Dataset(d) => dataset_code(d),
            PipelineError::Embedding(d) => embedding_code(d),
            PipelineError::TextNorm(TextNormError::Io { .. }) => exit::MISSING_INPUT,
            PipelineError::TextNorm(_) => exit::SCHEMA,
            PipelineError::LabelMismatch { .. } => exit::LABEL_MISMATCH,
            PipelineError::Train(TrainError::NonFiniteLoss { .. }) => exit::NUMERIC,
            PipelineError::Train(TrainError::LabelOutOfRange { .. }) => exit::LABEL_MISMATCH,
            PipelineError::Train(_) | PipelineError::Model(_) | PipelineError::Config(_) => {
                exit::BAD_ARGS
            }
            PipelineError::Checkpoint(CheckpointError::Io { .. }) => exit::MISSING_INPUT,
            PipelineError::Checkpoint(CheckpointError::Model(ModelError::Autograd(_))) => {
                exit::NUMERIC
            }
            PipelineError::Checkpoint(_) => exit::SCHEMA,
            PipelineError::Manifest(_)
            | PipelineError::DigestMismatch { .. }
            | PipelineError::Predictions(_)
            | PipelineError::Metrics(_) => exit::SCHEMA,
        };
        Failure::new(code, e.to_string())
    }
}

/// Relative paths that do not exist are looked up under `$MEMOTION_DATA_DIR`.
fn resolve(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(dir) = std::env::var_os(DATA_DIR_VAR) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

fn resolve_opt(path: &Option<PathBuf>) -> Option<PathBuf> {
    path.as_deref().map(resolve)
}

fn load_dict(path: Option<&Path>) -> Result<ContractionDict, Failure> {
    match path {
        None => Ok(ContractionDict::builtin()),
        Some(p) => ContractionDict::load(p).map_err(|e| PipelineError::from(e).into()),
    }
}

fn io_failure(what: &str, e: std::io::Error) -> Failure {
    Failure::new(exit::MISSING_INPUT, format!("{what}: {e}"))
}

fn cmd_normalize(dict: Option<PathBuf>, vocab: Option<PathBuf>) -> Result<(), Failure> {
    let dict = load_dict(resolve_opt(&dict).as_deref())?;
    let vocab = match resolve_opt(&vocab) {
        Some(p) => Some(word_list(&p).map_err(PipelineError::from)?),
        None => None,
    };
    let norm = Normalizer::new(dict, vocab);
    let stdin = std::io::stdin();
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| io_failure("stdin", e))?;
        writeln!(out, "{}", norm.normalize(&line).join()).map_err(|e| io_failure("stdout", e))?;
    }
    out.flush().map_err(|e| io_failure("stdout", e))
}

fn cmd_stats(corpus: PathBuf, task: Task, json: bool) -> Result<(), Failure> {
    let corpus = resolve(&corpus);
    if !corpus.is_file() {
        return Err(PipelineError::MissingInput {
            role: "corpus",
            path: corpus.display().to_string(),
        }
        .into());
    }
    let loaded = load_corpus(&corpus, TaskSchema::for_task(task)).map_err(PipelineError::from)?;
    let histograms: Vec<_> = task
        .heads()
        .iter()
        .map(|&h| class_distribution(&loaded.records, h))
        .collect();
    if json {
        let value = serde_json::json!({
            "records": loaded.records.len(),
            "skipped": loaded.skipped,
            "heads": histograms,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&value).expect("stats serialize")
        );
        return Ok(());
    }
    println!(
        "records: {} (skipped {})",
        loaded.records.len(),
        loaded.skipped.len()
    );
    for s in &loaded.skipped {
        println!("  skipped line {} ({}): {}", s.line, s.id, s.reason);
    }
    for h in &histograms {
        println!("{}:", h.head);
        for (name, count) in h.classes.iter().zip(&h.counts) {
            println!("  {name:<20} {count}");
        }
    }
    Ok(())
}

fn cmd_build_vocab(
    corpus: PathBuf,
    min_count: usize,
    dict: Option<PathBuf>,
    out: PathBuf,
) -> Result<(), Failure> {
    let corpus = resolve(&corpus);
    if !corpus.is_file() {
        return Err(PipelineError::MissingInput {
            role: "corpus",
            path: corpus.display().to_string(),
        }
        .into());
    }
    let norm = Normalizer::new(load_dict(resolve_opt(&dict).as_deref())?, None);
    let records = load_corpus(&corpus, TaskSchema::UNLABELED)
        .map_err(PipelineError::from)?
        .records;
    let texts: Vec<_> = records
        .iter()
        .map(|r| norm.normalize(&r.description))
        .collect();
    let vocab = build_vocab(&texts, min_count.max(1));
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    std::fs::write(&out, text).map_err(|e| io_failure(&out.display().to_string(), e))?;
    eprintln!("{} tokens (digest {})", vocab.len(), vocab.digest());
    Ok(())
}

fn train_request(a: &TrainArgs) -> Result<TrainRequest, Failure> {
    let corpus = resolve(a.corpus.as_deref().expect("required by clap"));
    let mut req = TrainRequest::new(
        corpus,
        a.arch.expect("required by clap"),
        a.task.expect("required by clap"),
        a.seed,
    );
    req.embeddings = resolve_opt(&a.embeddings);
    req.sentiment_embeddings = resolve_opt(&a.sentiment_embeddings);
    req.image_embeddings = resolve_opt(&a.image_embeddings);
    req.dict = resolve_opt(&a.dict);
    if let Some(path) = resolve_opt(&a.config) {
        let c = FlatConfig::load(&path).map_err(|e| {
            let code = match e {
                memotion::config::ConfigError::Io { .. } => exit::MISSING_INPUT,
                _ => exit::BAD_ARGS,
            };
            Failure::new(code, e.to_string())
        })?;
        req.apply_config(&c)?;
    }
    if let Some(v) = a.epochs {
        req.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        req.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        req.train.learning_rate = v;
    }
    if let Some(v) = a.optimizer {
        req.train.optimizer = v;
    }
    if a.no_oversample {
        req.train.oversample = false;
    }
    Ok(req)
}

fn default_out(a: &TrainArgs) -> PathBuf {
    a.out.clone().unwrap_or_else(|| {
        let head = a.task.map_or("model".to_string(), |h| h.to_string());
        let arch = a.arch.map_or("model", |a| a.name());
        PathBuf::from(format!("{arch}-{head}.mmck"))
    })
}

fn print_epoch(quiet: bool) -> impl FnMut(&memotion::training::EpochStats) {
    move |s| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.5}  dev macro-F1 {:.4}  micro-F1 {:.4}",
                s.epoch, s.train_loss, s.dev_macro_f1, s.dev_micro_f1
            );
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let run = match &a.from_manifest {
        Some(path) => {
            let manifest = RunManifest::load(resolve(path))?;
            let out = a.out.as_ref().map(RunPaths::beside);
            rerun_manifest(&manifest, out.as_ref())?
        }
        None => {
            let req = train_request(&a)?;
            let paths = RunPaths::beside(default_out(&a));
            run_train(&req, &paths, print_epoch(a.quiet))?
        }
    };
    if run.missing_images > 0 {
        eprintln!(
            "warning: {} memes had no image embedding and used the zero vector",
            run.missing_images
        );
    }
    let r = &run.report;
    if a.json {
        let value = serde_json::json!({
            "checkpoint": run.manifest.artifacts.checkpoint,
            "report": r,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&value).expect("report serializes")
        );
    } else {
        println!(
            "best epoch {} of {}: dev macro-F1 {:.4}, micro-F1 {:.4} -> {}",
            r.best_epoch,
            r.train_loss.len(),
            r.best_dev_macro_f1(),
            r.best_dev_micro_f1(),
            run.manifest.artifacts.checkpoint
        );
    }
    Ok(())
}

fn cmd_gridsearch(
    a: TrainArgs,
    threads: Option<usize>,
    table: Option<PathBuf>,
) -> Result<(), Failure> {
    if a.from_manifest.is_some() {
        return Err(Failure::new(
            exit::BAD_ARGS,
            "gridsearch does not take --from-manifest",
        ));
    }
    let req = train_request(&a)?;
    let checkpoint = default_out(&a);
    let table = table.unwrap_or_else(|| checkpoint.with_extension("grid.json"));
    let pool = rayon_pool(threads)?;
    let run = pool.install(|| run_gridsearch(&req, &checkpoint, &table))?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&run).expect("grid serializes")
        );
        return Ok(());
    }
    println!(
        "{:>4} {:>6} {:>6} {:>10} {:>10} {:>6}",
        "cell", "layers", "epochs", "lr", "macro-F1", "best"
    );
    for r in &run.results {
        println!(
            "{:>4} {:>6} {:>6} {:>10} {:>10.4} {:>6}",
            r.cell.index,
            r.cell.lstm_layers,
            r.cell.epochs,
            r.cell.learning_rate,
            r.dev_macro_f1,
            r.best_epoch
        );
    }
    println!("selected cell {} -> {}", run.best, checkpoint.display());
    Ok(())
}

fn rayon_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::new(exit::BAD_ARGS, "--threads must be positive"));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Failure::new(exit::BAD_ARGS, e.to_string()))
}

fn cmd_predict(
    checkpoints: Vec<PathBuf>,
    corpus: PathBuf,
    image_embeddings: Option<PathBuf>,
    dict: Option<PathBuf>,
    out: PathBuf,
) -> Result<(), Failure> {
    let models = checkpoints
        .iter()
        .map(|p| load_checkpoint(resolve(p)).map_err(PipelineError::from))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = predict_corpus(
        &models,
        &resolve(&corpus),
        resolve_opt(&image_embeddings).as_deref(),
        resolve_opt(&dict).as_deref(),
    )?;
    write_predictions(&rows, &out)?;
    eprintln!("{} predictions -> {}", rows.len(), out.display());
    Ok(())
}

fn cmd_evaluate(
    gold: PathBuf,
    pred: PathBuf,
    task: Task,
    exclude_motivational: bool,
    json: bool,
) -> Result<(), Failure> {
    let ev = evaluate_files(&resolve(&gold), &resolve(&pred), task, exclude_motivational)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&ev).expect("evaluation serializes")
        );
        return Ok(());
    }
    for h in &ev.heads {
        println!(
            "{}  macro-F1 {:.4}  micro-F1 {:.4}",
            h.head, h.scores.macro_f1, h.scores.micro_f1
        );
        println!(
            "  {:<20} {:>9} {:>9} {:>9} {:>7}",
            "class", "precision", "recall", "f1", "support"
        );
        for (name, s) in h.classes.iter().zip(&h.scores.per_class) {
            println!(
                "  {name:<20} {:>9.4} {:>9.4} {:>9.4} {:>7}",
                s.precision, s.recall, s.f1, s.support
            );
        }
    }
    println!("task {} score: {:.4}", ev.task, ev.score);
    Ok(())
}

fn cmd_synth(records: usize, image_dim: usize, seed: u64, out_dir: PathBuf) -> Result<(), Failure> {
    if records == 0 || image_dim == 0 {
        return Err(Failure::new(
            exit::BAD_ARGS,
            "--records and --image-dim must be positive",
        ));
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| io_failure(&out_dir.display().to_string(), e))?;
    let cfg = SyntheticConfig {
        records,
        image_dim,
        seed,
        ..SyntheticConfig::default()
    };
    let (corpus, images) = synthetic_corpus(&cfg)
        .write_to(&out_dir)
        .map_err(|e| Failure::new(exit::MISSING_INPUT, e.to_string()))?;
    eprintln!("wrote {} and {}", corpus.display(), images.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Normalize { dict, vocab } => cmd_normalize(dict, vocab),
        Command::Stats { corpus, task, json } => cmd_stats(corpus, task, json),
        Command::BuildVocab {
            corpus,
            min_count,
            dict,
            out,
        } => cmd_build_vocab(corpus, min_count, dict, out),
        Command::Train(a) => cmd_train(a),
        Command::Gridsearch {
            train,
            threads,
            table,
        } => cmd_gridsearch(train, threads, table),
        Command::Predict {
            checkpoints,
            corpus,
            image_embeddings,
            dict,
            out,
        } => cmd_predict(checkpoints, corpus, image_embeddings, dict, out),
        Command::Synth {
            records,
            image_dim,
            seed,
            out_dir,
        } => cmd_synth(records, image_dim, seed, out_dir),
        Command::Evaluate {
            gold,
            pred,
            task,
            exclude_motivational,
            json,
        } => cmd_evaluate(gold, pred, task, exclude_motivational, json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
