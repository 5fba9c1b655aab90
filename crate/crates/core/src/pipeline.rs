//! File-level workflows shared by the command-line tool and the Python
//! bindings: training runs with reproducibility manifests, grid search,
//! prediction files and scoring of prediction files against gold labels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::config::{ConfigError, FlatConfig};
use crate::dataset::{
    load_corpus, split_train_dev, DatasetError, MemeRecord, Task, TaskHead, TaskSchema,
};
use crate::embeddings::{
    build_vocab, load_word_vectors, read_image_embeddings_with_dim, word_list, EmbeddingError,
    EmbeddingFamily, ImageEmbedding, VocabIndex,
};
use crate::metrics::{confusion, task_bc_score, ConfusionMatrix, MetricsError, ScoreCard};
use crate::models::{Architecture, Model, ModelConfig, ModelError, MODEL_CONFIG_KEYS};
use crate::textnorm::{ContractionDict, NormalizedText, Normalizer, TextNormError};
use crate::training::{
    grid_search, train_observed, CellResult, EpochStats, Sample, TrainConfig, TrainError,
    TrainReport, TRAIN_CONFIG_KEYS,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{role} file not found: {path}")]
    MissingInput { role: &'static str, path: String },
    #[error("architecture {0} needs an image-embedding file")]
    MissingModality(Architecture),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    TextNorm(#[from] TextNormError),
    #[error("labels do not fit head {head}: {detail}")]
    LabelMismatch { head: TaskHead, detail: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{role} file {path} changed since the manifest was written")]
    DigestMismatch { role: String, path: String },
    #[error("invalid predictions: {0}")]
    Predictions(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn require(role: &'static str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput {
            role,
            path: path.display().to_string(),
        })
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRequest {
    pub corpus: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `token v1 … vd` file for the semantic table.
    pub embeddings: Option<PathBuf>,
    /// Same format, for the sentiment-specific table of MNN-II.
    pub sentiment_embeddings: Option<PathBuf>,
    pub image_embeddings: Option<PathBuf>,
    /// Contraction dictionary; the built-in one when absent.
    pub dict: Option<PathBuf>,
    pub dev_fraction: f64,
    pub min_count: usize,
    pub seed: u64,
}

pub const PIPELINE_CONFIG_KEYS: &[&str] = &["dev_fraction", "min_count"];

impl TrainRequest {
    pub fn new(
        corpus: impl Into<PathBuf>,
        architecture: Architecture,
        head: TaskHead,
        seed: u64,
    ) -> Self {
        let mut req = TrainRequest {
            corpus: corpus.into(),
            model: ModelConfig::new(architecture, head),
            train: TrainConfig::default(),
            embeddings: None,
            sentiment_embeddings: None,
            image_embeddings: None,
            dict: None,
            dev_fraction: 0.15,
            min_count: 1,
            seed,
        };
        req.set_seed(seed);
        req
    }

    /// Sets the single seed every random choice derives from.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Applies a flat config holding model, training and pipeline keys.
    /// `seed`, `architecture` and `head` are taken from the request itself.
    pub fn apply_config(&mut self, c: &FlatConfig) -> Result<()> {
        let known: Vec<&str> = MODEL_CONFIG_KEYS
            .iter()
            .chain(TRAIN_CONFIG_KEYS)
            .chain(PIPELINE_CONFIG_KEYS)
            .copied()
            .filter(|k| !matches!(*k, "seed" | "architecture" | "head"))
            .collect();
        c.ensure_known(&known)?;
        self.model.apply_flat(c)?;
        self.train.apply_flat(c)?;
        if let Some(v) = c.parse_value("dev_fraction")? {
            self.dev_fraction = v;
        }
        if let Some(v) = c.parse_value("min_count")? {
            self.min_count = v;
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(ConfigError::InvalidValue {
                key: "dev_fraction".into(),
                value: self.dev_fraction.to_string(),
            }
            .into());
        }
        self.model.validate()?;
        self.train.validate()?;
        require("corpus", &self.corpus)?;
        let arch = self.model.architecture;
        if arch.uses_image() && !self.image_embeddings.as_deref().is_some_and(Path::is_file) {
            return Err(PipelineError::MissingModality(arch));
        }
        for (role, p) in [
            ("embeddings", &self.embeddings),
            ("sentiment embeddings", &self.sentiment_embeddings),
            ("image embeddings", &self.image_embeddings),
            ("dictionary", &self.dict),
        ] {
            if let Some(p) = p {
                require(role, p)?;
            }
        }
        Ok(())
    }

    fn inputs(&self) -> Vec<(&'static str, &PathBuf)> {
        let mut v = vec![("corpus", &self.corpus)];
        let optional = [
            ("embeddings", &self.embeddings),
            ("sentiment_embeddings", &self.sentiment_embeddings),
            ("image_embeddings", &self.image_embeddings),
            ("dict", &self.dict),
        ];
        v.extend(
            optional
                .into_iter()
                .filter_map(|(r, p)| p.as_ref().map(|p| (r, p))),
        );
        v
    }
}

/// A corpus turned into per-head samples, with the vocabulary and tables
/// needed to build models.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocab: VocabIndex,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub semantic: Option<crate::embeddings::EmbeddingTable>,
    pub sentiment: Option<crate::embeddings::EmbeddingTable>,
    /// Records whose id had no image embedding (they get the zero vector).
    pub missing_images: usize,
}

fn normalizer(
    dict: Option<&Path>,
    elongation_vocab: Option<HashSet<String>>,
) -> Result<Normalizer> {
    let dict = match dict {
        Some(p) => ContractionDict::load(p)?,
        None => ContractionDict::builtin(),
    };
    Ok(Normalizer::new(dict, elongation_vocab))
}

fn load_images(
    path: Option<&Path>,
    dim: usize,
) -> Result<Option<BTreeMap<String, ImageEmbedding>>> {
    path.map(|p| read_image_embeddings_with_dim(p, Some(dim)).map_err(Into::into))
        .transpose()
}

fn image_for(
    images: Option<&BTreeMap<String, ImageEmbedding>>,
    id: &str,
    dim: usize,
    missing: &mut usize,
) -> Option<Arc<[f32]>> {
    let images = images?;
    Some(match images.get(id) {
        Some(e) => e.vector.clone().into(),
        None => {
            *missing += 1;
            vec![0.0; dim].into()
        }
    })
}

/// Loads, normalizes, splits and indexes the data for one request.
pub fn prepare(req: &TrainRequest) -> Result<PreparedData> {
    req.check()?;
    let head = req.model.head;
    let corpus = load_corpus(&req.corpus, TaskSchema::for_head(head)).map_err(|e| match e {
        DatasetError::EmptyCorpus { skipped } => PipelineError::LabelMismatch {
            head,
            detail: format!("none of the {skipped} rows has a usable label"),
        },
        other => other.into(),
    })?;
    let elongation = req.embeddings.as_deref().map(word_list).transpose()?;
    let norm = normalizer(req.dict.as_deref(), elongation)?;

    let labelled: Vec<(MemeRecord, NormalizedText, usize)> = corpus
        .records
        .into_iter()
        .map(|r| {
            let class = head.class_of(&r).expect("schema guarantees the label");
            let text = norm.normalize(&r.description);
            (r, text, class)
        })
        .collect();
    let distinct: HashSet<usize> = labelled.iter().map(|x| x.2).collect();
    if distinct.len() < 2 {
        return Err(PipelineError::LabelMismatch {
            head,
            detail: format!("only {} distinct class present", distinct.len()),
        });
    }
    let (train_items, dev_items) = split_train_dev(&labelled, req.dev_fraction, req.seed);
    if train_items.is_empty() || dev_items.is_empty() {
        return Err(PipelineError::LabelMismatch {
            head,
            detail: format!("{} records are too few to split", labelled.len()),
        });
    }

    let texts: Vec<NormalizedText> = train_items.iter().map(|x| x.1.clone()).collect();
    let vocab = build_vocab(&texts, req.min_count.max(1));
    let cfg = &req.model;
    let semantic = req
        .embeddings
        .as_ref()
        .map(|p| {
            load_word_vectors(
                p,
                &vocab,
                cfg.d_semantic,
                EmbeddingFamily::Semantic,
                req.seed,
            )
        })
        .transpose()?;
    let sentiment = match (cfg.architecture, &req.sentiment_embeddings) {
        (Architecture::Mnn2, Some(p)) => Some(load_word_vectors(
            p,
            &vocab,
            cfg.d_sentiment,
            EmbeddingFamily::SentimentSpecific,
            req.seed,
        )?),
        _ => None,
    };
    let images = if cfg.architecture.uses_image() {
        load_images(req.image_embeddings.as_deref(), cfg.image_dim)?
    } else {
        None
    };

    let mut missing = 0;
    let mut to_samples = |items: &[(MemeRecord, NormalizedText, usize)]| -> Vec<Sample> {
        items
            .iter()
            .map(|(r, text, class)| Sample {
                seq: crate::dataset::pad_or_truncate(text, &vocab, cfg.seq_len),
                image: image_for(images.as_ref(), &r.id, cfg.image_dim, &mut missing),
                label: *class,
            })
            .collect()
    };
    let train = to_samples(&train_items);
    let dev = to_samples(&dev_items);
    Ok(PreparedData {
        vocab,
        train,
        dev,
        semantic,
        sentiment,
        missing_images: missing,
    })
}

/// Reproducibility record written next to every trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub model_config: BTreeMap<String, String>,
    pub train_config: BTreeMap<String, String>,
    pub dev_fraction: f64,
    pub min_count: usize,
    pub inputs: BTreeMap<String, InputFile>,
    pub artifacts: Artifacts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    pub report: String,
}

fn flat_map(c: &FlatConfig) -> BTreeMap<String, String> {
    c.iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn map_flat(m: &BTreeMap<String, String>) -> FlatConfig {
    let mut c = FlatConfig::new();
    for (k, v) in m {
        c.set(k.clone(), v);
    }
    c
}

impl RunManifest {
    pub fn for_request(req: &TrainRequest, checkpoint: &Path, report: &Path) -> Result<Self> {
        let mut inputs = BTreeMap::new();
        for (role, path) in req.inputs() {
            inputs.insert(
                role.to_string(),
                InputFile {
                    path: path.display().to_string(),
                    sha256: sha256_file(path)?,
                },
            );
        }
        Ok(RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            seed: req.seed,
            model_config: flat_map(&req.model.to_flat()),
            train_config: flat_map(&req.train.to_flat()),
            dev_fraction: req.dev_fraction,
            min_count: req.min_count,
            inputs,
            artifacts: Artifacts {
                checkpoint: checkpoint.display().to_string(),
                report: report.display().to_string(),
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        require("manifest", path)?;
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Rebuilds the request, failing if any input file has changed.
    pub fn to_request(&self) -> Result<TrainRequest> {
        let model = ModelConfig::from_flat(&map_flat(&self.model_config))?;
        let mut train = TrainConfig::default();
        train.apply_flat(&map_flat(&self.train_config))?;
        let mut paths: HashMap<&str, PathBuf> = HashMap::new();
        for (role, input) in &self.inputs {
            let path = PathBuf::from(&input.path);
            let role_name: &'static str = match role.as_str() {
                "corpus" => "corpus",
                "embeddings" => "embeddings",
                "sentiment_embeddings" => "sentiment_embeddings",
                "image_embeddings" => "image_embeddings",
                "dict" => "dict",
                other => {
                    return Err(PipelineError::Manifest(format!(
                        "unknown input role {other:?}"
                    )))
                }
            };
            require(role_name, &path)?;
            if sha256_file(&path)? != input.sha256 {
                return Err(PipelineError::DigestMismatch {
                    role: role.clone(),
                    path: input.path.clone(),
                });
            }
            paths.insert(role_name, path);
        }
        let corpus = paths
            .remove("corpus")
            .ok_or_else(|| PipelineError::Manifest("no corpus input".into()))?;
        Ok(TrainRequest {
            corpus,
            model,
            train,
            embeddings: paths.remove("embeddings"),
            sentiment_embeddings: paths.remove("sentiment_embeddings"),
            image_embeddings: paths.remove("image_embeddings"),
            dict: paths.remove("dict"),
            dev_fraction: self.dev_fraction,
            min_count: self.min_count,
            seed: self.seed,
        })
    }
}

/// Paths of the files a training run writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub manifest: PathBuf,
}

impl RunPaths {
    /// `<stem>.mmck`, `<stem>.report.json` and `<stem>.manifest.json` beside
    /// the checkpoint path.
    pub fn beside(checkpoint: impl Into<PathBuf>) -> Self {
        let checkpoint = checkpoint.into();
        let with = |suffix: &str| {
            let stem = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            checkpoint.with_file_name(format!("{stem}{suffix}"))
        };
        RunPaths {
            report: with(".report.json"),
            manifest: with(".manifest.json"),
            checkpoint,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model,
    pub report: TrainReport,
    pub manifest: RunManifest,
    pub missing_images: usize,
}

/// Builds the untrained model for prepared data.
pub fn build_model(req: &TrainRequest, data: &PreparedData) -> Result<Model> {
    Ok(Model::new(
        req.model.clone(),
        data.vocab.clone(),
        data.semantic.clone(),
        data.sentiment.clone(),
    )?)
}

/// Trains one model and writes its checkpoint, report and manifest.
pub fn run_train(
    req: &TrainRequest,
    out: &RunPaths,
    observe: impl FnMut(&EpochStats),
) -> Result<TrainRun> {
    let data = prepare(req)?;
    let model = build_model(req, &data)?;
    let (model, report) = train_observed(&model, &data.train, &data.dev, &req.train, observe)?;
    let manifest = RunManifest::for_request(req, &out.checkpoint, &out.report)?;
    save_checkpoint(&model, &out.checkpoint)?;
    write_file(&out.report, report.to_json())?;
    write_file(&out.manifest, manifest.to_json())?;
    Ok(TrainRun {
        model,
        report,
        manifest,
        missing_images: data.missing_images,
    })
}

/// Re-runs the training described by a manifest. Outputs go to the
/// manifest's artifact paths unless `out` is given.
pub fn rerun_manifest(manifest: &RunManifest, out: Option<&RunPaths>) -> Result<TrainRun> {
    let req = manifest.to_request()?;
    let paths = match out {
        Some(p) => p.clone(),
        None => RunPaths {
            checkpoint: PathBuf::from(&manifest.artifacts.checkpoint),
            report: PathBuf::from(&manifest.artifacts.report),
            manifest: RunPaths::beside(&manifest.artifacts.checkpoint).manifest,
        },
    };
    run_train(&req, &paths, |_| {})
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRun {
    pub results: Vec<CellResult>,
    pub best: usize,
    #[serde(skip)]
    pub model: Option<Model>,
    pub report: TrainReport,
}

/// Grid search over the request's training axes; writes the winning
/// checkpoint and a JSON table of every cell.
pub fn run_gridsearch(req: &TrainRequest, checkpoint: &Path, table: &Path) -> Result<GridRun> {
    let data = prepare(req)?;
    let outcome = grid_search(
        |cell| {
            let mut cfg = req.model.clone();
            cfg.lstm_layers = cell.lstm_layers;
            cfg.seed = cell.seed;
            Model::new(
                cfg,
                data.vocab.clone(),
                data.semantic.clone(),
                data.sentiment.clone(),
            )
        },
        &data.train,
        &data.dev,
        &req.train,
    )?;
    save_checkpoint(&outcome.model, checkpoint)?;
    let run = GridRun {
        results: outcome.results,
        best: outcome.best,
        model: Some(outcome.model),
        report: outcome.report,
    };
    write_file(
        table,
        serde_json::to_string_pretty(&run).expect("grid table serializes"),
    )?;
    Ok(run)
}

/// Column order of prediction files.
pub const PREDICTION_COLUMNS: [&str; 9] = [
    "id",
    "sentiment",
    "humorous",
    "sarcastic",
    "offensive",
    "motivational",
    "humour_scale",
    "sarcasm_scale",
    "offense_scale",
];

/// Predicted labels for one meme; heads without a model are `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PredictionRow {
    pub id: String,
    pub labels: BTreeMap<TaskHead, usize>,
}

fn column_of(head: TaskHead) -> &'static str {
    match head {
        TaskHead::A => "sentiment",
        TaskHead::BHumour => "humorous",
        TaskHead::BSarcasm => "sarcastic",
        TaskHead::BOffense => "offensive",
        TaskHead::BMotivational | TaskHead::CMotivational => "motivational",
        TaskHead::CHumour => "humour_scale",
        TaskHead::CSarcasm => "sarcasm_scale",
        TaskHead::COffense => "offense_scale",
    }
}

fn cell_value(head: TaskHead, class: usize) -> String {
    match head {
        TaskHead::CMotivational => ["no", "yes"][class].to_string(),
        h => h.class_names()[class].to_string(),
    }
}

/// Runs every model over an unlabeled-or-labeled corpus. At most one model
/// per head; each head reads the caption through its own vocabulary.
pub fn predict_corpus(
    models: &[Model],
    corpus: &Path,
    images: Option<&Path>,
    dict: Option<&Path>,
) -> Result<Vec<PredictionRow>> {
    require("corpus", corpus)?;
    let mut seen = HashSet::new();
    for m in models {
        if !seen.insert(m.head()) {
            return Err(PipelineError::Predictions(format!(
                "two checkpoints for head {}",
                m.head()
            )));
        }
    }
    let needs_images = models.iter().find(|m| m.architecture().uses_image());
    if let Some(m) = needs_images {
        match images {
            None => return Err(PipelineError::MissingModality(m.architecture())),
            Some(p) => require("image embeddings", p)?,
        }
    }
    let records = load_corpus(corpus, TaskSchema::UNLABELED)?.records;
    let mut image_maps: BTreeMap<usize, BTreeMap<String, ImageEmbedding>> = BTreeMap::new();
    let mut rows: Vec<PredictionRow> = records
        .iter()
        .map(|r| PredictionRow {
            id: r.id.clone(),
            labels: BTreeMap::new(),
        })
        .collect();
    for m in models {
        let dim = m.config().image_dim;
        let image_map = if m.architecture().uses_image() {
            if let std::collections::btree_map::Entry::Vacant(slot) = image_maps.entry(dim) {
                slot.insert(load_images(images, dim)?.expect("checked above"));
            }
            image_maps.get(&dim)
        } else {
            None
        };
        let known: HashSet<String> = m.vocab().tokens().iter().cloned().collect();
        let norm = normalizer(dict, Some(known))?;
        let mut missing = 0;
        let samples: Vec<Sample> = records
            .iter()
            .map(|r| Sample {
                seq: m.encode_text(&norm.normalize(&r.description)),
                image: image_for(image_map, &r.id, dim, &mut missing),
                label: 0,
            })
            .collect();
        let pred = crate::training::predict(m, &samples)?;
        for (row, class) in rows.iter_mut().zip(pred) {
            row.labels.insert(m.head(), class);
        }
    }
    Ok(rows)
}

/// Writes rows in [`PREDICTION_COLUMNS`] order. The motivational column is
/// taken from the task B head when both motivational heads are present.
pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| PipelineError::Io {
        path: path.display().to_string(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(PREDICTION_COLUMNS).map_err(csv_err)?;
    for row in rows {
        let mut cells: BTreeMap<&str, String> = BTreeMap::new();
        // C first so a B motivational prediction overwrites it.
        for (&head, &class) in row.labels.iter().rev() {
            cells.insert(column_of(head), cell_value(head, class));
        }
        let record: Vec<&str> = PREDICTION_COLUMNS
            .iter()
            .map(|c| {
                if *c == "id" {
                    row.id.as_str()
                } else {
                    cells.get(c).map_or("", String::as_str)
                }
            })
            .collect();
        w.write_record(record).map_err(csv_err)?;
    }
    w.flush().map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

type GoldPred = (Vec<usize>, Vec<usize>);

/// Per-head gold/predicted class lists read from two files.
fn aligned_labels(
    gold: &[MemeRecord],
    pred_path: &Path,
    heads: &[TaskHead],
) -> Result<BTreeMap<TaskHead, GoldPred>> {
    require("predictions", pred_path)?;
    let mut reader =
        csv::Reader::from_path(pred_path).map_err(|e| PipelineError::Predictions(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| PipelineError::Predictions(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::Predictions(format!("missing column {name:?}")))
    };
    let id_col = col("id")?;
    let head_cols: Vec<(TaskHead, usize)> = heads
        .iter()
        .map(|&h| Ok((h, col(column_of(h))?)))
        .collect::<Result<_>>()?;

    let mut by_id: HashMap<String, csv::StringRecord> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| PipelineError::Predictions(e.to_string()))?;
        let id = row.get(id_col).unwrap_or("").trim().to_string();
        if by_id.insert(id.clone(), row).is_some() {
            return Err(PipelineError::Predictions(format!("duplicate id {id:?}")));
        }
    }
    if by_id.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: by_id.len(),
        }
        .into());
    }
    let mut out: BTreeMap<TaskHead, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for r in gold {
        let row = by_id.get(&r.id).ok_or_else(|| {
            PipelineError::Predictions(format!("no prediction for id {:?}", r.id))
        })?;
        for &(head, c) in &head_cols {
            let value = row.get(c).unwrap_or("");
            let class = parse_cell(head, value).ok_or_else(|| {
                PipelineError::Predictions(format!(
                    "id {:?}: bad {} value {value:?}",
                    r.id,
                    column_of(head)
                ))
            })?;
            let entry = out.entry(head).or_default();
            entry
                .0
                .push(head.class_of(r).expect("gold loaded with the task schema"));
            entry.1.push(class);
        }
    }
    Ok(out)
}

/// Class index of a prediction cell. Accepts the spellings the corpus
/// loader accepts.
fn parse_cell(head: TaskHead, value: &str) -> Option<usize> {
    use crate::dataset::{HumourScale, OffenseScale, SarcasmScale, TaskALabel};
    let v = value.trim();
    let key = v.to_lowercase().replace([' ', '-'], "_");
    let flag = || match key.as_str() {
        "yes" | "y" | "true" | "1" => Some(1),
        "no" | "n" | "false" | "0" => Some(0),
        k if k.starts_with("not_") => Some(0),
        "humorous" | "funny" | "sarcastic" | "offensive" | "motivational" => Some(1),
        _ => None,
    };
    match head {
        TaskHead::A => v.parse::<TaskALabel>().ok().map(|s| s.index()),
        TaskHead::CHumour => v.parse::<HumourScale>().ok().map(|s| s.index()),
        TaskHead::CSarcasm => v.parse::<SarcasmScale>().ok().map(|s| s.index()),
        TaskHead::COffense => v.parse::<OffenseScale>().ok().map(|s| s.index()),
        _ => flag(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadEvaluation {
    pub head: TaskHead,
    pub classes: Vec<&'static str>,
    pub confusion: ConfusionMatrix,
    pub scores: ScoreCard,
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub task: String,
    pub heads: Vec<HeadEvaluation>,
    /// Macro-F1 for task A; mean subtask macro-F1 for tasks B and C.
    pub score: f64,
}

/// The heads scored for `task`; `exclude_motivational` drops the
/// motivational subtask from B and C.
pub fn evaluation_heads(task: Task, exclude_motivational: bool) -> Vec<TaskHead> {
    task.heads()
        .iter()
        .copied()
        .filter(|h| {
            !(exclude_motivational
                && matches!(h, TaskHead::BMotivational | TaskHead::CMotivational))
        })
        .collect()
}

/// Scores a prediction file against a gold corpus for one task.
pub fn evaluate_files(
    gold: &Path,
    pred: &Path,
    task: Task,
    exclude_motivational: bool,
) -> Result<Evaluation> {
    require("gold corpus", gold)?;
    let schema = TaskSchema::for_task(task);
    let loaded = load_corpus(gold, schema)?;
    if !loaded.skipped.is_empty() {
        let s = &loaded.skipped[0];
        return Err(DatasetError::MissingColumn(format!(
            "gold line {} ({}): {}",
            s.line, s.id, s.reason
        ))
        .into());
    }
    let heads = evaluation_heads(task, exclude_motivational);
    let aligned = aligned_labels(&loaded.records, pred, &heads)?;
    let mut out = Vec::new();
    for head in heads {
        let (g, p) = &aligned[&head];
        let cm = confusion(g, p, head.classes())?;
        out.push(HeadEvaluation {
            head,
            classes: head.class_names(),
            scores: ScoreCard::from_confusion(&cm),
            confusion: cm,
        });
    }
    let cards: Vec<ScoreCard> = out.iter().map(|h| h.scores.clone()).collect();
    let score = match task {
        Task::A => cards[0].macro_f1,
        _ => task_bc_score(&cards),
    };
    Ok(Evaluation {
        task: format!("{task:?}").to_lowercase(),
        heads: out,
        score,
    })
}
