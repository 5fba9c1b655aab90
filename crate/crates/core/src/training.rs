//! Mini-batch training, dev-set model selection and grid search.
//!
//! Gradients for the samples of a batch are computed in parallel, each on its
//! own graph with its own dropout stream, and summed in sample order, so a run
//! is fully determined by its seed, data and configuration.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::AutogradError;
use crate::config::{ConfigError, FlatConfig};
use crate::dataset::{oversample_minority, TokenSequence};
use crate::metrics::{confusion, ScoreCard};
use crate::models::{argmax, Gradients, Mode, Model, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("label {label} out of range for a {classes}-class head")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridAxes {
    pub lstm_layers: Vec<usize>,
    pub epochs: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes {
            lstm_layers: vec![1, 2],
            epochs: vec![10, 20, 30],
            learning_rates: vec![1e-3, 3e-4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub oversample: bool,
    pub grid: GridAxes,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            oversample: true,
            grid: GridAxes::default(),
        }
    }
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "seed",
    "oversample",
    "grid_lstm_layers",
    "grid_epochs",
    "grid_learning_rates",
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        let rate_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !rate_ok(self.learning_rate) {
            return bad("learning_rate must be a finite non-negative number");
        }
        let g = &self.grid;
        if g.lstm_layers.is_empty() || g.epochs.is_empty() || g.learning_rates.is_empty() {
            return bad("every grid axis needs at least one value");
        }
        if g.lstm_layers.contains(&0)
            || g.epochs.contains(&0)
            || !g.learning_rates.iter().all(|&r| rate_ok(r))
        {
            return bad("grid values must be positive");
        }
        Ok(())
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        c.set("epochs", self.epochs);
        c.set("batch_size", self.batch_size);
        c.set("learning_rate", self.learning_rate);
        c.set("optimizer", self.optimizer);
        c.set("seed", self.seed);
        c.set("oversample", self.oversample);
        c.set("grid_lstm_layers", join(&self.grid.lstm_layers));
        c.set("grid_epochs", join(&self.grid.epochs));
        c.set("grid_learning_rates", join(&self.grid.learning_rates));
        c
    }

    /// Overrides the fields named in `c`; other keys are ignored.
    pub fn apply_flat(&mut self, c: &FlatConfig) -> Result<(), TrainError> {
        if let Some(v) = c.parse_value("epochs")? {
            self.epochs = v;
        }
        if let Some(v) = c.parse_value("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = c.parse_value("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = c.parse_value("optimizer")? {
            self.optimizer = v;
        }
        if let Some(v) = c.parse_value("seed")? {
            self.seed = v;
        }
        if let Some(v) = c.parse_value("oversample")? {
            self.oversample = v;
        }
        if let Some(v) = c.parse_list("grid_lstm_layers")? {
            self.grid.lstm_layers = v;
        }
        if let Some(v) = c.parse_list("grid_epochs")? {
            self.grid.epochs = v;
        }
        if let Some(v) = c.parse_list("grid_learning_rates")? {
            self.grid.learning_rates = v;
        }
        Ok(())
    }
}

/// One training or evaluation example for a single head.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seq: TokenSequence,
    pub image: Option<Arc<[f32]>>,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub dev_macro_f1: Vec<f64>,
    pub dev_micro_f1: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn best_dev_macro_f1(&self) -> f64 {
        self.dev_macro_f1[self.best_epoch - 1]
    }

    pub fn best_dev_micro_f1(&self) -> f64 {
        self.dev_micro_f1[self.best_epoch - 1]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Equality of everything except the wall-clock time.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.train_loss) == bits(&other.train_loss)
            && bits(&self.dev_macro_f1) == bits(&other.dev_macro_f1)
            && bits(&self.dev_micro_f1) == bits(&other.dev_micro_f1)
            && self.best_epoch == other.best_epoch
    }
}

/// Per-epoch figures passed to progress observers.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
    pub dev_micro_f1: f64,
}

/// SGD or Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) over a model's trainable
/// parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &Model) -> Self {
        let zeros = || {
            model
                .params()
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect()
        };
        Optimizer {
            kind,
            lr,
            t: 0,
            m: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
            v: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let ids: Vec<_> = model.params().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            if self.lr == 0.0 {
                continue;
            }
            let values = model.params_mut().values_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in values.iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..values.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        values[i] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
                    }
                }
            }
        }
    }
}

fn check_labels(model: &Model, samples: &[Sample]) -> Result<(), TrainError> {
    let classes = model.config().classes();
    match samples.iter().find(|s| s.label >= classes) {
        Some(s) => Err(TrainError::LabelOutOfRange {
            label: s.label,
            classes,
        }),
        None => Ok(()),
    }
}

/// Mean loss and mean gradient over `batch`. `seeds` gives each sample's
/// dropout stream.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Sample],
    seeds: &[u64],
    mode: Mode,
) -> Result<(f64, Gradients), ModelError> {
    let per_sample: Vec<(f64, Gradients)> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            model.loss_and_gradients(&s.seq, s.image.as_deref(), s.label, mode, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Gradients = model
        .params()
        .iter()
        .map(|(_, p)| p.trainable.then(|| vec![0.0; p.value.len()]))
        .collect();
    for (l, grads) in per_sample {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            if let (Some(acc), Some(g)) = (acc, g) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
    }
    for g in total.iter_mut().flatten() {
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    // The padding row must stay fixed.
    for id in model.embedding_params() {
        if let Some(g) = &mut total[id.index()] {
            let d = model.params().get(id).value.shape()[1];
            g[..d].fill(0.0);
        }
    }
    Ok((loss * scale, total))
}

/// Predicted class for every sample.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<usize>, ModelError> {
    samples
        .par_iter()
        .map(|s| {
            model
                .predict_proba(&s.seq, s.image.as_deref())
                .map(|p| argmax(&p))
        })
        .collect()
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<ScoreCard, TrainError> {
    check_labels(model, samples)?;
    let pred = predict(model, samples)?;
    let gold: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cm = confusion(&gold, &pred, model.config().classes()).expect("labels checked");
    Ok(ScoreCard::from_confusion(&cm))
}

fn non_finite(epoch: usize, batch: usize, e: ModelError) -> TrainError {
    match e {
        ModelError::Autograd(AutogradError::NonFinite { op }) => TrainError::NonFiniteLoss {
            epoch,
            batch,
            detail: format!("non-finite value produced by {op}"),
        },
        other => TrainError::Model(other),
    }
}

/// Trains a copy of `model` and returns the parameters of the epoch with the
/// best dev macro-F1 (earliest on ties).
pub fn train(
    model: &Model,
    train: &[Sample],
    dev: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport), TrainError> {
    train_observed(model, train, dev, cfg, |_| {})
}

pub fn train_observed(
    model: &Model,
    train: &[Sample],
    dev: &[Sample],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochStats),
) -> Result<(Model, TrainReport), TrainError> {
    let start = Instant::now();
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptySet("dev"));
    }
    check_labels(model, train)?;
    check_labels(model, dev)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_set: Vec<Sample> = if cfg.oversample {
        oversample_minority(train, |s| s.label, rng.gen())
    } else {
        train.to_vec()
    };

    let mut current = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &current);
    let mut best = (current.clone(), f64::NEG_INFINITY, 0usize);
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        dev_macro_f1: Vec::with_capacity(cfg.epochs),
        dev_micro_f1: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        wall_time_secs: 0.0,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.gen()).collect();
            let (loss, grads) = batch_gradients(&current, &batch, &seeds, Mode::Train)
                .map_err(|e| non_finite(epoch, b, e))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("batch loss {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut current, &grads);
        }
        let card = evaluate(&current, dev)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            dev_macro_f1: card.macro_f1,
            dev_micro_f1: card.micro_f1,
        };
        observe(&stats);
        report.train_loss.push(stats.train_loss);
        report.dev_macro_f1.push(card.macro_f1);
        report.dev_micro_f1.push(card.micro_f1);
        if card.macro_f1 > best.1 {
            best = (current.clone(), card.macro_f1, epoch);
        }
    }
    report.best_epoch = best.2;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((best.0, report))
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub index: usize,
    pub lstm_layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub dev_macro_f1: f64,
    pub dev_micro_f1: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub results: Vec<CellResult>,
    pub best: usize,
    pub model: Model,
    pub report: TrainReport,
}

fn derive_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cartesian product of the grid axes, layers outermost, learning rate
/// innermost.
pub fn grid_cells(cfg: &TrainConfig) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &lstm_layers in &cfg.grid.lstm_layers {
        for &epochs in &cfg.grid.epochs {
            for &learning_rate in &cfg.grid.learning_rates {
                let index = cells.len();
                cells.push(GridCell {
                    index,
                    lstm_layers,
                    epochs,
                    learning_rate,
                    seed: derive_seed(cfg.seed, index),
                });
            }
        }
    }
    cells
}

/// Index of the highest score, first on ties. `None` for an empty slice.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains every grid cell (in parallel) and keeps the one with the best dev
/// macro-F1. `build` creates the untrained model for a cell.
pub fn grid_search<F>(
    build: F,
    train_set: &[Sample],
    dev: &[Sample],
    cfg: &TrainConfig,
) -> Result<GridOutcome, TrainError>
where
    F: Fn(&GridCell) -> Result<Model, ModelError> + Sync,
{
    cfg.validate()?;
    let cells = grid_cells(cfg);
    let runs: Vec<(Model, TrainReport)> = cells
        .par_iter()
        .map(|cell| {
            let model = build(cell)?;
            let cell_cfg = TrainConfig {
                epochs: cell.epochs,
                learning_rate: cell.learning_rate,
                seed: cell.seed,
                ..cfg.clone()
            };
            train(&model, train_set, dev, &cell_cfg)
        })
        .collect::<Result<_, _>>()?;
    let results: Vec<CellResult> = cells
        .iter()
        .zip(&runs)
        .map(|(cell, (_, r))| CellResult {
            cell: *cell,
            dev_macro_f1: r.best_dev_macro_f1(),
            dev_micro_f1: r.best_dev_micro_f1(),
            best_epoch: r.best_epoch,
        })
        .collect();
    let scores: Vec<f64> = results.iter().map(|r| r.dev_macro_f1).collect();
    let best = select_best(&scores).expect("grid is nonempty");
    let (model, report) = runs.into_iter().nth(best).expect("index in range");
    Ok(GridOutcome {
        results,
        best,
        model,
        report,
    })
}
