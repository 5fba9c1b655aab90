//! The three classifiers: a BiLSTM over word vectors, and two late-fusion
//! networks that join an LSTM text encoding with a projected image embedding.
//!
//! Every model owns one softmax head for one [`TaskHead`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::{AutogradError, Graph, Tensor, Var};
use crate::config::{ConfigError, FlatConfig};
use crate::dataset::{
    pad_or_truncate, HumourScale, MotivationalScale, OffenseScale, SarcasmScale, TaskALabel,
    TaskBLabels, TaskCLabels, TaskHead, TokenSequence,
};
use crate::embeddings::{random_table, EmbeddingFamily, EmbeddingTable, VocabIndex};
use crate::layers::{Activation, BiLstm, BoundParams, Dense, Lstm, ParamId, ParamStore};
use crate::textnorm::NormalizedText;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error("{op} expects a {expected} model, this one is {actual}")]
    WrongArchitecture {
        op: &'static str,
        expected: Architecture,
        actual: Architecture,
    },
    #[error("image embedding has {found} values, model expects {expected}")]
    ImageDimension { expected: usize, found: usize },
    #[error("token sequence has length {found}, model expects {expected}")]
    SequenceLength { expected: usize, found: usize },
    #[error("no model for head {0}")]
    MissingHead(TaskHead),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Architecture {
    BiLstmGlove,
    Mnn1,
    Mnn2,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::BiLstmGlove => "bilstm",
            Architecture::Mnn1 => "mnn1",
            Architecture::Mnn2 => "mnn2",
        }
    }

    pub fn uses_image(self) -> bool {
        self != Architecture::BiLstmGlove
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_lowercase().replace(['-', '_'], "").as_str() {
            "bilstm" | "bilstmglove" => Ok(Architecture::BiLstmGlove),
            "mnn1" | "mnni" => Ok(Architecture::Mnn1),
            "mnn2" | "mnnii" => Ok(Architecture::Mnn2),
            other => Err(format!("unknown architecture {other:?}")),
        }
    }
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub head: TaskHead,
    /// Padded caption length.
    pub seq_len: usize,
    pub d_semantic: usize,
    pub d_sentiment: usize,
    /// Hidden size of every LSTM (per direction for the BiLSTM).
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Width of the ReLU layers between the encoders and the softmax.
    pub dense_hidden: usize,
    pub image_dim: usize,
    pub image_proj: usize,
    /// Width of the joint text projection in MNN-II.
    pub text_fusion: usize,
    pub dropout_in: f64,
    pub dropout_out: f64,
    pub seed: u64,
}

pub const MODEL_CONFIG_KEYS: &[&str] = &[
    "architecture",
    "head",
    "seq_len",
    "d_semantic",
    "d_sentiment",
    "lstm_hidden",
    "lstm_layers",
    "dense_hidden",
    "image_dim",
    "image_proj",
    "text_fusion",
    "dropout_in",
    "dropout_out",
    "seed",
];

impl ModelConfig {
    /// Published defaults for `architecture`.
    pub fn new(architecture: Architecture, head: TaskHead) -> Self {
        let d_semantic = 200;
        let (lstm_hidden, image_proj) = match architecture {
            Architecture::BiLstmGlove => (d_semantic / 2, 0),
            Architecture::Mnn1 => (128, 128),
            Architecture::Mnn2 => (128, 256),
        };
        ModelConfig {
            architecture,
            head,
            seq_len: 75,
            d_semantic,
            d_sentiment: 50,
            lstm_hidden,
            lstm_layers: 1,
            dense_hidden: 128,
            image_dim: crate::embeddings::IMAGE_EMBEDDING_DIM,
            image_proj,
            text_fusion: if architecture == Architecture::Mnn2 {
                256
            } else {
                0
            },
            dropout_in: 0.2,
            dropout_out: 0.1,
            seed: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Checks the configuration and returns the resulting layer widths.
    pub fn validate(&self) -> Result<ShapeLedger, ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        let positive = [
            ("seq_len", self.seq_len),
            ("d_semantic", self.d_semantic),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("dense_hidden", self.dense_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        for (name, r) in [
            ("dropout_in", self.dropout_in),
            ("dropout_out", self.dropout_out),
        ] {
            if !(0.0..1.0).contains(&r) {
                return err(format!("{name} must lie in [0, 1), got {r}"));
            }
        }
        let h = self.lstm_hidden;
        match self.architecture {
            Architecture::BiLstmGlove => Ok(ShapeLedger {
                text: 2 * h,
                image_in: None,
                image_out: None,
                text_fusion: None,
                fused: 2 * h,
            }),
            Architecture::Mnn1 => {
                if self.image_dim == 0 || self.image_proj == 0 {
                    return err("image_dim and image_proj must be positive".into());
                }
                if self.image_proj != h {
                    return err(format!(
                        "MNN-I fuses equal-width branches: image projection {} != text width {h}",
                        self.image_proj
                    ));
                }
                Ok(ShapeLedger {
                    text: h,
                    image_in: Some(self.image_dim),
                    image_out: Some(self.image_proj),
                    text_fusion: None,
                    fused: h + self.image_proj,
                })
            }
            Architecture::Mnn2 => {
                if self.image_dim == 0
                    || self.image_proj == 0
                    || self.d_sentiment == 0
                    || self.text_fusion == 0
                {
                    return err(
                        "image_dim, image_proj, d_sentiment and text_fusion must be positive"
                            .into(),
                    );
                }
                if self.text_fusion != self.image_proj {
                    return err(format!(
                        "MNN-II fuses equal-width branches: image projection {} != text fusion {}",
                        self.image_proj, self.text_fusion
                    ));
                }
                Ok(ShapeLedger {
                    text: 2 * h,
                    image_in: Some(self.image_dim),
                    image_out: Some(self.image_proj),
                    text_fusion: Some(self.text_fusion),
                    fused: self.text_fusion + self.image_proj,
                })
            }
        }
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        c.set("architecture", self.architecture);
        c.set("head", self.head);
        c.set("seq_len", self.seq_len);
        c.set("d_semantic", self.d_semantic);
        c.set("d_sentiment", self.d_sentiment);
        c.set("lstm_hidden", self.lstm_hidden);
        c.set("lstm_layers", self.lstm_layers);
        c.set("dense_hidden", self.dense_hidden);
        c.set("image_dim", self.image_dim);
        c.set("image_proj", self.image_proj);
        c.set("text_fusion", self.text_fusion);
        c.set("dropout_in", self.dropout_in);
        c.set("dropout_out", self.dropout_out);
        c.set("seed", self.seed);
        c
    }

    /// Overrides fields named in `c`; other keys are ignored. Changing the
    /// architecture resets the architecture-dependent widths first.
    pub fn apply_flat(&mut self, c: &FlatConfig) -> Result<(), ModelError> {
        let invalid = |key: &str| {
            ModelError::ConfigFile(ConfigError::InvalidValue {
                key: key.into(),
                value: c.get(key).unwrap_or("").into(),
            })
        };
        if let Some(a) = c.get("architecture") {
            let arch: Architecture = a.parse().map_err(|_| invalid("architecture"))?;
            if arch != self.architecture {
                *self = ModelConfig {
                    seed: self.seed,
                    ..ModelConfig::new(arch, self.head)
                };
            }
        }
        if let Some(h) = c.get("head") {
            self.head = h.parse().map_err(|_| invalid("head"))?;
        }
        macro_rules! field {
            ($($name:ident),*) => {$(
                if let Some(v) = c.parse_value(stringify!($name))? {
                    self.$name = v;
                }
            )*};
        }
        field!(
            seq_len,
            d_semantic,
            d_sentiment,
            lstm_hidden,
            lstm_layers,
            dense_hidden,
            image_dim,
            image_proj,
            text_fusion,
            dropout_in,
            dropout_out,
            seed
        );
        Ok(())
    }

    pub fn from_flat(c: &FlatConfig) -> Result<Self, ModelError> {
        let arch: Architecture = c
            .get("architecture")
            .ok_or_else(|| ModelError::Config("missing architecture".into()))?
            .parse()
            .map_err(ModelError::Config)?;
        let head: TaskHead = c
            .get("head")
            .ok_or_else(|| ModelError::Config("missing head".into()))?
            .parse()
            .map_err(|e: crate::dataset::DatasetError| ModelError::Config(e.to_string()))?;
        let mut cfg = ModelConfig::new(arch, head);
        cfg.apply_flat(c)?;
        Ok(cfg)
    }
}

/// Widths of the encoder outputs and fusion vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ShapeLedger {
    /// Text summary width: pooled BiLSTM states, the LSTM final state, or
    /// both MNN-II LSTM states concatenated.
    pub text: usize,
    pub image_in: Option<usize>,
    pub image_out: Option<usize>,
    pub text_fusion: Option<usize>,
    /// Width of the vector fed to the classification layers.
    pub fused: usize,
}

#[derive(Debug, Clone)]
enum Network {
    BiLstm {
        embed: ParamId,
        layers: Vec<BiLstm>,
        dense1: Dense,
        dense2: Dense,
        out: Dense,
    },
    Mnn1 {
        embed: ParamId,
        text: Vec<Lstm>,
        image: Dense,
        fusion: Dense,
        out: Dense,
    },
    Mnn2 {
        semantic: ParamId,
        sentiment: ParamId,
        semantic_text: Vec<Lstm>,
        sentiment_text: Vec<Lstm>,
        text_fusion: Dense,
        image: Dense,
        fusion: Dense,
        out: Dense,
    },
}

/// Values of the named intermediate vectors from one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub probabilities: Vec<f64>,
    pub text: Vec<f64>,
    pub image: Option<Vec<f64>>,
    pub fused: Vec<f64>,
}

struct Pass {
    probs: Var,
    text: Var,
    image: Option<Var>,
    fused: Var,
}

/// Per-parameter gradients (`None` for frozen parameters).
pub type Gradients = Vec<Option<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    ledger: ShapeLedger,
    vocab: VocabIndex,
    params: ParamStore,
    net: Network,
}

const SEMANTIC_SEED_SALT: u64 = 0x5e4a_0001;
const SENTIMENT_SEED_SALT: u64 = 0x5e4a_0002;

fn check_table(
    table: &EmbeddingTable,
    vocab: &VocabIndex,
    d: usize,
    what: &str,
) -> Result<(), ModelError> {
    if table.rows() != vocab.len() || table.dim() != d {
        return Err(ModelError::Config(format!(
            "{what} table is {}x{}, expected {}x{d}",
            table.rows(),
            table.dim(),
            vocab.len()
        )));
    }
    Ok(())
}

impl Model {
    /// Builds a freshly initialised model. Missing word tables are replaced by
    /// seeded random trainable ones.
    pub fn new(
        config: ModelConfig,
        vocab: VocabIndex,
        semantic: Option<EmbeddingTable>,
        sentiment: Option<EmbeddingTable>,
    ) -> Result<Model, ModelError> {
        let ledger = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let v = vocab.len();
        let semantic = semantic.unwrap_or_else(|| {
            random_table(
                v,
                config.d_semantic,
                EmbeddingFamily::Semantic,
                config.seed ^ SEMANTIC_SEED_SALT,
            )
        });
        check_table(&semantic, &vocab, config.d_semantic, "semantic")?;
        let semantic_id = store.add("embed.semantic", semantic.values, semantic.trainable);
        let (h, m, dh) = (config.lstm_hidden, config.classes(), config.dense_hidden);

        let stack =
            |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize| -> Vec<Lstm> {
                (0..config.lstm_layers)
                    .map(|l| {
                        Lstm::new(
                            store,
                            &format!("{name}.{l}"),
                            if l == 0 { input } else { h },
                            h,
                            rng,
                        )
                    })
                    .collect()
            };

        let net = match config.architecture {
            Architecture::BiLstmGlove => {
                let layers = (0..config.lstm_layers)
                    .map(|l| {
                        let input = if l == 0 { config.d_semantic } else { 2 * h };
                        BiLstm::new(&mut store, &format!("bilstm.{l}"), input, h, &mut rng)
                    })
                    .collect();
                let dense1 =
                    Dense::new(&mut store, "dense1", 2 * h, dh, Activation::Relu, &mut rng);
                let dense2 = Dense::new(&mut store, "dense2", dh, dh, Activation::Relu, &mut rng);
                let out = Dense::new(&mut store, "out", dh, m, Activation::Identity, &mut rng);
                Network::BiLstm {
                    embed: semantic_id,
                    layers,
                    dense1,
                    dense2,
                    out,
                }
            }
            Architecture::Mnn1 => {
                let text = stack(&mut store, &mut rng, "text", config.d_semantic);
                let image = Dense::new(
                    &mut store,
                    "image",
                    config.image_dim,
                    config.image_proj,
                    Activation::Relu,
                    &mut rng,
                );
                let fusion = Dense::new(
                    &mut store,
                    "fusion",
                    ledger.fused,
                    dh,
                    Activation::Relu,
                    &mut rng,
                );
                let out = Dense::new(&mut store, "out", dh, m, Activation::Identity, &mut rng);
                Network::Mnn1 {
                    embed: semantic_id,
                    text,
                    image,
                    fusion,
                    out,
                }
            }
            Architecture::Mnn2 => {
                let sentiment = sentiment.unwrap_or_else(|| {
                    random_table(
                        v,
                        config.d_sentiment,
                        EmbeddingFamily::SentimentSpecific,
                        config.seed ^ SENTIMENT_SEED_SALT,
                    )
                });
                check_table(&sentiment, &vocab, config.d_sentiment, "sentiment")?;
                let sentiment_id =
                    store.add("embed.sentiment", sentiment.values, sentiment.trainable);
                let semantic_text = stack(&mut store, &mut rng, "text.semantic", config.d_semantic);
                let sentiment_text =
                    stack(&mut store, &mut rng, "text.sentiment", config.d_sentiment);
                let text_fusion = Dense::new(
                    &mut store,
                    "text_fusion",
                    2 * h,
                    config.text_fusion,
                    Activation::Relu,
                    &mut rng,
                );
                let image = Dense::new(
                    &mut store,
                    "image",
                    config.image_dim,
                    config.image_proj,
                    Activation::Relu,
                    &mut rng,
                );
                let fusion = Dense::new(
                    &mut store,
                    "fusion",
                    ledger.fused,
                    dh,
                    Activation::Relu,
                    &mut rng,
                );
                let out = Dense::new(&mut store, "out", dh, m, Activation::Identity, &mut rng);
                Network::Mnn2 {
                    semantic: semantic_id,
                    sentiment: sentiment_id,
                    semantic_text,
                    sentiment_text,
                    text_fusion,
                    image,
                    fusion,
                    out,
                }
            }
        };
        Ok(Model {
            config,
            ledger,
            vocab,
            params: store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn head(&self) -> TaskHead {
        self.config.head
    }

    pub fn ledger(&self) -> ShapeLedger {
        self.ledger
    }

    pub fn vocab(&self) -> &VocabIndex {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ids of the word-embedding tables.
    pub fn embedding_params(&self) -> Vec<ParamId> {
        match &self.net {
            Network::BiLstm { embed, .. } | Network::Mnn1 { embed, .. } => vec![*embed],
            Network::Mnn2 {
                semantic,
                sentiment,
                ..
            } => vec![*semantic, *sentiment],
        }
    }

    /// Maps normalized tokens to this model's padded id sequence.
    pub fn encode_text(&self, text: &NormalizedText) -> TokenSequence {
        pad_or_truncate(text, &self.vocab, self.config.seq_len)
    }

    fn image_input(&self, g: &mut Graph, image: Option<&[f32]>) -> Result<Var, ModelError> {
        let dim = self.config.image_dim;
        let data = match image {
            Some(v) if v.len() != dim => {
                return Err(ModelError::ImageDimension {
                    expected: dim,
                    found: v.len(),
                })
            }
            Some(v) => v.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; dim],
        };
        Ok(g.constant(Tensor::vector(data))?)
    }

    fn lstm_stack(
        g: &mut Graph,
        p: &BoundParams,
        layers: &[Lstm],
        mut xs: Var,
        len: usize,
    ) -> Result<Var, ModelError> {
        let mut last = xs;
        for layer in layers {
            let out = layer.encode(g, p, xs, len, false)?;
            xs = out.states;
            last = out.last;
        }
        Ok(last)
    }

    fn run(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        seq: &TokenSequence,
        image: Option<&[f32]>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Pass, ModelError> {
        let cfg = &self.config;
        if seq.len() != cfg.seq_len {
            return Err(ModelError::SequenceLength {
                expected: cfg.seq_len,
                found: seq.len(),
            });
        }
        let train = mode == Mode::Train;
        let len = seq.true_length;
        match &self.net {
            Network::BiLstm {
                embed,
                layers,
                dense1,
                dense2,
                out,
            } => {
                let x = g.gather(p[*embed], &seq.ids)?;
                let mut x = g.dropout(x, cfg.dropout_in, train, rng)?;
                for layer in layers {
                    x = layer.encode(g, p, x, len)?;
                }
                let x = g.dropout(x, cfg.dropout_out, train, rng)?;
                let pooled = g.temporal_max_pool(x, len)?;
                let h1 = dense1.forward(g, p, pooled)?;
                let h2 = dense2.forward(g, p, h1)?;
                let logits = out.forward(g, p, h2)?;
                let probs = g.softmax(logits)?;
                Ok(Pass {
                    probs,
                    text: pooled,
                    image: None,
                    fused: pooled,
                })
            }
            Network::Mnn1 {
                embed,
                text,
                image: image_layer,
                fusion,
                out,
            } => {
                let x = g.gather(p[*embed], &seq.ids)?;
                let x = g.dropout(x, cfg.dropout_in, train, rng)?;
                let text_vec = Self::lstm_stack(g, p, text, x, len)?;
                let img_in = self.image_input(g, image)?;
                let img = image_layer.forward(g, p, img_in)?;
                let fused = g.concat(text_vec, img)?;
                let hidden = fusion.forward(g, p, fused)?;
                let logits = out.forward(g, p, hidden)?;
                let probs = g.softmax(logits)?;
                Ok(Pass {
                    probs,
                    text: text_vec,
                    image: Some(img),
                    fused,
                })
            }
            Network::Mnn2 {
                semantic,
                sentiment,
                semantic_text,
                sentiment_text,
                text_fusion,
                image: image_layer,
                fusion,
                out,
            } => {
                let xs = g.gather(p[*semantic], &seq.ids)?;
                let xs = g.dropout(xs, cfg.dropout_in, train, rng)?;
                let xt = g.gather(p[*sentiment], &seq.ids)?;
                let xt = g.dropout(xt, cfg.dropout_in, train, rng)?;
                let a = Self::lstm_stack(g, p, semantic_text, xs, len)?;
                let b = Self::lstm_stack(g, p, sentiment_text, xt, len)?;
                let both = g.concat(a, b)?;
                let text_vec = text_fusion.forward(g, p, both)?;
                let img_in = self.image_input(g, image)?;
                let img = image_layer.forward(g, p, img_in)?;
                let fused = g.concat(text_vec, img)?;
                let hidden = fusion.forward(g, p, fused)?;
                let logits = out.forward(g, p, hidden)?;
                let probs = g.softmax(logits)?;
                Ok(Pass {
                    probs,
                    text: text_vec,
                    image: Some(img),
                    fused,
                })
            }
        }
    }

    /// Class probabilities with dropout disabled.
    pub fn predict_proba(
        &self,
        seq: &TokenSequence,
        image: Option<&[f32]>,
    ) -> Result<Vec<f64>, ModelError> {
        Ok(self.trace(seq, image)?.probabilities)
    }

    /// Inference pass that also reports the intermediate vectors.
    pub fn trace(
        &self,
        seq: &TokenSequence,
        image: Option<&[f32]>,
    ) -> Result<ForwardTrace, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let pass = self.run(&mut g, &p, seq, image, Mode::Infer, &mut unused)?;
        Ok(ForwardTrace {
            probabilities: g.value(pass.probs).data().to_vec(),
            text: g.value(pass.text).data().to_vec(),
            image: pass.image.map(|v| g.value(v).data().to_vec()),
            fused: g.value(pass.fused).data().to_vec(),
        })
    }

    /// Cross-entropy of `target` without gradients.
    pub fn loss(
        &self,
        seq: &TokenSequence,
        image: Option<&[f32]>,
        target: usize,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let pass = self.run(&mut g, &p, seq, image, mode, rng)?;
        let loss = g.cross_entropy(pass.probs, target)?;
        Ok(g.value(loss).data()[0])
    }

    /// Cross-entropy of `target` and its gradient for every trainable parameter.
    pub fn loss_and_gradients(
        &self,
        seq: &TokenSequence,
        image: Option<&[f32]>,
        target: usize,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Gradients), ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true)?;
        let pass = self.run(&mut g, &p, seq, image, mode, rng)?;
        let loss = g.cross_entropy(pass.probs, target)?;
        g.backward(loss)?;
        let grads = self
            .params
            .iter()
            .map(|(id, param)| {
                if !param.trainable {
                    return None;
                }
                Some(
                    g.grad(p[id])
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; param.value.len()]),
                )
            })
            .collect();
        Ok((g.value(loss).data()[0], grads))
    }

    fn expect(&self, op: &'static str, arch: Architecture) -> Result<(), ModelError> {
        if self.architecture() != arch {
            return Err(ModelError::WrongArchitecture {
                op,
                expected: arch,
                actual: self.architecture(),
            });
        }
        Ok(())
    }
}

/// Class probabilities from a text-only BiLSTM model.
pub fn forward_bilstm_glove(seq: &TokenSequence, model: &Model) -> Result<Vec<f64>, ModelError> {
    model.expect("forward_bilstm_glove", Architecture::BiLstmGlove)?;
    model.predict_proba(seq, None)
}

/// Class probabilities from an MNN-I model.
pub fn forward_mnn1(
    seq: &TokenSequence,
    image: &[f32],
    model: &Model,
) -> Result<Vec<f64>, ModelError> {
    model.expect("forward_mnn1", Architecture::Mnn1)?;
    model.predict_proba(seq, Some(image))
}

/// Class probabilities from an MNN-II model.
pub fn forward_mnn2(
    seq: &TokenSequence,
    image: &[f32],
    model: &Model,
) -> Result<Vec<f64>, ModelError> {
    model.expect("forward_mnn2", Architecture::Mnn2)?;
    model.predict_proba(seq, Some(image))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Labels for all three tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Prediction {
    pub sentiment: TaskALabel,
    pub flags: TaskBLabels,
    pub scales: TaskCLabels,
}

/// Builds a [`Prediction`] from per-head probability vectors.
pub fn assemble_prediction(
    outputs: &BTreeMap<TaskHead, Vec<f64>>,
) -> Result<Prediction, ModelError> {
    let pick = |h: TaskHead| {
        outputs
            .get(&h)
            .map(|p| argmax(p))
            .ok_or(ModelError::MissingHead(h))
    };
    Ok(Prediction {
        sentiment: TaskALabel::from_index(pick(TaskHead::A)?).expect("3-way head"),
        flags: TaskBLabels {
            humorous: pick(TaskHead::BHumour)? == 1,
            sarcastic: pick(TaskHead::BSarcasm)? == 1,
            offensive: pick(TaskHead::BOffense)? == 1,
            motivational: pick(TaskHead::BMotivational)? == 1,
        },
        scales: TaskCLabels {
            humour: HumourScale::from_index(pick(TaskHead::CHumour)?).expect("4-way head"),
            sarcasm: SarcasmScale::from_index(pick(TaskHead::CSarcasm)?).expect("4-way head"),
            offense: OffenseScale::from_index(pick(TaskHead::COffense)?).expect("4-way head"),
            motivational: MotivationalScale::from_index(pick(TaskHead::CMotivational)?)
                .expect("2-way head"),
        },
    })
}

/// Runs one model per head over a caption and image and assembles the labels.
pub fn predict_all_tasks(
    text: &NormalizedText,
    image: Option<&[f32]>,
    models: &BTreeMap<TaskHead, Model>,
) -> Result<Prediction, ModelError> {
    let mut outputs = BTreeMap::new();
    for head in TaskHead::ALL {
        let model = models.get(&head).ok_or(ModelError::MissingHead(head))?;
        let img = if model.architecture().uses_image() {
            image
        } else {
            None
        };
        outputs.insert(head, model.predict_proba(&model.encode_text(text), img)?);
    }
    assemble_prediction(&outputs)
}
