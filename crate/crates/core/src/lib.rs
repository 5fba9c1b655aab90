//! Multimodal meme sentiment classification.
//!
//! The crate covers the whole pipeline: caption normalization
//! ([`textnorm`]), corpus handling ([`dataset`]), word and image embeddings
//! ([`embeddings`]), a small reverse-mode autodiff engine ([`autograd`]) with
//! the LSTM and dense layers built on it ([`layers`]), the BiLSTM and
//! late-fusion classifiers ([`models`]), training and grid search
//! ([`training`]), and F1 scoring ([`metrics`]).

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod synth;
pub mod textnorm;
pub mod training;
