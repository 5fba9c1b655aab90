//! Seeded synthetic meme corpora for tests, demos and the surrogate
//! experiment.
//!
//! Sentiment is planted in both modalities, unevenly: captions only separate
//! `positive` from the other two classes, while image vectors sit around a
//! distinct centroid per class. A text-only model can therefore not tell
//! `neutral` from `negative`; a fused model can.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    write_corpus, DatasetError, HumourScale, Labels, MemeRecord, MotivationalScale, OffenseScale,
    SarcasmScale, TaskALabel, TaskCLabels,
};
use crate::embeddings::{
    write_image_embeddings, EmbeddingError, ImageEmbedding, IMAGE_EMBEDDING_DIM,
};

const FILLER: &[&str] = &[
    "when", "you", "the", "cat", "monday", "boss", "friend", "meme", "coffee", "weekend",
    "finally", "school", "dog", "morning", "teacher", "pizza", "work", "mom", "phone", "game",
    "night", "sleep", "exam", "bus", "rain", "tea", "movie", "music", "party", "homework",
];

/// Words planted in `positive` captions.
pub const POSITIVE_MARKERS: &[&str] = &["awesome", "wonderful", "brilliant"];
/// Words planted in `neutral` and `negative` captions alike.
pub const OTHER_MARKERS: &[&str] = &["whatever", "ordinary", "usual"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub records: usize,
    pub image_dim: usize,
    /// Half-width of the uniform distribution the class centroids are drawn from.
    pub centroid_scale: f32,
    /// Half-width of the uniform noise added to each image vector.
    pub noise_scale: f32,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            records: 300,
            image_dim: IMAGE_EMBEDDING_DIM,
            centroid_scale: 0.5,
            noise_scale: 1.0,
            min_words: 3,
            max_words: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<MemeRecord>,
    pub images: Vec<ImageEmbedding>,
}

fn random_scales(rng: &mut ChaCha8Rng) -> TaskCLabels {
    TaskCLabels {
        humour: HumourScale::from_index(rng.gen_range(0..4)).unwrap(),
        sarcasm: SarcasmScale::from_index(rng.gen_range(0..4)).unwrap(),
        offense: OffenseScale::from_index(rng.gen_range(0..4)).unwrap(),
        motivational: MotivationalScale::from_index(rng.gen_range(0..2)).unwrap(),
    }
}

/// Builds a class-balanced corpus (up to rounding) with consistent labels for
/// every task. Task B/C labels carry no signal.
pub fn synthetic_corpus(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centroids: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            (0..cfg.image_dim)
                .map(|_| rng.gen_range(-cfg.centroid_scale..=cfg.centroid_scale))
                .collect()
        })
        .collect();
    let mut classes: Vec<usize> = (0..cfg.records).map(|i| i % 3).collect();
    classes.shuffle(&mut rng);

    let mut records = Vec::with_capacity(cfg.records);
    let mut images = Vec::with_capacity(cfg.records);
    for (i, &class) in classes.iter().enumerate() {
        let id = format!("syn{i:04}");
        let n_words = rng.gen_range(cfg.min_words..=cfg.max_words.max(cfg.min_words));
        let mut words: Vec<&str> = (0..n_words)
            .map(|_| *FILLER.choose(&mut rng).unwrap())
            .collect();
        let markers = if class == 0 {
            POSITIVE_MARKERS
        } else {
            OTHER_MARKERS
        };
        let at = rng.gen_range(0..=words.len());
        words.insert(at, markers.choose(&mut rng).unwrap());
        let scales = random_scales(&mut rng);
        let vector = centroids[class]
            .iter()
            .map(|c| c + rng.gen_range(-cfg.noise_scale..=cfg.noise_scale))
            .collect();
        records.push(MemeRecord {
            id: id.clone(),
            image_ref: format!("{id}.jpg"),
            description: words.join(" "),
            labels: Labels {
                sentiment: TaskALabel::from_index(class),
                flags: Some(scales.implied_flags()),
                scales: Some(scales),
            },
        });
        images.push(ImageEmbedding {
            meme_id: id,
            vector,
        });
    }
    SyntheticCorpus { records, images }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthWriteError {
    #[error(transparent)]
    Corpus(#[from] DatasetError),
    #[error(transparent)]
    Images(#[from] EmbeddingError),
}

impl SyntheticCorpus {
    /// Writes `corpus.csv` and `images.memb` into `dir` and returns both paths.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), SynthWriteError> {
        let dir = dir.as_ref();
        let corpus = dir.join("corpus.csv");
        let images = dir.join("images.memb");
        write_corpus(&self.records, &corpus)?;
        write_image_embeddings(&self.images, &images)?;
        Ok((corpus, images))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_distribution, TaskHead};
    use crate::textnorm::ContractionDict;

    #[test]
    fn balanced_deterministic_and_consistent() {
        let cfg = SyntheticConfig {
            records: 30,
            image_dim: 8,
            ..SyntheticConfig::default()
        };
        let a = synthetic_corpus(&cfg);
        assert_eq!(a, synthetic_corpus(&cfg));
        assert_eq!(
            class_distribution(&a.records, TaskHead::A).counts,
            vec![10, 10, 10]
        );
        assert!(crate::dataset::check_consistency(&a.records).is_empty());
        assert!(a.images.iter().all(|e| e.vector.len() == 8));
        for r in &a.records {
            let positive = POSITIVE_MARKERS
                .iter()
                .any(|m| r.description.split(' ').any(|w| w == *m));
            assert_eq!(positive, r.labels.sentiment == Some(TaskALabel::Positive));
        }
    }

    #[test]
    fn words_survive_normalization() {
        let dict = ContractionDict::builtin();
        for w in FILLER.iter().chain(POSITIVE_MARKERS).chain(OTHER_MARKERS) {
            assert!(dict.get(w).is_none(), "{w} is a contraction key");
            assert_eq!(
                crate::textnorm::normalize(w, &dict, None).tokens,
                vec![w.to_string()]
            );
        }
    }
}
