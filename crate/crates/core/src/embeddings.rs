//! Vocabulary, word-vector tables and the `MEMB` image-embedding file format.
//!
//! `MEMB` layout (all integers little-endian):
//!
//! ```text
//! b"MEMB" | version: u16 | dim: u32 | count: u32
//! count × ( id_len: u16 | id: UTF-8 bytes | dim × f32 )
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::dataset::TokenSequence;
use crate::textnorm::NormalizedText;

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Length of the pooled image feature vectors.
pub const IMAGE_EMBEDDING_DIM: usize = 2048;

pub const MEMB_MAGIC: &[u8; 4] = b"MEMB";
pub const MEMB_VERSION: u16 = 1;

/// Half-width of the uniform range used for rows with no pretrained vector.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: invalid number {value:?}")]
    InvalidNumber { line: usize, value: String },
    #[error("non-finite value in embedding data")]
    NonFinite,
    #[error("not an image-embedding file (bad magic)")]
    BadMagic,
    #[error("unsupported image-embedding file version {0}")]
    UnsupportedVersion(u16),
    #[error("image-embedding dimension {found}, expected {expected}")]
    ImageDimension { expected: usize, found: usize },
    #[error("image-embedding file truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("duplicate meme id {0:?}")]
    DuplicateId(String),
    #[error("meme id is not valid UTF-8 or too long")]
    InvalidId,
}

/// Token ↔ index map with PAD at 0 and UNK at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabIndex {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl VocabIndex {
    /// A vocabulary holding PAD, UNK and then `tokens` in the given order.
    /// Duplicates and the reserved strings are ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = VocabIndex {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD_INDEX);
        v.index.insert(UNK_TOKEN.to_string(), UNK_INDEX);
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// All tokens in index order, reserved slots included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Vocabulary of tokens seen at least `min_count` times, ordered by
/// descending frequency then lexicographically.
pub fn build_vocab(corpus: &[NormalizedText], min_count: usize) -> VocabIndex {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for t in &text.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    VocabIndex::from_tokens(kept.into_iter().map(|(t, _)| t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbeddingFamily {
    /// Co-occurrence vectors such as GloVe.
    Semantic,
    /// Sentiment-specific vectors.
    SentimentSpecific,
}

/// A `V×d` word-vector matrix aligned with a [`VocabIndex`]. Row 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub values: Tensor,
    pub family: EmbeddingFamily,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

fn uniform_row(rng: &mut ChaCha8Rng, d: usize) -> impl Iterator<Item = f64> + '_ {
    (0..d).map(move |_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
}

/// A seeded, trainable table for when no pretrained vectors are available.
pub fn random_table(
    vocab_len: usize,
    d: usize,
    family: EmbeddingFamily,
    seed: u64,
) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; d];
    for _ in 1..vocab_len {
        data.extend(uniform_row(&mut rng, d));
    }
    EmbeddingTable {
        values: Tensor::matrix(vocab_len, d, data).expect("consistent shape"),
        family,
        trainable: true,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, EmbeddingError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| EmbeddingError::UnreadableFile {
            path: path.display().to_string(),
            source,
        })
}

/// Reads a `token v1 … vd` text file into a frozen table aligned with `vocab`.
///
/// In-vocabulary tokens missing from the file get seeded uniform rows in
/// `[-0.05, 0.05]`; UNK gets the mean of every vector in the file.
pub fn load_word_vectors(
    path: impl AsRef<Path>,
    vocab: &VocabIndex,
    d: usize,
    family: EmbeddingFamily,
    seed: u64,
) -> Result<EmbeddingTable, EmbeddingError> {
    let path = path.as_ref();
    let reader = open(path)?;
    let v = vocab.len();
    let mut data = vec![0.0; v * d];
    let mut filled = vec![false; v];
    let mut mean = vec![0.0; d];
    let mut loaded = 0usize;
    let mut values = Vec::with_capacity(d);

    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| EmbeddingError::UnreadableFile {
            path: path.display().to_string(),
            source,
        })?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        values.clear();
        for p in parts {
            let x: f64 = p.parse().map_err(|_| EmbeddingError::InvalidNumber {
                line: i + 1,
                value: p.to_string(),
            })?;
            if !x.is_finite() {
                return Err(EmbeddingError::NonFinite);
            }
            values.push(x);
        }
        if values.len() != d {
            return Err(EmbeddingError::DimensionMismatch {
                line: i + 1,
                expected: d,
                found: values.len(),
            });
        }
        loaded += 1;
        mean.iter_mut().zip(&values).for_each(|(m, x)| *m += x);
        if let Some(idx) = vocab.index_of(word) {
            if idx > UNK_INDEX && !filled[idx] {
                data[idx * d..(idx + 1) * d].copy_from_slice(&values);
                filled[idx] = true;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in UNK_INDEX + 1..v {
        if !filled[idx] {
            for (slot, x) in data[idx * d..(idx + 1) * d]
                .iter_mut()
                .zip(uniform_row(&mut rng, d))
            {
                *slot = x;
            }
        }
    }
    let unk = &mut data[UNK_INDEX * d..(UNK_INDEX + 1) * d];
    if loaded > 0 {
        for (slot, m) in unk.iter_mut().zip(&mean) {
            *slot = m / loaded as f64;
        }
    } else {
        for (slot, x) in unk.iter_mut().zip(uniform_row(&mut rng, d)) {
            *slot = x;
        }
    }

    Ok(EmbeddingTable {
        values: Tensor::matrix(v, d, data).expect("consistent shape"),
        family,
        trainable: false,
    })
}

/// The set of tokens named in a word-vector file (first field of each line).
pub fn word_list(path: impl AsRef<Path>) -> Result<HashSet<String>, EmbeddingError> {
    let path = path.as_ref();
    let mut out = HashSet::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|source| EmbeddingError::UnreadableFile {
            path: path.display().to_string(),
            source,
        })?;
        if let Some(w) = line.split_whitespace().next() {
            out.insert(w.to_string());
        }
    }
    Ok(out)
}

/// Gathers the table rows named by `seq` into an `n×d` matrix.
pub fn lookup_sequence(seq: &TokenSequence, table: &EmbeddingTable) -> Tensor {
    let d = table.dim();
    let mut data = Vec::with_capacity(seq.len() * d);
    for &id in &seq.ids {
        data.extend_from_slice(table.row(id));
    }
    Tensor::matrix(seq.len(), d, data).expect("consistent shape")
}

/// Pooled image features for one meme.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub meme_id: String,
    pub vector: Vec<f32>,
}

impl ImageEmbedding {
    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|v| *v == 0.0)
    }
}

/// Serializes entries in the `MEMB` format. All vectors must share one
/// length; an empty list is written with the default dimension.
pub fn encode_image_embeddings(entries: &[ImageEmbedding]) -> Result<Vec<u8>, EmbeddingError> {
    let dim = entries
        .first()
        .map_or(IMAGE_EMBEDDING_DIM, |e| e.vector.len());
    let mut seen = HashSet::new();
    let mut buf = Vec::with_capacity(14 + entries.len() * (dim * 4 + 16));
    buf.extend_from_slice(MEMB_MAGIC);
    buf.extend_from_slice(&MEMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        if e.vector.len() != dim {
            return Err(EmbeddingError::ImageDimension {
                expected: dim,
                found: e.vector.len(),
            });
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        if !seen.insert(e.meme_id.as_str()) {
            return Err(EmbeddingError::DuplicateId(e.meme_id.clone()));
        }
        let id = e.meme_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| EmbeddingError::InvalidId)?;
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for v in &e.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_image_embeddings(
    entries: &[ImageEmbedding],
    path: impl AsRef<Path>,
) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    let bytes = encode_image_embeddings(entries)?;
    std::fs::write(path, bytes).map_err(|source| EmbeddingError::UnreadableFile {
        path: path.display().to_string(),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EmbeddingError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or(EmbeddingError::Truncated(self.bytes.len()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, EmbeddingError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, EmbeddingError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses a `MEMB` buffer. `expected_dim = None` accepts any header dimension.
pub fn decode_image_embeddings(
    bytes: &[u8],
    expected_dim: Option<usize>,
) -> Result<BTreeMap<String, ImageEmbedding>, EmbeddingError> {
    if bytes.len() < 4 || &bytes[..4] != MEMB_MAGIC {
        return Err(EmbeddingError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u16()?;
    if version != MEMB_VERSION {
        return Err(EmbeddingError::UnsupportedVersion(version));
    }
    let dim = cur.u32()? as usize;
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(EmbeddingError::ImageDimension {
                expected,
                found: dim,
            });
        }
    }
    let count = cur.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let id_len = cur.u16()? as usize;
        let id = std::str::from_utf8(cur.take(id_len)?).map_err(|_| EmbeddingError::InvalidId)?;
        let raw = cur.take(dim * 4)?;
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        if out.contains_key(id) {
            return Err(EmbeddingError::DuplicateId(id.to_string()));
        }
        out.insert(
            id.to_string(),
            ImageEmbedding {
                meme_id: id.to_string(),
                vector,
            },
        );
    }
    if cur.pos != bytes.len() {
        return Err(EmbeddingError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(out)
}

/// Reads a `MEMB` file whose vectors must be 2048 long.
pub fn read_image_embeddings(
    path: impl AsRef<Path>,
) -> Result<BTreeMap<String, ImageEmbedding>, EmbeddingError> {
    read_image_embeddings_with_dim(path, Some(IMAGE_EMBEDDING_DIM))
}

pub fn read_image_embeddings_with_dim(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<BTreeMap<String, ImageEmbedding>, EmbeddingError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| EmbeddingError::UnreadableFile {
        path: path.display().to_string(),
        source,
    })?;
    decode_image_embeddings(&bytes, expected_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn text(s: &str) -> NormalizedText {
        s.split_whitespace()
            .map(str::to_string)
            .collect::<Vec<_>>()
            .into()
    }

    #[test]
    fn vocab_thresholds_and_order() {
        let v = build_vocab(&[text("a a b")], 2);
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a"]);
        let v = build_vocab(&[], 1);
        assert_eq!(v.len(), 2);
        assert_eq!(v.index_of(PAD_TOKEN), Some(0));
        let v = build_vocab(&[text("c b b a c d")], 1);
        assert_eq!(&v.tokens()[2..], &["b", "c", "a", "d"]);
    }

    #[test]
    fn word_vectors_load() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "cat 1 2 3").unwrap();
        writeln!(f, "dog 3 2 1").unwrap();
        writeln!(f, "extra 2 2 2").unwrap();
        let vocab = VocabIndex::from_tokens(["cat", "missing"]);
        let t = load_word_vectors(f.path(), &vocab, 3, EmbeddingFamily::Semantic, 1).unwrap();
        assert_eq!(t.row(0), &[0.0; 3]);
        assert_eq!(t.row(2), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row(1), &[2.0, 2.0, 2.0]);
        assert!(t.row(3).iter().all(|x| x.abs() <= INIT_RANGE));
        assert!(!t.trainable);

        let bad = load_word_vectors(f.path(), &vocab, 4, EmbeddingFamily::Semantic, 1);
        assert!(matches!(
            bad,
            Err(EmbeddingError::DimensionMismatch {
                line: 1,
                expected: 4,
                found: 3
            })
        ));
        let missing = load_word_vectors(
            "/nonexistent/vectors.txt",
            &vocab,
            3,
            EmbeddingFamily::Semantic,
            1,
        );
        assert!(matches!(
            missing,
            Err(EmbeddingError::UnreadableFile { .. })
        ));
    }

    #[test]
    fn lookup_gathers_rows() {
        let t = random_table(5, 3, EmbeddingFamily::SentimentSpecific, 9);
        let seq = TokenSequence {
            ids: vec![0, 0, 0],
            true_length: 0,
        };
        assert!(lookup_sequence(&seq, &t).data().iter().all(|x| *x == 0.0));
        let seq = TokenSequence {
            ids: vec![4, 0, 0],
            true_length: 1,
        };
        let m = lookup_sequence(&seq, &t);
        assert_eq!(m.row(0), t.row(4));
        assert!(m.row(1).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn image_embedding_round_trip_and_errors() {
        let entries: Vec<ImageEmbedding> = (0..3)
            .map(|i| ImageEmbedding {
                meme_id: format!("meme_{i}"),
                vector: (0..IMAGE_EMBEDDING_DIM)
                    .map(|k| (k as f32 * 0.001) - i as f32)
                    .collect(),
            })
            .collect();
        let bytes = encode_image_embeddings(&entries).unwrap();
        let back = decode_image_embeddings(&bytes, Some(IMAGE_EMBEDDING_DIM)).unwrap();
        assert_eq!(back.len(), 3);
        for e in &entries {
            assert_eq!(&back[&e.meme_id], e);
        }

        let zero = vec![ImageEmbedding {
            meme_id: "z".into(),
            vector: vec![0.0; IMAGE_EMBEDDING_DIM],
        }];
        let back = decode_image_embeddings(&encode_image_embeddings(&zero).unwrap(), None).unwrap();
        assert!(back["z"].is_zero());

        assert!(matches!(
            decode_image_embeddings(&bytes, Some(16)),
            Err(EmbeddingError::ImageDimension { .. })
        ));
        assert!(matches!(
            decode_image_embeddings(b"JUNKxxxxxxxx", None),
            Err(EmbeddingError::BadMagic)
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_image_embeddings(&extra, None),
            Err(EmbeddingError::TrailingBytes(1))
        ));

        let dup = vec![zero[0].clone(), zero[0].clone()];
        assert!(matches!(
            encode_image_embeddings(&dup),
            Err(EmbeddingError::DuplicateId(_))
        ));
    }

    #[test]
    fn truncated_image_files_never_decode() {
        let entries: Vec<ImageEmbedding> = (0..2)
            .map(|i| ImageEmbedding {
                meme_id: format!("m{i}"),
                vector: vec![i as f32; 8],
            })
            .collect();
        let bytes = encode_image_embeddings(&entries).unwrap();
        for cut in 0..bytes.len() {
            let r = decode_image_embeddings(&bytes[..cut], None);
            assert!(
                matches!(
                    r,
                    Err(EmbeddingError::BadMagic) | Err(EmbeddingError::Truncated(_))
                ),
                "prefix {cut} gave {r:?}"
            );
        }
    }
}
