//! Meme corpus ingestion, the three-task label schema, train/dev splitting,
//! random oversampling and fixed-length token sequences.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::embeddings::{VocabIndex, PAD_INDEX, UNK_INDEX};
use crate::textnorm::NormalizedText;

/// Default sequence length for padded captions.
pub const DEFAULT_SEQ_LEN: usize = 75;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corpus is missing required column {0:?}")]
    MissingColumn(String),
    #[error("corpus contains no valid rows ({skipped} skipped)")]
    EmptyCorpus { skipped: usize },
    #[error("duplicate meme id {0:?}")]
    DuplicateId(String),
    #[error("{} row(s) have inconsistent task B / task C labels, first: {}", .0.len(), .0[0])]
    InconsistentLabels(Vec<ConsistencyViolation>),
    #[error("reading corpus {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("unknown task head {0:?}")]
    UnknownHead(String),
}

/// Normalizes a label spelling: lowercase, `_`/`-`/spaces collapsed to `_`.
fn label_key(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

macro_rules! label_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $canon:literal $(| $alias:literal)*),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $canon),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match label_key(s).as_str() {
                    $($canon $(| $alias)* => Ok($name::$variant),)+
                    other => Err(format!("unrecognised {} label {:?}", stringify!($name), other)),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

label_enum!(
    /// Task A sentiment.
    TaskALabel {
        Positive => "positive" | "very_positive",
        Neutral => "neutral",
        Negative => "negative" | "very_negative",
    }
);

label_enum!(HumourScale {
    NotFunny => "not_funny",
    Funny => "funny",
    VeryFunny => "very_funny",
    Hilarious => "hilarious",
});

label_enum!(SarcasmScale {
    NotSarcastic => "not_sarcastic",
    General => "general",
    TwistedMeaning => "twisted_meaning",
    VeryTwisted => "very_twisted",
});

label_enum!(OffenseScale {
    NotOffensive => "not_offensive",
    Slight => "slight" | "slightly_offensive" | "slightly",
    VeryOffensive => "very_offensive",
    HatefulOffensive => "hateful_offensive" | "hateful",
});

label_enum!(MotivationalScale {
    NotMotivational => "not_motivational",
    Motivational => "motivational",
});

/// Task B humour-type flags; several may be set at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TaskBLabels {
    pub humorous: bool,
    pub sarcastic: bool,
    pub offensive: bool,
    pub motivational: bool,
}

/// Task C intensity scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaskCLabels {
    pub humour: HumourScale,
    pub sarcasm: SarcasmScale,
    pub offense: OffenseScale,
    pub motivational: MotivationalScale,
}

impl TaskCLabels {
    /// The task B flags implied by these scales.
    pub fn implied_flags(&self) -> TaskBLabels {
        TaskBLabels {
            humorous: self.humour != HumourScale::NotFunny,
            sarcastic: self.sarcasm != SarcasmScale::NotSarcastic,
            offensive: self.offense != OffenseScale::NotOffensive,
            motivational: self.motivational == MotivationalScale::Motivational,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Labels {
    pub sentiment: Option<TaskALabel>,
    pub flags: Option<TaskBLabels>,
    pub scales: Option<TaskCLabels>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemeRecord {
    pub id: String,
    pub image_ref: String,
    pub description: String,
    pub labels: Labels,
}

/// One classification target. Each head is trained as its own model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TaskHead {
    A,
    BHumour,
    BSarcasm,
    BOffense,
    BMotivational,
    CHumour,
    CSarcasm,
    COffense,
    CMotivational,
}

impl TaskHead {
    pub const ALL: [TaskHead; 9] = [
        TaskHead::A,
        TaskHead::BHumour,
        TaskHead::BSarcasm,
        TaskHead::BOffense,
        TaskHead::BMotivational,
        TaskHead::CHumour,
        TaskHead::CSarcasm,
        TaskHead::COffense,
        TaskHead::CMotivational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskHead::A => "a",
            TaskHead::BHumour => "b-humour",
            TaskHead::BSarcasm => "b-sarcasm",
            TaskHead::BOffense => "b-offense",
            TaskHead::BMotivational => "b-motivational",
            TaskHead::CHumour => "c-humour",
            TaskHead::CSarcasm => "c-sarcasm",
            TaskHead::COffense => "c-offense",
            TaskHead::CMotivational => "c-motivational",
        }
    }

    pub fn task(self) -> Task {
        match self {
            TaskHead::A => Task::A,
            TaskHead::BHumour
            | TaskHead::BSarcasm
            | TaskHead::BOffense
            | TaskHead::BMotivational => Task::B,
            _ => Task::C,
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        fn names<T: Copy>(all: &[T], f: fn(T) -> &'static str) -> Vec<&'static str> {
            all.iter().map(|v| f(*v)).collect()
        }
        match self {
            TaskHead::A => names(TaskALabel::ALL, TaskALabel::as_str),
            TaskHead::CHumour => names(HumourScale::ALL, HumourScale::as_str),
            TaskHead::CSarcasm => names(SarcasmScale::ALL, SarcasmScale::as_str),
            TaskHead::COffense => names(OffenseScale::ALL, OffenseScale::as_str),
            TaskHead::CMotivational => names(MotivationalScale::ALL, MotivationalScale::as_str),
            _ => vec!["no", "yes"],
        }
    }

    /// Number of output classes.
    pub fn classes(self) -> usize {
        match self {
            TaskHead::A => 3,
            TaskHead::CHumour | TaskHead::CSarcasm | TaskHead::COffense => 4,
            _ => 2,
        }
    }

    /// Class index of `record` for this head, when the label is present.
    pub fn class_of(self, record: &MemeRecord) -> Option<usize> {
        let l = &record.labels;
        match self {
            TaskHead::A => l.sentiment.map(TaskALabel::index),
            TaskHead::BHumour => l.flags.map(|f| f.humorous as usize),
            TaskHead::BSarcasm => l.flags.map(|f| f.sarcastic as usize),
            TaskHead::BOffense => l.flags.map(|f| f.offensive as usize),
            TaskHead::BMotivational => l.flags.map(|f| f.motivational as usize),
            TaskHead::CHumour => l.scales.map(|s| s.humour.index()),
            TaskHead::CSarcasm => l.scales.map(|s| s.sarcasm.index()),
            TaskHead::COffense => l.scales.map(|s| s.offense.index()),
            TaskHead::CMotivational => l.scales.map(|s| s.motivational.index()),
        }
    }
}

impl fmt::Display for TaskHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskHead {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, DatasetError> {
        let key = label_key(s).replace('_', "-");
        TaskHead::ALL
            .into_iter()
            .find(|h| h.name() == key)
            .ok_or_else(|| DatasetError::UnknownHead(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Task {
    A,
    B,
    C,
}

impl Task {
    pub fn heads(self) -> &'static [TaskHead] {
        match self {
            Task::A => &TaskHead::ALL[0..1],
            Task::B => &TaskHead::ALL[1..5],
            Task::C => &TaskHead::ALL[5..9],
        }
    }

    fn columns(self) -> &'static [&'static str] {
        match self {
            Task::A => &["sentiment"],
            Task::B => &["humorous", "sarcastic", "offensive", "motivational"],
            Task::C => &[
                "humour_scale",
                "sarcasm_scale",
                "offense_scale",
                "motivational",
            ],
        }
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_lowercase().as_str() {
            "a" => Ok(Task::A),
            "b" => Ok(Task::B),
            "c" => Ok(Task::C),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// Which label groups [`load_corpus`] must find and parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskSchema {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

impl TaskSchema {
    pub const UNLABELED: TaskSchema = TaskSchema {
        a: false,
        b: false,
        c: false,
    };
    pub const ALL: TaskSchema = TaskSchema {
        a: true,
        b: true,
        c: true,
    };

    pub fn for_task(task: Task) -> Self {
        let mut s = Self::UNLABELED;
        match task {
            Task::A => s.a = true,
            Task::B => s.b = true,
            Task::C => s.c = true,
        }
        s
    }

    pub fn for_head(head: TaskHead) -> Self {
        Self::for_task(head.task())
    }

    fn tasks(self) -> impl Iterator<Item = Task> {
        [(self.a, Task::A), (self.b, Task::B), (self.c, Task::C)]
            .into_iter()
            .filter(|(on, _)| *on)
            .map(|(_, t)| t)
    }
}

fn parse_flag(s: &str) -> Result<bool, String> {
    match label_key(s).as_str() {
        "yes" | "y" | "true" | "1" => Ok(true),
        "no" | "n" | "false" | "0" => Ok(false),
        k if k.starts_with("not_") => Ok(false),
        "humorous" | "humour" | "funny" | "sarcastic" | "offensive" | "motivational" => Ok(true),
        other => Err(format!("unrecognised flag {other:?}")),
    }
}

fn parse_motivational(s: &str) -> Result<MotivationalScale, String> {
    s.parse::<MotivationalScale>().or_else(|_| {
        parse_flag(s).map(|b| {
            if b {
                MotivationalScale::Motivational
            } else {
                MotivationalScale::NotMotivational
            }
        })
    })
}

/// A row that [`load_corpus`] dropped, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedRow {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsistencyViolation {
    pub id: String,
    pub field: &'static str,
}

impl fmt::Display for ConsistencyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "meme {:?}: {} flag disagrees with its scale",
            self.id, self.field
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub records: Vec<MemeRecord>,
    pub skipped: Vec<SkippedRow>,
}

fn parse_row(
    row: &csv::StringRecord,
    col: &BTreeMap<&str, usize>,
    schema: TaskSchema,
) -> Result<Labels, String> {
    let get = |name: &str| row.get(col[name]).unwrap_or("");
    let mut labels = Labels::default();
    for task in schema.tasks() {
        match task {
            Task::A => labels.sentiment = Some(get("sentiment").parse()?),
            Task::B => {
                labels.flags = Some(TaskBLabels {
                    humorous: parse_flag(get("humorous"))?,
                    sarcastic: parse_flag(get("sarcastic"))?,
                    offensive: parse_flag(get("offensive"))?,
                    motivational: parse_flag(get("motivational"))?,
                })
            }
            Task::C => {
                labels.scales = Some(TaskCLabels {
                    humour: get("humour_scale").parse()?,
                    sarcasm: get("sarcasm_scale").parse()?,
                    offense: get("offense_scale").parse()?,
                    motivational: parse_motivational(get("motivational"))?,
                })
            }
        }
    }
    Ok(labels)
}

/// Reads a corpus CSV. Label groups selected by `schema` must have all of
/// their columns; rows whose labels cannot be mapped are skipped and reported.
pub fn load_corpus(
    path: impl AsRef<Path>,
    schema: TaskSchema,
) -> Result<LoadedCorpus, DatasetError> {
    let path = path.as_ref();
    let csv_err = |source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let header_names: Vec<String> = headers.iter().map(|h| h.trim().to_lowercase()).collect();

    let mut required: Vec<&str> = vec!["id", "image", "description"];
    for task in schema.tasks() {
        required.extend_from_slice(task.columns());
    }
    let mut col = BTreeMap::new();
    for name in required {
        let idx = header_names
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
        col.insert(name, idx);
    }

    let mut out = LoadedCorpus::default();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(csv_err)?;
        let id = row.get(col["id"]).unwrap_or("").trim().to_string();
        if id.is_empty() {
            out.skipped.push(SkippedRow {
                line,
                id,
                reason: "empty id".into(),
            });
            continue;
        }
        let labels = match parse_row(&row, &col, schema) {
            Ok(l) => l,
            Err(reason) => {
                out.skipped.push(SkippedRow { line, id, reason });
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        out.records.push(MemeRecord {
            id,
            image_ref: row.get(col["image"]).unwrap_or("").trim().to_string(),
            description: row.get(col["description"]).unwrap_or("").to_string(),
            labels,
        });
    }
    if out.records.is_empty() {
        return Err(DatasetError::EmptyCorpus {
            skipped: out.skipped.len(),
        });
    }
    let violations = check_consistency(&out.records);
    if !violations.is_empty() {
        return Err(DatasetError::InconsistentLabels(violations));
    }
    Ok(out)
}

/// Column order used by [`write_corpus`].
pub const CORPUS_COLUMNS: [&str; 11] = [
    "id",
    "image",
    "description",
    "sentiment",
    "humorous",
    "sarcastic",
    "offensive",
    "motivational",
    "humour_scale",
    "sarcasm_scale",
    "offense_scale",
];

fn flag_str(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Writes records as a corpus CSV readable by [`load_corpus`]. Absent label
/// groups leave their cells empty.
pub fn write_corpus(records: &[MemeRecord], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let csv_err = |source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CORPUS_COLUMNS).map_err(csv_err)?;
    for r in records {
        let l = &r.labels;
        let sentiment = l.sentiment.map_or("", |s| s.as_str());
        let f = l.flags;
        let flag = |pick: fn(&TaskBLabels) -> bool| f.as_ref().map_or("", |f| flag_str(pick(f)));
        let motivational = match (f, l.scales) {
            (Some(f), _) => flag_str(f.motivational),
            (None, Some(c)) => flag_str(c.motivational == MotivationalScale::Motivational),
            (None, None) => "",
        };
        let c = l.scales;
        w.write_record([
            r.id.as_str(),
            &r.image_ref,
            &r.description,
            sentiment,
            flag(|f| f.humorous),
            flag(|f| f.sarcastic),
            flag(|f| f.offensive),
            motivational,
            c.map_or("", |c| c.humour.as_str()),
            c.map_or("", |c| c.sarcasm.as_str()),
            c.map_or("", |c| c.offense.as_str()),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| DatasetError::Csv {
        path: path.display().to_string(),
        source: source.into(),
    })
}

/// Rows whose task B flags disagree with their task C scales.
pub fn check_consistency(records: &[MemeRecord]) -> Vec<ConsistencyViolation> {
    let mut out = Vec::new();
    for r in records {
        let (Some(flags), Some(scales)) = (r.labels.flags, r.labels.scales) else {
            continue;
        };
        let implied = scales.implied_flags();
        let checks = [
            ("humorous", flags.humorous, implied.humorous),
            ("sarcastic", flags.sarcastic, implied.sarcastic),
            ("offensive", flags.offensive, implied.offensive),
            ("motivational", flags.motivational, implied.motivational),
        ];
        for (field, a, b) in checks {
            if a != b {
                out.push(ConsistencyViolation {
                    id: r.id.clone(),
                    field,
                });
            }
        }
    }
    out
}

/// Seeded shuffle-and-cut. The dev side receives `dev_fraction * len` items,
/// rounded half to even.
///
/// # Panics
/// If `dev_fraction` is outside `(0, 1)`.
pub fn split_train_dev<T: Clone>(items: &[T], dev_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(
        dev_fraction > 0.0 && dev_fraction < 1.0,
        "dev fraction must lie in (0, 1), got {dev_fraction}"
    );
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = (dev_fraction * items.len() as f64).round_ties_even() as usize;
    let (dev_idx, train_idx) = order.split_at(n_dev);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    (pick(train_idx), pick(dev_idx))
}

/// Random oversampling: every class is topped up with seeded uniform
/// duplicates of its own members until it matches the largest class.
/// Originals keep their order; duplicates follow, grouped by class.
pub fn oversample_minority<T: Clone>(
    items: &[T],
    class_of: impl Fn(&T) -> usize,
    seed: u64,
) -> Vec<T> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_class.entry(class_of(item)).or_default().push(i);
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = items.to_vec();
    for members in by_class.values() {
        for _ in members.len()..target {
            let pick = members[rng.gen_range(0..members.len())];
            out.push(items[pick].clone());
        }
    }
    out
}

/// Token ids padded (or truncated) to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps tokens to ids (unknown → UNK), keeps the first `n`, pads with PAD.
///
/// # Panics
/// If `n == 0`.
pub fn pad_or_truncate(tokens: &NormalizedText, vocab: &VocabIndex, n: usize) -> TokenSequence {
    assert!(n >= 1, "sequence length must be positive");
    let mut ids: Vec<usize> = tokens
        .tokens
        .iter()
        .take(n)
        .map(|t| vocab.index_of(t).unwrap_or(UNK_INDEX))
        .collect();
    let true_length = ids.len();
    ids.resize(n, PAD_INDEX);
    TokenSequence { ids, true_length }
}

/// Class counts for one head, in class-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Histogram {
    pub head: TaskHead,
    pub classes: Vec<&'static str>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Exact per-class counts of `head` over records carrying that label.
pub fn class_distribution(records: &[MemeRecord], head: TaskHead) -> Histogram {
    let mut counts = vec![0; head.classes()];
    for r in records {
        if let Some(c) = head.class_of(r) {
            counts[c] += 1;
        }
    }
    Histogram {
        head,
        classes: head.class_names(),
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(id: &str, sentiment: TaskALabel) -> MemeRecord {
        MemeRecord {
            id: id.into(),
            image_ref: format!("{id}.jpg"),
            description: String::new(),
            labels: Labels {
                sentiment: Some(sentiment),
                ..Labels::default()
            },
        }
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const FULL_HEADER: &str =
        "id,image,description,sentiment,humorous,sarcastic,offensive,motivational,humour_scale,sarcasm_scale,offense_scale";

    #[test]
    fn loads_well_formed_corpus() {
        let f = write_csv(&format!(
            "{FULL_HEADER}\n\
             m1,m1.jpg,\"hello, world\",Positive,yes,no,no,yes,funny,not_sarcastic,not_offensive\n\
             m2,m2.jpg,second,neutral,yes,yes,yes,no,hilarious,general,slight\n\
             m3,m3.jpg,,NEGATIVE,no,no,no,no,Not Funny,not sarcastic,not_offensive\n"
        ));
        let c = load_corpus(f.path(), TaskSchema::ALL).unwrap();
        assert_eq!(c.records.len(), 3);
        assert!(c.skipped.is_empty());
        assert_eq!(c.records[0].description, "hello, world");
        assert_eq!(
            c.records[1].labels.scales.unwrap().humour,
            HumourScale::Hilarious
        );
        assert_eq!(c.records[2].labels.sentiment, Some(TaskALabel::Negative));
        assert_eq!(c.records[2].description, "");
    }

    #[test]
    fn write_then_load() {
        let f = write_csv(&format!(
            "{FULL_HEADER}\n\
             m1,m1.jpg,\"hello, world\",positive,yes,no,no,yes,funny,not_sarcastic,not_offensive\n\
             m2,m2.jpg,\"say \"\"hi\"\"\",neutral,no,yes,yes,no,not_funny,general,slight\n"
        ));
        let c = load_corpus(f.path(), TaskSchema::ALL).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_corpus(&c.records, out.path()).unwrap();
        assert_eq!(
            load_corpus(out.path(), TaskSchema::ALL).unwrap().records,
            c.records
        );
        let unlabeled = [record("x", TaskALabel::Neutral)];
        write_corpus(&unlabeled, out.path()).unwrap();
        let back = load_corpus(out.path(), TaskSchema::for_task(Task::A)).unwrap();
        assert_eq!(back.records, unlabeled);
        assert!(load_corpus(out.path(), TaskSchema::for_task(Task::B)).is_err());
    }

    #[test]
    fn unmappable_rows_are_skipped() {
        let f = write_csv(
            "id,image,description,humour_scale,sarcasm_scale,offense_scale,motivational\n\
             a,a.jpg,x,superfunny,general,slight,no\n\
             b,b.jpg,y,hilarious,general,slight,no\n",
        );
        let c = load_corpus(f.path(), TaskSchema::for_task(Task::C)).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.skipped.len(), 1);
        assert_eq!(c.skipped[0].line, 2);
        assert_eq!(c.skipped[0].id, "a");
    }

    #[test]
    fn schema_errors() {
        let f = write_csv("id,image,description\na,a.jpg,x\n");
        assert!(matches!(
            load_corpus(f.path(), TaskSchema::for_task(Task::A)),
            Err(DatasetError::MissingColumn(c)) if c == "sentiment"
        ));
        assert_eq!(
            load_corpus(f.path(), TaskSchema::UNLABELED)
                .unwrap()
                .records
                .len(),
            1
        );

        let f = write_csv("id,image,description,sentiment\na,a.jpg,x,bogus\n");
        assert!(matches!(
            load_corpus(f.path(), TaskSchema::for_task(Task::A)),
            Err(DatasetError::EmptyCorpus { skipped: 1 })
        ));

        let f = write_csv("id,image,description\na,a.jpg,x\na,b.jpg,y\n");
        assert!(matches!(
            load_corpus(f.path(), TaskSchema::UNLABELED),
            Err(DatasetError::DuplicateId(_))
        ));
    }

    #[test]
    fn inconsistent_b_and_c_labels_are_rejected() {
        let f = write_csv(&format!(
            "{FULL_HEADER}\nm1,m1.jpg,x,positive,no,no,no,no,funny,not_sarcastic,not_offensive\n"
        ));
        match load_corpus(f.path(), TaskSchema::ALL) {
            Err(DatasetError::InconsistentLabels(v)) => {
                assert_eq!(
                    v,
                    vec![ConsistencyViolation {
                        id: "m1".into(),
                        field: "humorous"
                    }]
                );
            }
            other => panic!("expected inconsistency, got {other:?}"),
        }
    }

    #[test]
    fn head_parsing_and_classes() {
        assert_eq!("a".parse::<TaskHead>().unwrap(), TaskHead::A);
        assert_eq!("C_Humour".parse::<TaskHead>().unwrap(), TaskHead::CHumour);
        assert!("d".parse::<TaskHead>().is_err());
        let m: Vec<usize> = TaskHead::ALL.iter().map(|h| h.classes()).collect();
        assert_eq!(m, vec![3, 2, 2, 2, 2, 4, 4, 4, 2]);
        for h in TaskHead::ALL {
            assert_eq!(h.class_names().len(), h.classes());
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<usize> = (0..6990).collect();
        let (train, dev) = split_train_dev(&items, 0.15, 7);
        assert_eq!((train.len(), dev.len()), (5942, 1048));

        let small: Vec<usize> = (0..10).collect();
        assert_eq!(
            split_train_dev(&small, 0.15, 3),
            split_train_dev(&small, 0.15, 3)
        );

        let hundred: Vec<usize> = (0..100).collect();
        let (train, dev) = split_train_dev(&hundred, 0.15, 11);
        assert_eq!((train.len(), dev.len()), (85, 15));
        let t: HashSet<_> = train.iter().collect();
        assert!(dev.iter().all(|d| !t.contains(d)));
    }

    #[test]
    fn oversampling_balances_classes() {
        let mut items = Vec::new();
        for i in 0..3 {
            items.push(record(&format!("p{i}"), TaskALabel::Positive));
        }
        items.push(record("n0", TaskALabel::Negative));
        let out = oversample_minority(&items, |r| TaskHead::A.class_of(r).unwrap(), 5);
        assert_eq!(out.len(), 6);
        assert_eq!(&out[..4], &items[..]);
        assert!(out[4..].iter().all(|r| r.id == "n0"));

        let balanced = vec![
            record("a", TaskALabel::Positive),
            record("b", TaskALabel::Neutral),
        ];
        assert_eq!(
            oversample_minority(&balanced, |r| TaskHead::A.class_of(r).unwrap(), 1),
            balanced
        );
    }

    #[test]
    fn padding_and_truncation() {
        let vocab = VocabIndex::from_tokens(["a", "b", "c"]);
        let toks: NormalizedText = vec!["a".to_string(), "zz".into(), "c".into()].into();
        let seq = pad_or_truncate(&toks, &vocab, 5);
        assert_eq!(seq.ids, vec![2, UNK_INDEX, 4, 0, 0]);
        assert_eq!(seq.true_length, 3);

        let long: NormalizedText = (0..80)
            .map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string())
            .collect::<Vec<_>>()
            .into();
        let seq = pad_or_truncate(&long, &vocab, 75);
        assert_eq!(seq.len(), 75);
        assert_eq!(seq.true_length, 75);
        assert_eq!(seq.ids[74], 2);

        let empty = pad_or_truncate(&NormalizedText::default(), &vocab, 4);
        assert_eq!(empty.ids, vec![0; 4]);
        assert_eq!(empty.true_length, 0);
    }

    #[test]
    fn histogram_counts() {
        let mut records = Vec::new();
        for (label, n) in [
            (TaskALabel::Positive, 4),
            (TaskALabel::Neutral, 2),
            (TaskALabel::Negative, 1),
        ] {
            for i in 0..n {
                records.push(record(&format!("{label}{i}"), label));
            }
        }
        let h = class_distribution(&records, TaskHead::A);
        assert_eq!(h.counts, vec![4, 2, 1]);
        assert_eq!(h.total(), records.len());
        assert_eq!(
            class_distribution(&[], TaskHead::CHumour).counts,
            vec![0; 4]
        );
    }
}
