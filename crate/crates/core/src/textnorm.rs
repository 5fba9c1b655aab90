//! Rule-based cleanup of meme captions.
//!
//! [`normalize`] runs the whole pipeline in a fixed order:
//! usernames, hashtags, URLs, markup and glyphs, lowercasing, whitespace
//! tokenization, contraction expansion and elongation collapsing. The
//! individual stages are exposed for reuse and testing.
//!
//! Digits that come out of a hashtag (`#10YearChallenge`) are kept; digits
//! anywhere else are dropped by [`strip_markup_and_glyphs`].

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

const BUILTIN_CONTRACTIONS: &str = include_str!("../assets/contractions.tsv");

/// Top-level domains recognised in bare `name.tld` URLs. Two-letter English
/// words (`in`, `to`, `no`, `me`, `us`, `it`) are left out on purpose.
const URL_TLDS: &[&str] = &[
    "com", "net", "org", "edu", "gov", "mil", "int", "info", "biz", "io", "co", "uk", "ca", "de",
    "fr", "jp", "cn", "ru", "br", "au", "nl", "es", "ch", "se", "pl", "eu", "tv", "ly", "gl", "gg",
    "cc", "tk", "ws", "xyz", "app", "dev", "ai", "site", "online", "club", "blog", "news",
];

static URL_RE: LazyLock<Regex> = LazyLock::new(|| {
    let label = r"[A-Za-z0-9](?:[A-Za-z0-9\-]*[A-Za-z0-9])?";
    let pattern = format!(
        r"(?i)\s?(?:[a-z][a-z0-9+.\-]*://\S+|\bwww\.\S+|\b{label}(?:\.{label})*\.(?:{tlds})\b(?:[/?#]\S*)?)",
        tlds = URL_TLDS.join("|"),
    );
    Regex::new(&pattern).expect("url pattern")
});

static TAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"<!--.*?-->|</?[A-Za-z][^<>]*>").expect("tag pattern"));

static USER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(^|\s)@\w+").expect("user pattern"));

static HASHTAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|\s)(#\w+)").expect("hashtag pattern"));

#[derive(Debug, Error)]
pub enum TextNormError {
    #[error("contraction dictionary line {line}: {reason}")]
    InvalidEntry { line: usize, reason: String },
    #[error("contraction dictionary is empty")]
    EmptyDictionary,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Case-insensitive map from slang or contracted surface forms to expansions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractionDict {
    entries: BTreeMap<String, Vec<String>>,
}

impl ContractionDict {
    /// The bundled dictionary of roughly 250 entries.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_CONTRACTIONS).expect("bundled contraction dictionary is valid")
    }

    /// Parses `key<TAB>expansion` lines; `#` lines and blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, TextNormError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, expansion) =
                line.split_once('\t')
                    .ok_or_else(|| TextNormError::InvalidEntry {
                        line: line_no,
                        reason: "missing tab separator".into(),
                    })?;
            let key = key.trim().to_lowercase();
            let words: Vec<String> = expansion
                .split_whitespace()
                .map(str::to_lowercase)
                .collect();
            if key.is_empty() || key.chars().any(char::is_whitespace) {
                return Err(TextNormError::InvalidEntry {
                    line: line_no,
                    reason: format!("invalid key {key:?}"),
                });
            }
            if words.is_empty() {
                return Err(TextNormError::InvalidEntry {
                    line: line_no,
                    reason: "empty expansion".into(),
                });
            }
            if words.len() == 1 && words[0] == key {
                return Err(TextNormError::InvalidEntry {
                    line: line_no,
                    reason: format!("{key:?} maps to itself"),
                });
            }
            entries.insert(key, words);
        }
        if entries.is_empty() {
            return Err(TextNormError::EmptyDictionary);
        }
        Ok(ContractionDict { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextNormError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TextNormError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&[String]> {
        match self.entries.get(key) {
            Some(v) => Some(v),
            None => self.entries.get(&key.to_lowercase()).map(Vec::as_slice),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

impl Default for ContractionDict {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Tokens produced by [`normalize`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizedText {
    pub tokens: Vec<String>,
}

impl NormalizedText {
    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl From<Vec<String>> for NormalizedText {
    fn from(tokens: Vec<String>) -> Self {
        NormalizedText { tokens }
    }
}

/// Replaces each URL, together with one preceding whitespace character, by a
/// single space.
pub fn strip_urls(text: &str) -> String {
    URL_RE.replace_all(text, " ").into_owned()
}

fn is_apostrophe(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '\u{2018}')
}

/// Shared scanner for the glyph filter. Tags, punctuation and non-ASCII
/// characters open a gap that becomes one space; apostrophes vanish; digits
/// vanish unless `keep_digits`.
fn filter_glyphs(text: &str, keep_digits: bool) -> String {
    let mut out = String::with_capacity(text.len());
    let mut gap = false;
    let mut last = 0;
    let tags: Vec<(usize, usize)> = TAG_RE
        .find_iter(text)
        .map(|m| (m.start(), m.end()))
        .collect();
    let scan = |segment: &str, out: &mut String, gap: &mut bool| {
        for c in segment.chars() {
            if is_apostrophe(c) || (c.is_ascii_digit() && !keep_digits) {
                continue;
            }
            if c.is_ascii_alphabetic() || c.is_ascii_whitespace() || c.is_ascii_digit() {
                if *gap {
                    out.push(' ');
                    *gap = false;
                }
                out.push(c);
            } else {
                *gap = true;
            }
        }
    };
    for (start, end) in tags {
        scan(&text[last..start], &mut out, &mut gap);
        gap = true;
        last = end;
    }
    scan(&text[last..], &mut out, &mut gap);
    if gap {
        out.push(' ');
    }
    out
}

/// Removes HTML tags, punctuation, digits and non-ASCII glyphs. Each maximal
/// run of removed tags, punctuation and non-ASCII characters becomes a single
/// space; digits and apostrophes are deleted outright so that `don't` becomes
/// `dont`.
pub fn strip_markup_and_glyphs(text: &str) -> String {
    filter_glyphs(text, false)
}

/// Replaces every `@name` token by `USER`.
pub fn replace_usernames(text: &str) -> String {
    USER_RE.replace_all(text, "${1}USER").into_owned()
}

/// Splits a hashtag body at digit-run boundaries and lowercase→uppercase
/// transitions.
fn split_tag_body(body: &str) -> String {
    let mut out = String::with_capacity(body.len() + 4);
    let mut prev: Option<char> = None;
    for c in body.chars() {
        if let Some(p) = prev {
            let digit_edge = p.is_ascii_digit() != c.is_ascii_digit();
            let case_edge = p.is_lowercase() && c.is_uppercase();
            if digit_edge || case_edge {
                out.push(' ');
            }
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

/// Removes the `#` from each hashtag and splits the tag into words.
pub fn split_hashtag(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for caps in HASHTAG_RE.captures_iter(text) {
        let tag = caps.get(1).expect("hashtag group");
        out.push_str(&text[last..tag.start()]);
        out.push_str(&split_tag_body(&tag.as_str()[1..]));
        last = tag.end();
    }
    out.push_str(&text[last..]);
    out
}

/// Replaces dictionary keys by their expansions. Tokens are expected lowercase.
pub fn expand_contractions(tokens: &[String], dict: &ContractionDict) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        match dict.get(t) {
            Some(words) => out.extend(words.iter().cloned()),
            None => out.push(t.clone()),
        }
    }
    out
}

/// Collapses letter runs longer than `max` down to `max` characters.
fn collapse_runs(token: &str, max: usize) -> String {
    let mut out = String::with_capacity(token.len());
    let mut prev = None;
    let mut run = 0;
    for c in token.chars() {
        if Some(c) == prev && c.is_alphabetic() {
            run += 1;
        } else {
            run = 1;
            prev = Some(c);
        }
        if run <= max || !c.is_alphabetic() {
            out.push(c);
        }
    }
    out
}

fn has_elongation(token: &str) -> bool {
    collapse_runs(token, 2).len() != token.len()
}

/// Normalizes an elongated word (`suuuppperrr` → `super`).
///
/// Words without a run of three or more identical letters are returned
/// unchanged. Otherwise runs are first cut to two letters; if that form is
/// not in `vocab` (or no vocabulary is given) every run is cut to one.
pub fn collapse_elongation(token: &str, vocab: Option<&HashSet<String>>) -> String {
    if !has_elongation(token) {
        return token.to_string();
    }
    let doubled = collapse_runs(token, 2);
    if let Some(v) = vocab {
        if v.contains(&doubled.to_lowercase()) {
            return doubled;
        }
    }
    collapse_runs(&doubled, 1)
}

fn clean_segment(segment: &str, hashtag: bool) -> String {
    if hashtag {
        filter_glyphs(segment, true)
    } else {
        strip_markup_and_glyphs(&strip_urls(segment))
    }
}

/// Runs the full caption pipeline.
pub fn normalize(
    text: &str,
    dict: &ContractionDict,
    vocab: Option<&HashSet<String>>,
) -> NormalizedText {
    let text = replace_usernames(text);

    // Hashtags are expanded in place but skip the URL and digit filters.
    let mut cleaned = String::with_capacity(text.len());
    let mut last = 0;
    for caps in HASHTAG_RE.captures_iter(&text) {
        let tag = caps.get(1).expect("hashtag group");
        cleaned.push_str(&clean_segment(&text[last..tag.start()], false));
        cleaned.push(' ');
        cleaned.push_str(&clean_segment(&split_tag_body(&tag.as_str()[1..]), true));
        cleaned.push(' ');
        last = tag.end();
    }
    cleaned.push_str(&clean_segment(&text[last..], false));

    let lowered: Vec<String> = cleaned
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let expanded = expand_contractions(&lowered, dict);
    let tokens = expanded
        .iter()
        .map(|t| collapse_elongation(t, vocab))
        .filter(|t| !t.is_empty())
        .collect();
    NormalizedText { tokens }
}

/// A dictionary plus optional elongation vocabulary, bundled for repeated use.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    pub dict: ContractionDict,
    pub vocab: Option<HashSet<String>>,
}

impl Normalizer {
    pub fn new(dict: ContractionDict, vocab: Option<HashSet<String>>) -> Self {
        Normalizer { dict, vocab }
    }

    pub fn normalize(&self, text: &str) -> NormalizedText {
        normalize(text, &self.dict, self.vocab.as_ref())
    }
}
