//! Competition scoring: confusion matrices, per-class and macro F1, micro F1
//! and the averaged task B/C score.
//!
//! A class that never occurs in gold or predictions has F1 = 0 and still
//! counts toward the macro average; any 0/0 precision or recall is 0.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// Square count matrix: rows are gold classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.classes + pred]
    }

    pub fn add(&mut self, gold: usize, pred: usize) {
        self.counts[gold * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// (true positives, false positives, false negatives) for class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let predicted: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        let gold: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        (tp, predicted - tp, gold - tp)
    }
}

pub fn confusion(
    gold: &[usize],
    pred: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&g, &p) in gold.iter().zip(pred) {
        for c in [g, p] {
            if c >= classes {
                return Err(MetricsError::ClassOutOfRange { class: c, classes });
            }
        }
        cm.add(g, p);
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn class_scores(cm: &ConfusionMatrix) -> Vec<ClassScore> {
    (0..cm.classes())
        .map(|c| {
            let (tp, fp, fn_) = cm.class_counts(c);
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassScore {
                precision,
                recall,
                f1: f1_from(precision, recall),
                support: tp + fn_,
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    if cm.classes() == 0 {
        return 0.0;
    }
    let scores = class_scores(cm);
    scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64
}

/// `TP / (TP + (FP + FN) / 2)` over all classes pooled.
pub fn micro_f1(cm: &ConfusionMatrix) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for c in 0..cm.classes() {
        let (a, b, d) = cm.class_counts(c);
        tp += a;
        fp += b;
        fn_ += d;
    }
    let den = 2 * tp + fp + fn_;
    ratio(2 * tp, den)
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreCard {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

impl ScoreCard {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        ScoreCard {
            per_class: class_scores(cm),
            macro_f1: macro_f1(cm),
            micro_f1: micro_f1(cm),
        }
    }

    pub fn from_labels(
        gold: &[usize],
        pred: &[usize],
        classes: usize,
    ) -> Result<Self, MetricsError> {
        Ok(Self::from_confusion(&confusion(gold, pred, classes)?))
    }
}

/// Mean of the subtask macro-F1 values; 0 for an empty list.
pub fn task_bc_score(cards: &[ScoreCard]) -> f64 {
    if cards.is_empty() {
        return 0.0;
    }
    cards.iter().map(|c| c.macro_f1).sum::<f64>() / cards.len() as f64
}
