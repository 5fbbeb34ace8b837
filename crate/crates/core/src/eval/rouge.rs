//! ROUGE-N and ROUGE-L over preprocessed word streams.

use std::collections::HashMap;
use std::hash::Hash;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Builds from a shared numerator; any zero denominator gives 0.
    pub fn from_counts(overlap: usize, predicted: usize, reference: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        Self::new(ratio(overlap, predicted), ratio(overlap, reference))
    }

    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeKind {
    N(usize),
    L,
}

/// Lowercases and splits on every non-alphanumeric character. With `stem`,
/// words longer than three characters are reduced with the English
/// Snowball stemmer.
pub fn words(text: &str, stem: bool) -> Vec<String> {
    let lowered = text.to_lowercase();
    let stemmer = stem.then(|| Stemmer::create(Algorithm::English));
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| match &stemmer {
            Some(s) if w.chars().count() > 3 => s.stem(w).into_owned(),
            _ => w.to_owned(),
        })
        .collect()
}

pub fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || seq.len() < n {
        return counts;
    }
    for gram in seq.windows(n) {
        *counts.entry(gram.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash + Clone>(pred: &[T], reference: &[T], n: usize) -> Prf {
    let p = ngram_counts(pred, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = p
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    Prf::from_counts(overlap, p.values().sum(), r.values().sum())
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l<T: PartialEq>(pred: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(pred, reference), pred.len(), reference.len())
}

pub fn rouge<T: Eq + Hash + Clone>(pred: &[T], reference: &[T], kind: RougeKind) -> Prf {
    match kind {
        RougeKind::N(n) => rouge_n(pred, reference, n),
        RougeKind::L => rouge_l(pred, reference),
    }
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of two texts.
pub fn rouge_texts(pred: &str, reference: &str, stem: bool) -> [Prf; 3] {
    let p = words(pred, stem);
    let r = words(reference, stem);
    [rouge_n(&p, &r, 1), rouge_n(&p, &r, 2), rouge_l(&p, &r)]
}
