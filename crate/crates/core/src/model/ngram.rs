//! Additive-smoothed n-gram language model.
//!
//! For a context `h` the model uses the longest suffix of `h` (at most
//! `order - 1` tokens) that was seen during training, and returns
//!
//! ```text
//! ln P(w | h) = ln((c(h, w) + delta) / (c(h) + delta * |V|))
//! ```
//!
//! A context never seen at any length falls through to the unigram table.

use std::collections::HashMap;

use super::{check_context, ModelError, ScoreRequest, Scores, TokenScorer};
use crate::text::{Document, TokenId};
use crate::transform::LogitVector;

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

#[derive(Debug, Clone)]
pub struct NgramLM {
    order: usize,
    delta: f64,
    vocab_size: usize,
    // tables[l] holds contexts of exactly l tokens
    tables: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

impl NgramLM {
    /// Counts n-grams over each document's flattened token stream.
    pub fn train(
        corpus: &[Document],
        vocab_size: usize,
        order: usize,
        delta: f64,
    ) -> Result<Self, ModelError> {
        if order == 0 {
            return Err(ModelError::InvalidParameter(
                "order must be at least 1".into(),
            ));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "smoothing delta must be positive, got {delta}"
            )));
        }
        if vocab_size == 0 {
            return Err(ModelError::InvalidParameter("empty vocabulary".into()));
        }
        let mut tables: Vec<HashMap<Vec<TokenId>, ContextCounts>> = vec![HashMap::new(); order];
        let mut seen_any = false;
        for doc in corpus {
            let seq = doc.flatten();
            for (i, &w) in seq.iter().enumerate() {
                if w as usize >= vocab_size {
                    return Err(ModelError::InvalidParameter(format!(
                        "token id {w} outside vocabulary of {vocab_size}"
                    )));
                }
                seen_any = true;
                for (l, table) in tables.iter_mut().enumerate().take(i.min(order - 1) + 1) {
                    let entry = table.entry(seq[i - l..i].to_vec()).or_default();
                    entry.total += 1;
                    *entry.next.entry(w).or_insert(0) += 1;
                }
            }
        }
        if !seen_any {
            return Err(ModelError::EmptyCorpus);
        }
        Ok(Self {
            order,
            delta,
            vocab_size,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn counts_for(&self, context: &[TokenId]) -> &ContextCounts {
        let max_len = context.len().min(self.order - 1);
        for l in (0..=max_len).rev() {
            if let Some(c) = self.tables[l].get(&context[context.len() - l..]) {
                return c;
            }
        }
        &self.tables[0][&Vec::new()[..]]
    }

    /// Natural-log probabilities of every vocabulary entry after `context`.
    pub fn log_probs(&self, context: &[TokenId]) -> LogitVector {
        let counts = self.counts_for(context);
        let denom = counts.total as f64 + self.delta * self.vocab_size as f64;
        let mut scores = vec![(self.delta / denom).ln(); self.vocab_size];
        for (&w, &c) in &counts.next {
            scores[w as usize] = ((c as f64 + self.delta) / denom).ln();
        }
        LogitVector::new(scores)
    }

    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let counts = self.counts_for(context);
        let c = counts.next.get(&token).copied().unwrap_or(0) as f64;
        (c + self.delta) / (counts.total as f64 + self.delta * self.vocab_size as f64)
    }
}

impl TokenScorer for NgramLM {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn concurrency_safe(&self) -> bool {
        true
    }

    fn score(&self, request: &ScoreRequest<'_>) -> Result<Scores, ModelError> {
        check_context(self, request.context)?;
        Ok(Scores::Dense(self.log_probs(request.context)))
    }
}
