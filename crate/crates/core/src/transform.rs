//! Bigram lookahead promotion of a raw logit vector.
//!
//! Given the previously generated token `prev`, every token `v` that follows
//! `prev` somewhere inside a source sentence gets `alpha` added to its logit
//! (or `alpha * count(prev, v)` for the frequency-weighted variant). All other
//! logits are left untouched, so the ordering inside the follower set and
//! the ordering outside it are both preserved.
//!
//! Promotion is skipped on the first generated step, and whenever the raw
//! argmax is a stop token (a token whose surface contains a line break), so
//! that a summary that wants to end is never pushed to keep going.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{BigramCache, LookupStats};
use crate::text::{TokenId, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("non-finite logit {value} at token {id}")]
    NonFinite { id: TokenId, value: f64 },
    #[error("empty logit vector")]
    Empty,
}

/// Dense unnormalized scores over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Self {
        Self(scores)
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.0[id as usize]
    }

    /// Index of the largest score; the lowest id wins ties.
    pub fn argmax(&self) -> Option<TokenId> {
        argmax_of(self.0.iter().copied().enumerate())
    }

    /// Argmax restricted to `ids`, lowest id on ties.
    pub fn argmax_among(&self, ids: &[TokenId]) -> Option<TokenId> {
        argmax_of(
            ids.iter()
                .filter(|&&id| (id as usize) < self.0.len())
                .map(|&id| (id as usize, self.0[id as usize])),
        )
    }

    pub fn check_finite(&self) -> Result<(), TransformError> {
        if self.0.is_empty() {
            return Err(TransformError::Empty);
        }
        match self.0.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(TransformError::NonFinite {
                id: i as TokenId,
                value: self.0[i],
            }),
            None => Ok(()),
        }
    }
}

fn argmax_of(iter: impl Iterator<Item = (usize, f64)>) -> Option<TokenId> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in iter {
        best = match best {
            None => Some((i, x)),
            Some((bi, bx)) if x > bx || (x == bx && i < bi) => Some((i, x)),
            keep => keep,
        };
    }
    best.map(|(i, _)| i as TokenId)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Plain,
    /// Promotion scaled by how often the bigram occurs in the source.
    FrequencyWeighted,
}

/// Token ids that end a summary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopSet(BTreeSet<TokenId>);

impl StopSet {
    pub fn new(ids: impl IntoIterator<Item = TokenId>) -> Self {
        Self(ids.into_iter().collect())
    }

    /// Every vocabulary entry whose surface contains a line break.
    pub fn newline_tokens(vocab: &Vocabulary) -> Self {
        Self::new(vocab.newline_ids())
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.0.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromotionConfig {
    pub alpha: f64,
    pub variant: Variant,
    pub stop_set: StopSet,
    pub first_step_exempt: bool,
    /// When false logits pass through unchanged, but cache lookups are still
    /// made and reported so hit rates stay comparable with promoted runs.
    pub enabled: bool,
}

impl Default for PromotionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            variant: Variant::Plain,
            stop_set: StopSet::default(),
            first_step_exempt: true,
            enabled: true,
        }
    }
}

impl PromotionConfig {
    pub fn new(alpha: f64, variant: Variant, stop_set: StopSet) -> Self {
        Self {
            alpha,
            variant,
            stop_set,
            ..Self::default()
        }
    }

    pub fn disabled(stop_set: StopSet) -> Self {
        Self {
            enabled: false,
            stop_set,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Promotion {
    pub logits: LogitVector,
    /// True when at least one logit was changed.
    pub applied: bool,
    pub argmax_changed: bool,
    /// Whether the follower cache was consulted at this step.
    pub lookup_performed: bool,
    pub cache_hit: bool,
    pub raw_argmax: TokenId,
    pub final_argmax: TokenId,
}

/// Applies the promotion for generation step `step` (1-based).
///
/// `prev` is the last token of the hypothesis being extended, `None` on the
/// first step. Lookups are recorded in `stats`.
pub fn promote(
    logits: &LogitVector,
    prev: Option<TokenId>,
    cache: &BigramCache,
    cfg: &PromotionConfig,
    step: usize,
    stats: &mut LookupStats,
) -> Result<Promotion, TransformError> {
    logits.check_finite()?;
    let raw_argmax = logits.argmax().expect("non-empty");
    let unchanged = |lookup_performed, cache_hit| Promotion {
        logits: logits.clone(),
        applied: false,
        argmax_changed: false,
        lookup_performed,
        cache_hit,
        raw_argmax,
        final_argmax: raw_argmax,
    };

    let prev = match prev {
        Some(p) if !(step <= 1 && cfg.first_step_exempt) => p,
        _ => return Ok(unchanged(false, false)),
    };
    let followers = cache.lookup(prev, stats);
    let cache_hit = !followers.is_empty();
    if !cfg.enabled || !cache_hit || cfg.stop_set.contains(raw_argmax) {
        return Ok(unchanged(true, cache_hit));
    }

    let mut scores = logits.scores().to_vec();
    let mut applied = false;
    for (id, count) in followers.iter() {
        let Some(slot) = scores.get_mut(id as usize) else {
            continue;
        };
        let delta = match cfg.variant {
            Variant::Plain => cfg.alpha,
            Variant::FrequencyWeighted => count as f64 * cfg.alpha,
        };
        if delta != 0.0 {
            *slot += delta;
            applied = true;
        }
    }
    let promoted = LogitVector(scores);
    let final_argmax = promoted.argmax().expect("non-empty");
    Ok(Promotion {
        logits: promoted,
        applied,
        argmax_changed: final_argmax != raw_argmax,
        lookup_performed: true,
        cache_hit,
        raw_argmax,
        final_argmax,
    })
}
