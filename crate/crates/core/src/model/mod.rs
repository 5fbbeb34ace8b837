//! Token scoring backends.
//!
//! A [`TokenScorer`] turns a context of token ids into next-token logits.
//! The crate ships [`NgramLM`], a deterministic additive-smoothed n-gram
//! model, and [`BridgeClient`], which talks to an external model process
//! over the newline-delimited JSON protocol in [`protocol`].

pub mod bridge;
pub mod ngram;
pub mod protocol;

use thiserror::Error;

use crate::text::TokenId;
use crate::transform::LogitVector;

pub use bridge::{BridgeClient, BridgeOptions};
pub use ngram::NgramLM;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("context of {len} tokens exceeds the backend limit of {limit}; truncate the source")]
    ContextTooLong { len: usize, limit: usize },
    #[error("n-gram training corpus is empty")]
    EmptyCorpus,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("response has {got} scores, expected {expected}")]
    SizeMismatch { got: usize, expected: usize },
    #[error("I/O error talking to backend: {0}")]
    Io(#[from] std::io::Error),
}

/// One scoring call.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    /// Decode session, so remote backends can keep per-session state.
    pub session: u64,
    pub context: &'a [TokenId],
    /// Ids whose exact scores are required (the follower set of the
    /// previous token).
    pub must_score: &'a [TokenId],
    /// Minimum number of top-scoring ids the caller needs exactly.
    pub top_k: usize,
}

/// Logits as returned by a backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Scores {
    Dense(LogitVector),
    /// Exact scores for a subset of ids; every other id gets `floor`.
    Sparse {
        entries: Vec<(TokenId, f64)>,
        floor: f64,
    },
}

/// A dense view of [`Scores`] plus the ids that carry exact values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseScores {
    pub logits: LogitVector,
    /// `None` when every id is exact.
    pub exact: Option<Vec<bool>>,
}

impl DenseScores {
    pub fn is_exact(&self, id: TokenId) -> bool {
        self.exact
            .as_ref()
            .map_or(true, |mask| mask.get(id as usize).copied().unwrap_or(false))
    }
}

impl Scores {
    /// Expands to a vocabulary-sized vector. Floor ids are placed strictly
    /// below every exact score, so an unpromoted floor id never ranks above
    /// an exact one.
    pub fn into_dense(self, vocab_size: usize) -> Result<DenseScores, ModelError> {
        match self {
            Scores::Dense(v) => {
                if v.len() != vocab_size {
                    return Err(ModelError::SizeMismatch {
                        got: v.len(),
                        expected: vocab_size,
                    });
                }
                Ok(DenseScores {
                    logits: v,
                    exact: None,
                })
            }
            Scores::Sparse { entries, floor } => {
                let min_exact = entries.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
                let fill = if floor < min_exact {
                    floor
                } else {
                    next_below(min_exact)
                };
                let mut scores = vec![fill; vocab_size];
                let mut exact = vec![false; vocab_size];
                for (id, s) in entries {
                    let i = id as usize;
                    if i >= vocab_size {
                        return Err(ModelError::Protocol(format!(
                            "entry id {id} outside vocabulary of {vocab_size}"
                        )));
                    }
                    scores[i] = s;
                    exact[i] = true;
                }
                Ok(DenseScores {
                    logits: LogitVector::new(scores),
                    exact: Some(exact),
                })
            }
        }
    }
}

fn next_below(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    if x == 0.0 {
        return -f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits - 1 } else { bits + 1 })
}

pub trait TokenScorer: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Longest context the backend accepts, if bounded.
    fn context_limit(&self) -> Option<usize> {
        None
    }

    /// Whether concurrent `score` calls from several decode sessions are
    /// allowed. Non-safe backends are driven one session at a time.
    fn concurrency_safe(&self) -> bool;

    fn score(&self, request: &ScoreRequest<'_>) -> Result<Scores, ModelError>;
}

impl<T: TokenScorer + ?Sized> TokenScorer for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn context_limit(&self) -> Option<usize> {
        (**self).context_limit()
    }
    fn concurrency_safe(&self) -> bool {
        (**self).concurrency_safe()
    }
    fn score(&self, request: &ScoreRequest<'_>) -> Result<Scores, ModelError> {
        (**self).score(request)
    }
}

/// Checks the context against the backend limit.
pub fn check_context(scorer: &dyn TokenScorer, context: &[TokenId]) -> Result<(), ModelError> {
    match scorer.context_limit() {
        Some(limit) if context.len() > limit => Err(ModelError::ContextTooLong {
            len: context.len(),
            limit,
        }),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_floor_is_pushed_below_exact() {
        let dense = Scores::Sparse {
            entries: vec![(1, -2.0), (3, 0.5)],
            floor: -1.0,
        }
        .into_dense(4)
        .unwrap();
        let s = dense.logits.scores();
        assert_eq!(s[1], -2.0);
        assert!(s[0] < -2.0 && s[0] == s[2]);
        assert!(dense.is_exact(3) && !dense.is_exact(0));
    }

    #[test]
    fn dense_size_is_checked() {
        let err = Scores::Dense(LogitVector::new(vec![0.0; 3]))
            .into_dense(4)
            .unwrap_err();
        assert!(matches!(
            err,
            ModelError::SizeMismatch {
                got: 3,
                expected: 4
            }
        ));
    }

    #[test]
    fn next_below_is_strict() {
        for x in [0.0, -0.0, 1.0, -1.0, 1e-300, -3.5] {
            assert!(next_below(x) < x, "{x}");
        }
    }
}
