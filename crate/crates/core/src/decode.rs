//! Deterministic beam search over promoted logits.
//!
//! Each live hypothesis is scored by the backend, promoted against its own
//! last token, and expanded to its best `2 * beam_width` tokens. Candidates
//! are ranked globally by cumulative promoted score, ties broken by the
//! lexicographically smallest id sequence. A candidate whose rendered tail
//! contains a stop string is finished when it ranks inside the beam width;
//! the beam is refilled from the remaining candidates. Decoding ends once
//! `beam_width` hypotheses have finished, no live hypothesis remains, or
//! `max_new_tokens` is reached.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{BigramCache, LookupStats};
use crate::eval::{trace_stats, TraceStats};
use crate::model::{ModelError, ScoreRequest, TokenScorer};
use crate::text::{detokenize, Document, TextError, TokenId, Vocabulary};
use crate::transform::{promote, LogitVector, PromotionConfig, TransformError};

pub const DEFAULT_STOP_STRING: &str = ".\n";

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("backend failed at step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("bad logits at step {step}: {source}")]
    Logits {
        step: usize,
        #[source]
        source: TransformError,
    },
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub promotion: PromotionConfig,
    pub max_new_tokens: usize,
    /// Matched against the rendered text of each hypothesis.
    pub stop_strings: Vec<String>,
    /// Also finish as soon as a token from the promotion stop set is chosen.
    /// Used when no surface forms are available for string matching.
    pub stop_on_stop_token: bool,
    /// Exponent of the length normalization applied when picking the best
    /// finished hypothesis; 0 keeps the raw score sum.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 1,
            promotion: PromotionConfig::default(),
            max_new_tokens: 64,
            stop_strings: vec![DEFAULT_STOP_STRING.to_owned()],
            stop_on_stop_token: false,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::Config("beam_width must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::Config(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if !self.promotion.alpha.is_finite() {
            return Err(DecodeError::Config(format!(
                "alpha {} is not finite",
                self.promotion.alpha
            )));
        }
        if !self.length_penalty.is_finite() {
            return Err(DecodeError::Config("length_penalty must be finite".into()));
        }
        if self.stop_strings.iter().any(String::is_empty) {
            return Err(DecodeError::Config("empty stop string".into()));
        }
        Ok(())
    }
}

/// What happened at one generation step of one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lookup_performed: bool,
    pub cache_hit: bool,
    pub promotion_applied: bool,
    pub argmax_changed: bool,
    pub raw_argmax: TokenId,
    pub final_argmax: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub ids: Vec<TokenId>,
    /// Sum of the promoted logits of the chosen tokens.
    pub score: f64,
    /// True only when a stop string (or stop token) ended the hypothesis.
    pub finished: bool,
    pub finish_reason: Option<FinishReason>,
    pub trace: Vec<StepRecord>,
}

impl BeamHypothesis {
    fn empty() -> Self {
        Self {
            ids: Vec::new(),
            score: 0.0,
            finished: false,
            finish_reason: None,
            trace: Vec::new(),
        }
    }

    pub fn adjusted_score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 || self.ids.is_empty() {
            self.score
        } else {
            self.score / (self.ids.len() as f64).powf(length_penalty)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub best: BeamHypothesis,
    /// Every completed hypothesis, best first.
    pub finished: Vec<BeamHypothesis>,
    /// Set when the best hypothesis ran out of length instead of stopping.
    pub truncated: bool,
    /// Cache lookups across all hypotheses of the session.
    pub lookups: LookupStats,
}

fn rank_desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Best `n` ids by score (ties: lower id), restricted to `allowed`.
fn top_candidates(
    logits: &LogitVector,
    allowed: impl Fn(TokenId) -> bool,
    n: usize,
) -> Vec<TokenId> {
    let scores = logits.scores();
    let mut ids: Vec<TokenId> = (0..scores.len() as TokenId)
        .filter(|&id| allowed(id))
        .collect();
    let cmp = |a: &TokenId, b: &TokenId| {
        rank_desc(scores[*a as usize], scores[*b as usize]).then(a.cmp(b))
    };
    if ids.len() > n {
        ids.select_nth_unstable_by(n, cmp);
        ids.truncate(n);
    }
    ids.sort_unstable_by(cmp);
    ids
}

/// Whether appending the last id of `ids` completed a stop string.
fn completes_stop(
    ids: &[TokenId],
    vocab: &Vocabulary,
    stops: &[String],
) -> Result<bool, TextError> {
    let Some(max_chars) = stops.iter().map(|s| s.chars().count()).max() else {
        return Ok(false);
    };
    let end = ids.len();
    if end == 0 {
        return Ok(false);
    }
    let mut start = end - 1;
    let mut acc = 0;
    while start > 0 && acc < max_chars {
        start -= 1;
        acc += vocab
            .token(ids[start])
            .ok_or(TextError::IdOutOfRange(ids[start]))?
            .chars()
            .count()
            + 1;
    }
    let tail = detokenize(&ids[start..], vocab)?;
    let before = detokenize(&ids[start..end - 1], vocab)?.len();
    Ok(stops.iter().any(|s| {
        tail.match_indices(s.as_str())
            .any(|(i, m)| i + m.len() > before)
    }))
}

/// Renders ids and cuts the text at the first stop string.
pub fn render(
    ids: &[TokenId],
    vocab: &Vocabulary,
    stop_strings: &[String],
) -> Result<String, TextError> {
    let mut text = detokenize(ids, vocab)?;
    if let Some(cut) = stop_strings
        .iter()
        .filter_map(|s| text.find(s.as_str()))
        .min()
    {
        text.truncate(cut);
    }
    Ok(text)
}

struct Candidate {
    parent: usize,
    token: TokenId,
    score: f64,
    record: StepRecord,
}

fn compare_hyps(a: &BeamHypothesis, b: &BeamHypothesis, lp: f64) -> Ordering {
    rank_desc(a.adjusted_score(lp), b.adjusted_score(lp))
        .then(a.ids.len().cmp(&b.ids.len()))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Generates a continuation of `prompt`.
///
/// `vocab` supplies surface forms for stop-string matching and must cover
/// the backend's id space when `cfg.stop_strings` is non-empty.
pub fn decode(
    backend: &dyn TokenScorer,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    cache: &BigramCache,
    cfg: &DecodeConfig,
    session: u64,
) -> Result<DecodeOutput, DecodeError> {
    cfg.validate()?;
    let vocab_size = backend.vocab_size();
    if !cfg.stop_strings.is_empty() && vocab.len() < vocab_size {
        return Err(DecodeError::Config(format!(
            "vocabulary has {} surface forms, backend has {vocab_size} ids",
            vocab.len()
        )));
    }
    let k = cfg.beam_width;
    let mut stats = LookupStats::default();
    let mut live = vec![BeamHypothesis::empty()];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    let mut stopped = 0usize;
    let mut context = prompt.to_vec();

    for step in 1..=cfg.max_new_tokens {
        let mut candidates = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            context.truncate(prompt.len());
            context.extend_from_slice(&hyp.ids);
            let prev = hyp.ids.last().copied();
            let must_score = prev.map(|p| cache.followers(p).ids()).unwrap_or(&[]);
            let dense = backend
                .score(&ScoreRequest {
                    session,
                    context: &context,
                    must_score,
                    top_k: 2 * k,
                })
                .and_then(|s| s.into_dense(vocab_size))
                .map_err(|source| DecodeError::Backend { step, source })?;
            let promo = promote(&dense.logits, prev, cache, &cfg.promotion, step, &mut stats)
                .map_err(|source| DecodeError::Logits { step, source })?;
            let record = StepRecord {
                step,
                lookup_performed: promo.lookup_performed,
                cache_hit: promo.cache_hit,
                promotion_applied: promo.applied,
                argmax_changed: promo.argmax_changed,
                raw_argmax: promo.raw_argmax,
                final_argmax: promo.final_argmax,
            };
            for token in top_candidates(&promo.logits, |id| dense.is_exact(id), 2 * k) {
                candidates.push(Candidate {
                    parent,
                    token,
                    score: hyp.score + promo.logits.get(token),
                    record,
                });
            }
        }
        candidates.sort_by(|a, b| {
            rank_desc(a.score, b.score).then_with(|| {
                live[a.parent]
                    .ids
                    .iter()
                    .chain([&a.token])
                    .cmp(live[b.parent].ids.iter().chain([&b.token]))
            })
        });

        let mut next = Vec::with_capacity(k);
        for (rank, cand) in candidates.into_iter().enumerate() {
            if next.len() == k {
                break;
            }
            let parent = &live[cand.parent];
            let mut ids = Vec::with_capacity(parent.ids.len() + 1);
            ids.extend_from_slice(&parent.ids);
            ids.push(cand.token);
            let is_stop = (cfg.stop_on_stop_token && cfg.promotion.stop_set.contains(cand.token))
                || completes_stop(&ids, vocab, &cfg.stop_strings)?;
            if is_stop && rank >= k {
                continue;
            }
            let mut trace = parent.trace.clone();
            trace.push(cand.record);
            let hyp = BeamHypothesis {
                ids,
                score: cand.score,
                finished: is_stop,
                finish_reason: is_stop.then_some(FinishReason::Stop),
                trace,
            };
            if is_stop {
                stopped += 1;
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || stopped >= k {
            break;
        }
    }
    if stopped < k {
        for mut hyp in live {
            hyp.finish_reason = Some(FinishReason::MaxLength);
            done.push(hyp);
        }
    }
    done.sort_by(|a, b| compare_hyps(a, b, cfg.length_penalty));
    let best = done
        .first()
        .cloned()
        .expect("beam search yields at least one hypothesis");
    Ok(DecodeOutput {
        truncated: best.finish_reason == Some(FinishReason::MaxLength),
        best,
        finished: done,
        lookups: stats,
    })
}

/// One document to summarize.
#[derive(Debug, Clone)]
pub struct DecodeJob {
    pub session: u64,
    pub prompt: Vec<TokenId>,
    pub document: Document,
    /// Built from `document` when absent.
    pub cache: Option<BigramCache>,
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub output: DecodeOutput,
    pub stats: TraceStats,
}

/// Decodes every job with its own cache; results keep job order. Jobs run
/// on up to `threads` workers when the backend is concurrency-safe.
pub fn batch_decode(
    backend: &dyn TokenScorer,
    vocab: &Vocabulary,
    jobs: &[DecodeJob],
    cfg: &DecodeConfig,
    threads: usize,
) -> Vec<Result<BatchItem, DecodeError>> {
    let run = |job: &DecodeJob| {
        let built;
        let cache = match &job.cache {
            Some(c) => c,
            None => {
                built = BigramCache::build(&job.document);
                &built
            }
        };
        let output = decode(backend, vocab, &job.prompt, cache, cfg, job.session)?;
        let stats = trace_stats(&output.best.trace);
        Ok(BatchItem { output, stats })
    };
    if threads > 1 && backend.concurrency_safe() && jobs.len() > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => return pool.install(|| jobs.par_iter().map(run).collect()),
            Err(_) => return jobs.iter().map(run).collect(),
        }
    }
    jobs.iter().map(run).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelError, Scores};
    use crate::text::Spacing;
    use crate::transform::{StopSet, Variant};

    /// Scores depend only on the last context token through a fixed table.
    struct Table(Vec<Vec<f64>>);

    impl TokenScorer for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn concurrency_safe(&self) -> bool {
            true
        }
        fn score(&self, req: &ScoreRequest<'_>) -> Result<Scores, ModelError> {
            let row = req.context.last().map_or(0, |&t| t as usize + 1);
            Ok(Scores::Dense(LogitVector::new(self.0[row].clone())))
        }
    }

    struct Failing;

    impl TokenScorer for Failing {
        fn vocab_size(&self) -> usize {
            2
        }
        fn concurrency_safe(&self) -> bool {
            true
        }
        fn score(&self, _: &ScoreRequest<'_>) -> Result<Scores, ModelError> {
            Err(ModelError::Backend("boom".into()))
        }
    }

    fn vocab(forms: &[&str]) -> Vocabulary {
        Vocabulary::from_surface_forms(
            forms.iter().map(|s| s.to_string()).collect(),
            Spacing::Canonical,
        )
    }

    #[test]
    fn stops_on_period_newline_and_trims() {
        // a=0 .=1 \n=2; after a: "." ; after ".": "\n"; start: a
        let v = vocab(&["a", ".", "\n"]);
        let backend = Table(vec![
            vec![0.0, -1.0, -2.0],
            vec![-2.0, 0.0, -1.0],
            vec![-1.0, -2.0, 0.0],
            vec![0.0, -1.0, -2.0],
        ]);
        let cfg = DecodeConfig {
            beam_width: 1,
            max_new_tokens: 10,
            ..DecodeConfig::default()
        };
        let out = decode(&backend, &v, &[], &BigramCache::default(), &cfg, 0).unwrap();
        assert_eq!(out.best.ids, vec![0, 1, 2]);
        assert!(out.best.finished && !out.truncated);
        assert_eq!(out.best.trace.len(), 3);
        assert_eq!(render(&out.best.ids, &v, &cfg.stop_strings).unwrap(), "a");
    }

    #[test]
    fn hits_max_length_without_stop() {
        let v = vocab(&["a", "b"]);
        let backend = Table(vec![vec![0.0, -1.0]; 3]);
        let cfg = DecodeConfig {
            beam_width: 2,
            max_new_tokens: 3,
            ..DecodeConfig::default()
        };
        let out = decode(&backend, &v, &[], &BigramCache::default(), &cfg, 0).unwrap();
        assert_eq!(out.best.ids, vec![0, 0, 0]);
        assert!(out.truncated && !out.best.finished);
        assert_eq!(out.best.finish_reason, Some(FinishReason::MaxLength));
    }

    #[test]
    fn promotion_steers_beam() {
        // source bigram (a, b): after generating a, b gets +2
        let v = vocab(&["a", "b", "c"]);
        let backend = Table(vec![
            vec![0.0, -5.0, -5.0],
            vec![-3.0, -1.0, -0.5],
            vec![0.0; 3],
            vec![0.0; 3],
        ]);
        let cache = BigramCache::build(&Document::from_sentences(vec![vec![0, 1]]));
        let mut cfg = DecodeConfig {
            beam_width: 1,
            max_new_tokens: 2,
            stop_strings: vec![],
            ..DecodeConfig::default()
        };
        cfg.promotion = PromotionConfig::new(2.0, Variant::Plain, StopSet::default());
        let out = decode(&backend, &v, &[], &cache, &cfg, 0).unwrap();
        assert_eq!(out.best.ids, vec![0, 1]);
        assert_eq!(out.best.score, 1.0);
        assert!(out.best.trace[1].argmax_changed);
        assert_eq!(out.lookups.hits, 1);
    }

    #[test]
    fn backend_error_carries_step() {
        let v = vocab(&["a", "b"]);
        let err = decode(
            &Failing,
            &v,
            &[],
            &BigramCache::default(),
            &DecodeConfig::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, DecodeError::Backend { step: 1, .. }));
    }

    #[test]
    fn rejects_invalid_config() {
        let v = vocab(&["a"]);
        let backend = Table(vec![vec![0.0]; 2]);
        for cfg in [
            DecodeConfig {
                beam_width: 0,
                ..DecodeConfig::default()
            },
            DecodeConfig {
                max_new_tokens: 0,
                ..DecodeConfig::default()
            },
        ] {
            assert!(matches!(
                decode(&backend, &v, &[], &BigramCache::default(), &cfg, 0),
                Err(DecodeError::Config(_))
            ));
        }
    }

    #[test]
    fn stop_string_spanning_tokens_in_concatenated_vocab() {
        let v = Vocabulary::from_surface_forms(
            vec!["x".into(), ".".into(), "\n\n".into()],
            Spacing::Concatenate,
        );
        assert!(completes_stop(&[0, 1, 2], &v, &[".\n".into()]).unwrap());
        assert!(!completes_stop(&[0, 1], &v, &[".\n".into()]).unwrap());
        assert_eq!(render(&[0, 1, 2], &v, &[".\n".into()]).unwrap(), "x");
    }

    #[test]
    fn batch_preserves_order_and_collects_errors() {
        let v = vocab(&["a", "b"]);
        let backend = Table(vec![vec![0.0, -1.0]; 3]);
        let cfg = DecodeConfig {
            max_new_tokens: 2,
            ..DecodeConfig::default()
        };
        assert!(batch_decode(&backend, &v, &[], &cfg, 1).is_empty());
        let jobs: Vec<DecodeJob> = (0..3)
            .map(|i| DecodeJob {
                session: i,
                prompt: vec![],
                document: Document::from_sentences(vec![vec![0, 1]]),
                cache: None,
            })
            .collect();
        let out = batch_decode(&backend, &v, &jobs, &cfg, 2);
        assert_eq!(out.len(), 3);
        let bad = batch_decode(&Failing, &v, &jobs, &cfg, 1);
        assert!(bad.iter().all(Result::is_err));
    }
}
