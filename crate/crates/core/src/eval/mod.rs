//! Summary metrics: ROUGE, novel n-gram precision/recall, decode-trace
//! statistics, BARTScore probability, and paired significance tests.

pub mod rouge;
pub mod significance;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::StepRecord;
pub use rouge::{lcs_len, rouge, rouge_l, rouge_n, rouge_texts, words, Prf, RougeKind};
pub use significance::{
    average_ranks, benjamini_hochberg, paired_significance, wilcoxon_signed_rank, PMethod,
    PairedTest, SignificanceEntry, SignificanceReport, WilcoxonResult,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite BARTScore {0}")]
    NonFinite(f64),
}

/// n-grams of `seq` that never occur in `source`, as a set.
pub fn novel_ngrams<'a, T: Eq + std::hash::Hash>(
    seq: &'a [T],
    source: &[T],
    n: usize,
) -> HashSet<&'a [T]> {
    if n == 0 {
        return HashSet::new();
    }
    let in_source: HashSet<&[T]> = source.windows(n).collect();
    seq.windows(n).filter(|g| !in_source.contains(g)).collect()
}

/// Precision and recall of the prediction's novel n-grams against the
/// reference's novel n-grams.
pub fn novel_ngram_prf<T: Eq + std::hash::Hash>(
    pred: &[T],
    reference: &[T],
    source: &[T],
    n: usize,
) -> Prf {
    let p = novel_ngrams(pred, source, n);
    let r = novel_ngrams(reference, source, n);
    let overlap = p.intersection(&r).count();
    Prf::from_counts(overlap, p.len(), r.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceStats {
    pub steps: usize,
    pub lookups: usize,
    pub hits: usize,
    pub argmax_changes: usize,
    /// Share of cache lookups that found a non-empty follower set.
    pub hit_rate: Option<f64>,
    /// Share of steps where promotion changed the top-1 token.
    pub argmax_change_rate: Option<f64>,
}

pub fn trace_stats(trace: &[StepRecord]) -> TraceStats {
    let steps = trace.len();
    let lookups = trace.iter().filter(|r| r.lookup_performed).count();
    let hits = trace
        .iter()
        .filter(|r| r.lookup_performed && r.cache_hit)
        .count();
    let argmax_changes = trace.iter().filter(|r| r.argmax_changed).count();
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    TraceStats {
        steps,
        lookups,
        hits,
        argmax_changes,
        hit_rate: rate(hits, lookups),
        argmax_change_rate: rate(argmax_changes, steps),
    }
}

/// `e^score` for one summary's BARTScore.
pub fn bartscore_prob(bartscore: f64) -> Result<f64, EvalError> {
    if !bartscore.is_finite() {
        return Err(EvalError::NonFinite(bartscore));
    }
    Ok(bartscore.exp())
}

/// Mean of the per-summary probabilities (not `e` of the mean score).
pub fn mean_bartscore_prob(scores: &[f64]) -> Result<Option<f64>, EvalError> {
    if scores.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for &s in scores {
        total += bartscore_prob(s)?;
    }
    Ok(Some(total / scores.len() as f64))
}

/// Novel n-gram orders reported by default.
pub const NOVEL_NGRAM_ORDERS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub novel: BTreeMap<usize, Prf>,
}

/// Word-level metrics for one (source, reference, prediction) triple.
pub fn example_metrics(
    source: &str,
    reference: &str,
    prediction: &str,
    stem: bool,
) -> ExampleMetrics {
    let p = words(prediction, stem);
    let r = words(reference, stem);
    let s = words(source, stem);
    ExampleMetrics {
        rouge1: rouge_n(&p, &r, 1),
        rouge2: rouge_n(&p, &r, 2),
        rouge_l: rouge_l(&p, &r),
        novel: NOVEL_NGRAM_ORDERS
            .iter()
            .map(|&n| (n, novel_ngram_prf(&p, &r, &s, n)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub examples: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub novel_ngram: BTreeMap<String, Prf>,
    pub hit_rate: Option<f64>,
    pub argmax_change_rate: Option<f64>,
    pub bartscore: Option<f64>,
    pub bartscore_prob: Option<f64>,
    pub bartscore_prob_percent: Option<f64>,
}

/// Per-example inputs to [`aggregate`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredExample {
    pub metrics: Option<ExampleMetrics>,
    pub hit_rate: Option<f64>,
    pub argmax_change_rate: Option<f64>,
    pub bartscore: Option<f64>,
}

/// Unweighted means over examples; each optional column averages over the
/// examples that carry it.
pub fn aggregate(examples: &[ScoredExample]) -> Result<MetricsReport, EvalError> {
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let metrics: Vec<&ExampleMetrics> =
        examples.iter().filter_map(|e| e.metrics.as_ref()).collect();
    let col = |f: &dyn Fn(&ExampleMetrics) -> f64| {
        mean(metrics.iter().map(|m| f(m)).collect()).unwrap_or(0.0)
    };

    let mut novel = BTreeMap::new();
    for n in NOVEL_NGRAM_ORDERS {
        let p = col(&|m| m.novel[&n].precision);
        let r = col(&|m| m.novel[&n].recall);
        let f = col(&|m| m.novel[&n].f1);
        novel.insert(
            n.to_string(),
            Prf {
                precision: p,
                recall: r,
                f1: f,
            },
        );
    }
    let bs: Vec<f64> = examples.iter().filter_map(|e| e.bartscore).collect();
    let bs_prob = mean_bartscore_prob(&bs)?;
    Ok(MetricsReport {
        examples: examples.len(),
        rouge1: col(&|m| m.rouge1.f1),
        rouge2: col(&|m| m.rouge2.f1),
        rouge_l: col(&|m| m.rouge_l.f1),
        novel_ngram: novel,
        hit_rate: mean(examples.iter().filter_map(|e| e.hit_rate).collect()),
        argmax_change_rate: mean(
            examples
                .iter()
                .filter_map(|e| e.argmax_change_rate)
                .collect(),
        ),
        bartscore: mean(bs),
        bartscore_prob: bs_prob,
        bartscore_prob_percent: bs_prob.map(|p| p * 100.0),
    })
}
