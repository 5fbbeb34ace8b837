//! Paired significance testing: Wilcoxon signed-rank with Benjamini-Hochberg
//! adjustment inside declared families, and rank-biserial effect sizes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::EvalError;

/// Largest number of non-zero differences for which the exact null
/// distribution is computed; above it a tie-corrected normal approximation
/// is used.
pub const EXACT_MAX_N: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero paired differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// `(W+ - W-) / (W+ + W-)` with differences taken as `b - a`.
    pub rank_biserial: f64,
    pub degenerate: bool,
    pub method: PMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on the differences `b - a`.
/// Zero differences are dropped before ranking.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(EvalError::InvalidInput(format!(
            "need at least 5 pairs, got {}",
            a.len()
        )));
    }
    if let Some(x) = a.iter().chain(b).find(|x| !x.is_finite()) {
        return Err(EvalError::InvalidInput(format!("non-finite score {x}")));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| y - x)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            rank_biserial: 0.0,
            degenerate: true,
            method: PMethod::Exact,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_two_sided(&ranks, w_plus), PMethod::Exact)
    } else {
        (normal_two_sided(&ranks, w_plus), PMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        p_value,
        rank_biserial: (w_plus - w_minus) / total,
        degenerate: false,
        method,
    })
}

/// Exact permutation distribution of W+ over all sign assignments, with
/// ties handled through doubled (integral) ranks.
fn exact_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled W+ == s
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let t = (w_plus * 2.0).round() as usize;
    let total = (ranks.len() as f64).exp2();
    let lower: u64 = counts[..=t].iter().sum();
    let upper: u64 = counts[t..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

fn normal_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

/// Benjamini-Hochberg step-up adjustment; output is in input order.
pub fn benjamini_hochberg(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        let q = p_values[i] * m as f64 / (rank + 1) as f64;
        running = running.min(q);
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

/// One paired comparison, e.g. a metric over the same examples for a
/// baseline (`a`) and a treatment (`b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub name: String,
    pub family: String,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceEntry {
    pub name: String,
    pub family: String,
    pub n: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub fdr_adjusted: f64,
    pub rank_biserial: f64,
    pub degenerate: bool,
    pub method: PMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub tests: Vec<SignificanceEntry>,
    /// Family name to the names of its member tests.
    pub families: BTreeMap<String, Vec<String>>,
}

/// Runs every test and BH-adjusts p-values within each family.
pub fn paired_significance(tests: &[PairedTest]) -> Result<SignificanceReport, EvalError> {
    let results = tests
        .iter()
        .map(|t| wilcoxon_signed_rank(&t.a, &t.b))
        .collect::<Result<Vec<_>, _>>()?;
    let mut families: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in tests.iter().enumerate() {
        families.entry(t.family.clone()).or_default().push(i);
    }
    let mut adjusted = vec![1.0; tests.len()];
    for members in families.values() {
        let ps: Vec<f64> = members.iter().map(|&i| results[i].p_value).collect();
        for (&i, q) in members.iter().zip(benjamini_hochberg(&ps)) {
            adjusted[i] = q;
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(SignificanceReport {
        tests: tests
            .iter()
            .zip(&results)
            .zip(adjusted)
            .map(|((t, r), q)| SignificanceEntry {
                name: t.name.clone(),
                family: t.family.clone(),
                n: r.n,
                mean_a: mean(&t.a),
                mean_b: mean(&t.b),
                p_value: r.p_value,
                fdr_adjusted: q,
                rank_biserial: r.rank_biserial,
                degenerate: r.degenerate,
                method: r.method,
            })
            .collect(),
        families: families
            .into_iter()
            .map(|(f, members)| {
                (
                    f,
                    members.into_iter().map(|i| tests[i].name.clone()).collect(),
                )
            })
            .collect(),
    })
}
