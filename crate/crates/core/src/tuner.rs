//! Grid search over promotion strength and beam width.
//!
//! Every cell is evaluated on the same seeded subset of the dataset. Results
//! are kept in grid order (alphas outer, beam widths inner) and each
//! successful cell gets a rank. A JSONL journal records finished cells so
//! an interrupted search can resume.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::MetricsReport;

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("journal {path}: {message}")]
    Journal { path: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Metric names accepted as objectives.
pub const OBJECTIVES: [&str; 6] = [
    "rouge1",
    "rouge2",
    "rougeL",
    "bs_prob",
    "bartscore",
    "hit_rate",
];

/// Reads the objective named `name` from a report.
pub fn objective_value(report: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "rouge1" => Some(report.rouge1),
        "rouge2" => Some(report.rouge2),
        "rougeL" => Some(report.rouge_l),
        "bs_prob" => report.bartscore_prob,
        "bartscore" => report.bartscore,
        "hit_rate" => report.hit_rate,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub beam_widths: Vec<usize>,
    pub objective: String,
    pub subset_fraction: f64,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alphas: (-8..=2).map(f64::from).collect(),
            beam_widths: (1..=20).collect(),
            objective: "rougeL".into(),
            subset_fraction: 0.10,
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), TunerError> {
        let bad = |m: &str| Err(TunerError::InvalidGrid(m.to_owned()));
        if self.alphas.is_empty() || self.beam_widths.is_empty() {
            return bad("alphas and beam widths must be non-empty");
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return bad("alphas must be finite");
        }
        if self.beam_widths.contains(&0) {
            return bad("beam widths must be positive");
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad("subset fraction must lie in (0, 1]");
        }
        if !OBJECTIVES.contains(&self.objective.as_str()) {
            return Err(TunerError::InvalidGrid(format!(
                "unknown objective {:?}; expected one of {OBJECTIVES:?}",
                self.objective
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<GridCell> {
        self.alphas
            .iter()
            .flat_map(|&alpha| {
                self.beam_widths
                    .iter()
                    .map(move |&beam_width| GridCell { alpha, beam_width })
            })
            .collect()
    }
}

/// Sorted indices of `ceil(fraction * n)` examples drawn without
/// replacement from a ChaCha8 stream seeded with `seed`.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let m = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub beam_width: usize,
}

impl GridCell {
    fn key(&self) -> (u64, usize) {
        (self.alpha.to_bits(), self.beam_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub alpha: f64,
    pub beam_width: usize,
    pub objective: Option<f64>,
    pub error: Option<String>,
    /// 1-based position among successful cells.
    #[serde(default)]
    pub rank: Option<usize>,
}

impl CellResult {
    pub fn cell(&self) -> GridCell {
        GridCell {
            alpha: self.alpha,
            beam_width: self.beam_width,
        }
    }

    pub fn failed(&self) -> bool {
        self.objective.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub objective: String,
    pub subset: Vec<usize>,
    pub cells: Vec<CellResult>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    alpha: f64,
    beam_width: usize,
    objective: Option<f64>,
    rank: Option<usize>,
    status: &'a str,
    error: &'a str,
}

impl GridTable {
    /// Successful cells, best first.
    pub fn ranked(&self) -> Vec<&CellResult> {
        let mut ok: Vec<&CellResult> = self.cells.iter().filter(|c| !c.failed()).collect();
        ok.sort_by_key(|c| c.rank);
        ok
    }

    pub fn best(&self) -> Option<&CellResult> {
        self.ranked().into_iter().next()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid table serializes") + "\n"
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TunerError> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.cells {
            w.serialize(CsvRow {
                alpha: c.alpha,
                beam_width: c.beam_width,
                objective: c.objective,
                rank: c.rank,
                status: if c.failed() { "failed" } else { "ok" },
                error: c.error.as_deref().unwrap_or(""),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ordering used for ranking: higher objective, then smaller beam, then
/// alpha closer to zero, then the lower alpha.
fn rank_order(a: &CellResult, b: &CellResult) -> std::cmp::Ordering {
    let (x, y) = (
        a.objective.unwrap_or(f64::NEG_INFINITY),
        b.objective.unwrap_or(f64::NEG_INFINITY),
    );
    y.total_cmp(&x)
        .then(a.beam_width.cmp(&b.beam_width))
        .then(a.alpha.abs().total_cmp(&b.alpha.abs()))
        .then(a.alpha.total_cmp(&b.alpha))
}

pub trait CellEvaluator: Sync {
    /// Objective of one cell on the given example indices.
    fn evaluate(&self, cell: GridCell, subset: &[usize]) -> Result<f64, String>;

    fn concurrency_safe(&self) -> bool {
        true
    }
}

impl<F> CellEvaluator for F
where
    F: Fn(GridCell, &[usize]) -> Result<f64, String> + Sync,
{
    fn evaluate(&self, cell: GridCell, subset: &[usize]) -> Result<f64, String> {
        self(cell, subset)
    }
}

fn read_journal(path: &Path) -> Result<HashMap<(u64, usize), CellResult>, TunerError> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(e.into()),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cell: CellResult = serde_json::from_str(&line).map_err(|e| TunerError::Journal {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        done.insert(cell.cell().key(), cell);
    }
    Ok(done)
}

/// Evaluates every cell of `spec` over a dataset of `n_examples`.
///
/// Cells already present in `journal` are reused, and newly finished ones
/// are appended to it. Failed cells stay in the table without a rank.
pub fn grid_search(
    spec: &GridSpec,
    n_examples: usize,
    evaluator: &dyn CellEvaluator,
    journal: Option<&Path>,
    threads: usize,
) -> Result<GridTable, TunerError> {
    spec.validate()?;
    if n_examples == 0 {
        return Err(TunerError::InvalidGrid("dataset is empty".into()));
    }
    let subset = subset_indices(n_examples, spec.subset_fraction, spec.seed);
    let previous = match journal {
        Some(p) => read_journal(p)?,
        None => HashMap::new(),
    };
    let sink = match journal {
        Some(p) => Some(Mutex::new(
            OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };

    let run = |cell: GridCell| -> Result<CellResult, TunerError> {
        if let Some(done) = previous.get(&cell.key()) {
            return Ok(CellResult {
                rank: None,
                ..done.clone()
            });
        }
        let (objective, error) = match evaluator.evaluate(cell, &subset) {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (None, Some(format!("non-finite objective {v}"))),
            Err(e) => (None, Some(e)),
        };
        let result = CellResult {
            alpha: cell.alpha,
            beam_width: cell.beam_width,
            objective,
            error,
            rank: None,
        };
        if let Some(sink) = &sink {
            let line = serde_json::to_string(&result).expect("cell serializes") + "\n";
            let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(result)
    };

    let grid = spec.cells();
    let results: Vec<Result<CellResult, TunerError>> =
        if threads > 1 && evaluator.concurrency_safe() {
            match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                Ok(pool) => pool.install(|| grid.par_iter().map(|&c| run(c)).collect()),
                Err(_) => grid.iter().map(|&c| run(c)).collect(),
            }
        } else {
            grid.iter().map(|&c| run(c)).collect()
        };
    let mut cells = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<usize> = (0..cells.len()).filter(|&i| !cells[i].failed()).collect();
    order.sort_by(|&i, &j| rank_order(&cells[i], &cells[j]));
    for (r, i) in order.into_iter().enumerate() {
        cells[i].rank = Some(r + 1);
    }
    Ok(GridTable {
        objective: spec.objective.clone(),
        subset,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(alphas: &[f64], beams: &[usize]) -> GridSpec {
        GridSpec {
            alphas: alphas.to_vec(),
            beam_widths: beams.to_vec(),
            subset_fraction: 1.0,
            ..GridSpec::default()
        }
    }

    #[test]
    fn default_grid_matches_search_ranges() {
        let g = GridSpec::default();
        assert_eq!(g.alphas.first(), Some(&-8.0));
        assert_eq!(g.alphas.last(), Some(&2.0));
        assert_eq!(g.beam_widths, (1..=20).collect::<Vec<_>>());
        assert_eq!(g.cells().len(), 11 * 20);
        assert_eq!(g.subset_fraction, 0.10);
    }

    #[test]
    fn subset_is_seeded_and_sized() {
        let a = subset_indices(95, 0.1, 7);
        assert_eq!(a.len(), 10);
        assert_eq!(a, subset_indices(95, 0.1, 7));
        assert_ne!(a, subset_indices(95, 0.1, 8));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subset_indices(3, 1.0, 0), vec![0, 1, 2]);
    }

    #[test]
    fn single_cell() {
        let t = grid_search(
            &spec(&[1.5], &[3]),
            4,
            &|_: GridCell, _: &[usize]| Ok(0.25),
            None,
            1,
        )
        .unwrap();
        assert_eq!(t.cells.len(), 1);
        assert_eq!(t.best().unwrap().objective, Some(0.25));
        assert_eq!(t.best().unwrap().rank, Some(1));
    }

    #[test]
    fn ties_prefer_small_beam_then_small_alpha() {
        let t = grid_search(
            &spec(&[-2.0, 1.0, 2.0], &[4, 2]),
            3,
            &|_: GridCell, _: &[usize]| Ok(1.0),
            None,
            1,
        )
        .unwrap();
        let order: Vec<(f64, usize)> = t.ranked().iter().map(|c| (c.alpha, c.beam_width)).collect();
        assert_eq!(
            order,
            vec![(1.0, 2), (-2.0, 2), (2.0, 2), (1.0, 4), (-2.0, 4), (2.0, 4)]
        );
    }

    #[test]
    fn failed_cells_kept_unranked() {
        let eval = |c: GridCell, _: &[usize]| {
            if c.beam_width == 2 {
                Err("boom".to_string())
            } else {
                Ok(c.alpha)
            }
        };
        let t = grid_search(&spec(&[0.0, 1.0], &[1, 2]), 3, &eval, None, 1).unwrap();
        assert_eq!(t.cells.len(), 4);
        let failed: Vec<_> = t.cells.iter().filter(|c| c.failed()).collect();
        assert_eq!(failed.len(), 2);
        assert!(failed
            .iter()
            .all(|c| c.rank.is_none() && c.error.as_deref() == Some("boom")));
        assert_eq!(
            t.best().unwrap().cell(),
            GridCell {
                alpha: 1.0,
                beam_width: 1
            }
        );
    }

    #[test]
    fn rejects_bad_specs() {
        let ok = |_: GridCell, _: &[usize]| Ok(0.0);
        for s in [
            spec(&[], &[1]),
            spec(&[0.0], &[0]),
            GridSpec {
                subset_fraction: 0.0,
                ..spec(&[0.0], &[1])
            },
            GridSpec {
                objective: "bleu".into(),
                ..spec(&[0.0], &[1])
            },
        ] {
            assert!(matches!(
                grid_search(&s, 3, &ok, None, 1),
                Err(TunerError::InvalidGrid(_))
            ));
        }
        assert!(grid_search(&spec(&[0.0], &[1]), 0, &ok, None, 1).is_err());
    }

    #[test]
    fn journal_resumes_without_reevaluating() {
        let dir = tempfile::tempdir().unwrap();
        let journal = dir.path().join("grid.jsonl");
        let s = spec(&[0.0, 1.0], &[1, 2]);
        let first = grid_search(
            &s,
            5,
            &|c: GridCell, _: &[usize]| Ok(c.alpha + c.beam_width as f64),
            Some(&journal),
            1,
        )
        .unwrap();
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let counting = |c: GridCell, _: &[usize]| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(c.alpha + c.beam_width as f64)
        };
        let second = grid_search(&s, 5, &counting, Some(&journal), 1).unwrap();
        assert_eq!(calls.into_inner(), 0);
        assert_eq!(first, second);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let t = grid_search(
            &spec(&[0.0, -1.0], &[1]),
            2,
            &|c: GridCell, _: &[usize]| Ok(-c.alpha),
            None,
            1,
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next(),
            Some("alpha,beam_width,objective,rank,status,error")
        );
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("-1.0,1,1.0,1,ok,"));
    }
}
