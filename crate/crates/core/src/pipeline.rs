//! Dataset-level operations behind the command-line tool.
//!
//! Datasets are JSONL files with one object per example. Recognized fields
//! are `id`, `source`, `reference` and `prediction`; any other field is
//! carried through untouched and in its original position.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::cache::BigramCache;
use crate::decode::{
    batch_decode, render, DecodeConfig, DecodeError, DecodeJob, StepRecord, DEFAULT_STOP_STRING,
};
use crate::eval::{
    aggregate, example_metrics, paired_significance, EvalError, ExampleMetrics, MetricsReport,
    PairedTest, ScoredExample, SignificanceReport, NOVEL_NGRAM_ORDERS,
};
use crate::model::{BridgeClient, BridgeOptions, ModelError, NgramLM, TokenScorer};
use crate::text::{
    tokenize, Document, Spacing, TextError, TokenId, VocabMode, Vocabulary, NEWLINE_TOKEN,
};
use crate::transform::{PromotionConfig, StopSet, Variant};
use crate::tuner::{
    grid_search, objective_value, CellEvaluator, GridCell, GridSpec, GridTable, TunerError,
};

pub type Record = Map<String, Value>;

pub const ARTICLE_PLACEHOLDER: &str = "{article}";

pub const DEFAULT_TEMPLATE: &str =
    "Write a paragraph summarizing the given article without preamble.\n\n{article}";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Data(String),
    #[error("backend: {0}")]
    Backend(#[source] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
}

impl PipelineError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

/// Parses JSONL text; blank lines are skipped and every other line must be
/// a JSON object.
pub fn parse_jsonl(text: &str, label: &str) -> Result<Vec<Record>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PipelineError::Parse {
            path: label.to_owned(),
            line: i + 1,
            message,
        };
        match serde_json::from_str::<Value>(line).map_err(|e| err(e.to_string()))? {
            Value::Object(m) => out.push(m),
            _ => return Err(err("expected a JSON object".into())),
        }
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>, PipelineError> {
    parse_jsonl(&read_text(path)?, &path.display().to_string())
}

pub fn to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Example key: the `id` field as text, or the record's position.
pub fn record_id(record: &Record, index: usize) -> String {
    match record.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => index.to_string(),
        Some(other) => other.to_string(),
    }
}

fn text_field<'a>(record: &'a Record, index: usize, name: &str) -> Result<&'a str, PipelineError> {
    match record.get(name) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(PipelineError::Data(format!(
            "record {index}: field {name:?} is not a string"
        ))),
        None => Err(PipelineError::Data(format!(
            "record {index}: missing field {name:?}"
        ))),
    }
}

fn opt_f64(record: &Record, name: &str) -> Option<f64> {
    record.get(name).and_then(Value::as_f64)
}

/// Reads `{"id", "bartscore"}` lines into a map keyed by id.
pub fn parse_scores(text: &str, label: &str) -> Result<HashMap<String, f64>, PipelineError> {
    let mut out = HashMap::new();
    for (i, rec) in parse_jsonl(text, label)?.iter().enumerate() {
        let id = match rec.get("id") {
            Some(Value::Null) | None => {
                return Err(PipelineError::Data(format!("{label}: score {i} has no id")))
            }
            _ => record_id(rec, i),
        };
        let score = opt_f64(rec, "bartscore").ok_or_else(|| {
            PipelineError::Data(format!("{label}: score for {id:?} is not a number"))
        })?;
        if out.insert(id.clone(), score).is_some() {
            return Err(PipelineError::Data(format!(
                "{label}: duplicate score for {id:?}"
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Reference,
    /// Address of an external model process, see [`BridgeClient::connect`].
    Bridge(String),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference" => Ok(Self::Reference),
            _ => match s.strip_prefix("bridge:") {
                Some(addr) if !addr.is_empty() => Ok(Self::Bridge(addr.to_owned())),
                _ => Err(format!(
                    "backend must be \"reference\" or \"bridge:ADDRESS\", got {s:?}"
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub backend: BackendSpec,
    pub ngram_order: usize,
    pub ngram_delta: f64,
    /// Only used with an external backend.
    pub prompt_template: String,
    /// Maximum prompt length in tokens. With an external backend it defaults
    /// to half the context limit the peer reports.
    pub context_budget: Option<usize>,
    pub bridge: BridgeOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            backend: BackendSpec::Reference,
            ngram_order: crate::model::ngram::DEFAULT_ORDER,
            ngram_delta: crate::model::ngram::DEFAULT_DELTA,
            prompt_template: DEFAULT_TEMPLATE.to_owned(),
            context_budget: None,
            bridge: BridgeOptions::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.prompt_template.matches(ARTICLE_PLACEHOLDER).count() != 1 {
            return Err(PipelineError::Config(format!(
                "prompt template must contain {ARTICLE_PLACEHOLDER} exactly once"
            )));
        }
        if self.context_budget == Some(0) {
            return Err(PipelineError::Config(
                "context budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub alpha: f64,
    pub variant: Variant,
    /// False runs the identical pipeline with promotion switched off.
    pub promote: bool,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    pub stop_strings: Vec<String>,
    pub length_penalty: f64,
    pub jobs: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            variant: Variant::Plain,
            promote: true,
            beam_width: 4,
            max_new_tokens: 64,
            stop_strings: vec![DEFAULT_STOP_STRING.to_owned()],
            length_penalty: 0.0,
            jobs: 1,
        }
    }
}

/// A source prepared for decoding.
#[derive(Debug, Clone)]
pub struct PreparedSource {
    pub prompt: Vec<TokenId>,
    /// What the cache is built from: the part of the source the model sees.
    pub document: Document,
    pub truncated: bool,
}

enum Scorer {
    Reference(NgramLM),
    Bridge(BridgeClient),
}

/// A backend plus everything needed to turn its ids back into text.
pub struct Engine {
    scorer: Scorer,
    vocab: Vocabulary,
    stop_set: StopSet,
    has_surfaces: bool,
}

/// First `n` tokens of a document, keeping sentence boundaries.
pub fn truncate_document(doc: &Document, n: usize) -> Document {
    let mut left = n;
    let mut sentences = Vec::new();
    for s in &doc.sentences {
        if left == 0 {
            break;
        }
        let take = s.len().min(left);
        sentences.push(s[..take].to_vec());
        left -= take;
    }
    Document::from_sentences(sentences)
}

/// Splits native-model ids into sentences. A sentence closes after a
/// newline token, or after a token ending in `.`, `!` or `?` when the next
/// token starts with whitespace. Without surface forms only newline tokens
/// split.
pub fn segment_ids(ids: &[TokenId], surfaces: Option<&Vocabulary>, newline: &StopSet) -> Document {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        current.push(id);
        let ends = newline.contains(id)
            || surfaces.is_some_and(|v| {
                let here = v.token(id).unwrap_or("");
                let next_blank = ids.get(i + 1).map_or(true, |&n| {
                    v.token(n)
                        .and_then(|t| t.chars().next())
                        .is_some_and(char::is_whitespace)
                });
                here.ends_with(['.', '!', '?']) && next_blank
            });
        if ends {
            sentences.push(std::mem::take(&mut current));
        }
    }
    sentences.push(current);
    Document::from_sentences(sentences)
}

/// Byte offsets just past each whitespace-separated word.
fn word_ends(text: &str) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                ends.push(i);
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    if in_word {
        ends.push(text.len());
    }
    ends
}

impl Engine {
    /// Builds a vocabulary over all sources and trains the n-gram model on
    /// them. Prompts are the raw source tokens.
    pub fn reference(
        sources: &[&str],
        cfg: &EngineConfig,
    ) -> Result<(Self, Vec<PreparedSource>), PipelineError> {
        let mut vocab = Vocabulary::new();
        vocab.intern(NEWLINE_TOKEN);
        vocab.intern(".");
        let docs = sources
            .iter()
            .map(|s| tokenize(s, VocabMode::Build, &mut vocab))
            .collect::<Result<Vec<_>, _>>()?;
        let lm =
            NgramLM::train(&docs, vocab.len(), cfg.ngram_order, cfg.ngram_delta).map_err(|e| {
                match e {
                    ModelError::EmptyCorpus => {
                        PipelineError::Data("no source text to train the reference model on".into())
                    }
                    ModelError::InvalidParameter(m) => PipelineError::Config(m),
                    other => PipelineError::Backend(other),
                }
            })?;
        let prepared = docs
            .into_iter()
            .map(|doc| {
                let total = doc.num_tokens();
                let document = match cfg.context_budget {
                    Some(b) if b < total => truncate_document(&doc, b),
                    _ => doc,
                };
                PreparedSource {
                    prompt: document.flatten(),
                    truncated: document.num_tokens() < total,
                    document,
                }
            })
            .collect();
        let stop_set = StopSet::newline_tokens(&vocab);
        Ok((
            Self {
                scorer: Scorer::Reference(lm),
                vocab,
                stop_set,
                has_surfaces: true,
            },
            prepared,
        ))
    }

    /// Wraps a connected peer. Each source is rendered into the template,
    /// shortened word by word until the encoded prompt fits the budget, and
    /// its cache document is the encoded (shortened) article.
    pub fn bridge(
        client: BridgeClient,
        sources: &[&str],
        cfg: &EngineConfig,
    ) -> Result<(Self, Vec<PreparedSource>), PipelineError> {
        cfg.validate()?;
        let info = client.info().clone();
        let (vocab, has_surfaces) = match &info.surface_forms {
            Some(forms) => (
                Vocabulary::from_surface_forms(forms.clone(), Spacing::Concatenate),
                true,
            ),
            None => (Vocabulary::new(), false),
        };
        let mut stop_set: Vec<TokenId> = info.newline_token_ids.clone();
        if has_surfaces {
            stop_set.extend(vocab.newline_ids());
        }
        let stop_set = StopSet::new(stop_set);
        let budget = cfg
            .context_budget
            .or(info.context_limit.map(|l| (l / 2).max(1)));
        let backend = |e| PipelineError::Backend(e);

        let mut prepared = Vec::with_capacity(sources.len());
        for (i, source) in sources.iter().enumerate() {
            let session = i as u64;
            let prompt_for = |article: &str| {
                client.encode(
                    session,
                    &cfg.prompt_template
                        .replacen(ARTICLE_PLACEHOLDER, article, 1),
                    true,
                )
            };
            let mut article: &str = source;
            let mut prompt = prompt_for(article).map_err(backend)?;
            let mut truncated = false;
            if let Some(b) = budget {
                if prompt.len() > b {
                    truncated = true;
                    let ends = word_ends(source);
                    // largest word count whose prompt fits
                    let (mut lo, mut hi) = (0usize, ends.len());
                    let mut best = None;
                    while lo <= hi {
                        let mid = (lo + hi) / 2;
                        let cut = if mid == 0 { 0 } else { ends[mid - 1] };
                        let p = prompt_for(&source[..cut]).map_err(backend)?;
                        if p.len() <= b {
                            best = Some((cut, p));
                            lo = mid + 1;
                        } else if mid == 0 {
                            break;
                        } else {
                            hi = mid - 1;
                        }
                    }
                    let (cut, p) = best.ok_or_else(|| {
                        PipelineError::Data(format!(
                            "record {i}: the prompt template alone exceeds {b} tokens"
                        ))
                    })?;
                    article = &source[..cut];
                    prompt = p;
                }
            }
            let ids = client.encode(session, article, false).map_err(backend)?;
            let document = segment_ids(&ids, has_surfaces.then_some(&vocab), &stop_set);
            prepared.push(PreparedSource {
                prompt,
                document,
                truncated,
            });
        }
        Ok((
            Self {
                scorer: Scorer::Bridge(client),
                vocab,
                stop_set,
                has_surfaces,
            },
            prepared,
        ))
    }

    pub fn prepare(
        cfg: &EngineConfig,
        sources: &[&str],
    ) -> Result<(Self, Vec<PreparedSource>), PipelineError> {
        cfg.validate()?;
        match &cfg.backend {
            BackendSpec::Reference => Self::reference(sources, cfg),
            BackendSpec::Bridge(addr) => {
                let client =
                    BridgeClient::connect(addr, cfg.bridge).map_err(PipelineError::Backend)?;
                Self::bridge(client, sources, cfg)
            }
        }
    }

    pub fn scorer(&self) -> &dyn TokenScorer {
        match &self.scorer {
            Scorer::Reference(lm) => lm,
            Scorer::Bridge(c) => c,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn stop_set(&self) -> &StopSet {
        &self.stop_set
    }

    /// Whether generated ids can be rendered as text.
    pub fn has_surfaces(&self) -> bool {
        self.has_surfaces
    }

    pub fn decode_config(&self, gen: &GenerationConfig) -> DecodeConfig {
        let mut promotion = PromotionConfig::new(gen.alpha, gen.variant, self.stop_set.clone());
        promotion.enabled = gen.promote;
        let (stop_strings, stop_on_stop_token) = if self.has_surfaces {
            (gen.stop_strings.clone(), false)
        } else {
            (Vec::new(), true)
        };
        DecodeConfig {
            beam_width: gen.beam_width,
            promotion,
            max_new_tokens: gen.max_new_tokens,
            stop_strings,
            stop_on_stop_token,
            length_penalty: gen.length_penalty,
        }
    }

    pub fn render(
        &self,
        ids: &[TokenId],
        gen: &GenerationConfig,
    ) -> Result<Option<String>, TextError> {
        if !self.has_surfaces {
            return Ok(None);
        }
        Ok(Some(
            render(ids, &self.vocab, &gen.stop_strings)?
                .trim()
                .to_owned(),
        ))
    }
}

/// The decoded summary of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub ids: Vec<TokenId>,
    pub text: Option<String>,
    pub score: f64,
    pub finished: bool,
    pub hit_rate: Option<f64>,
    pub argmax_change_rate: Option<f64>,
    pub trace: Vec<StepRecord>,
}

/// Decodes the selected prepared sources (all when `subset` is `None`).
/// Failures are returned per example.
pub fn summarize(
    engine: &Engine,
    prepared: &[PreparedSource],
    subset: Option<&[usize]>,
    gen: &GenerationConfig,
) -> Result<Vec<Result<Summary, String>>, PipelineError> {
    let cfg = engine.decode_config(gen);
    cfg.validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let picked: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..prepared.len()).collect(),
    };
    let jobs: Vec<DecodeJob> = picked
        .iter()
        .map(|&i| DecodeJob {
            session: i as u64,
            prompt: prepared[i].prompt.clone(),
            cache: Some(BigramCache::build_with_id(
                &prepared[i].document,
                &i.to_string(),
            )),
            document: Document::default(),
        })
        .collect();
    let results = batch_decode(
        engine.scorer(),
        engine.vocab(),
        &jobs,
        &cfg,
        gen.jobs.max(1),
    );
    results
        .into_iter()
        .map(|r| match r {
            Ok(item) => {
                let best = item.output.best;
                let text = engine.render(&best.ids, gen)?;
                Ok(Ok(Summary {
                    text,
                    score: best.score,
                    finished: best.finished,
                    hit_rate: item.stats.hit_rate,
                    argmax_change_rate: item.stats.argmax_change_rate,
                    trace: best.trace,
                    ids: best.ids,
                }))
            }
            Err(DecodeError::Config(m)) => Err(PipelineError::Config(m)),
            Err(e) => Ok(Err(e.to_string())),
        })
        .collect()
}

fn num(x: Option<f64>) -> Value {
    x.and_then(serde_json::Number::from_f64)
        .map_or(Value::Null, Value::Number)
}

#[derive(Debug, Clone)]
pub struct SummarizeOutput {
    pub predictions: Vec<Record>,
    pub traces: Vec<Record>,
    pub failures: usize,
}

/// Summarizes every record: each gains `prediction`, `hit_rate` and
/// `argmax_change_rate` (plus `prediction_ids` when the backend has no
/// surface forms, and `error` when decoding failed).
pub fn summarize_records(
    records: &[Record],
    cfg: &EngineConfig,
    gen: &GenerationConfig,
) -> Result<SummarizeOutput, PipelineError> {
    let sources = records
        .iter()
        .enumerate()
        .map(|(i, r)| text_field(r, i, "source"))
        .collect::<Result<Vec<_>, _>>()?;
    if sources.is_empty() {
        return Ok(SummarizeOutput {
            predictions: Vec::new(),
            traces: Vec::new(),
            failures: 0,
        });
    }
    let (engine, prepared) = Engine::prepare(cfg, &sources)?;
    let results = summarize(&engine, &prepared, None, gen)?;
    let mut out = SummarizeOutput {
        predictions: Vec::with_capacity(records.len()),
        traces: Vec::with_capacity(records.len()),
        failures: 0,
    };
    for (i, (record, result)) in records.iter().zip(results).enumerate() {
        let mut rec = record.clone();
        let mut trace = Record::new();
        trace.insert(
            "id".into(),
            record.get("id").cloned().unwrap_or_else(|| Value::from(i)),
        );
        trace.insert(
            "source_truncated".into(),
            Value::Bool(prepared[i].truncated),
        );
        match result {
            Ok(s) => {
                rec.insert(
                    "prediction".into(),
                    s.text.map_or(Value::Null, Value::String),
                );
                if !engine.has_surfaces() {
                    rec.insert(
                        "prediction_ids".into(),
                        serde_json::to_value(&s.ids).expect("ids"),
                    );
                }
                rec.insert("hit_rate".into(), num(s.hit_rate));
                rec.insert("argmax_change_rate".into(), num(s.argmax_change_rate));
                trace.insert("finished".into(), Value::Bool(s.finished));
                trace.insert("score".into(), num(Some(s.score)));
                trace.insert("ids".into(), serde_json::to_value(&s.ids).expect("ids"));
                trace.insert(
                    "steps".into(),
                    serde_json::to_value(&s.trace).expect("steps"),
                );
            }
            Err(e) => {
                out.failures += 1;
                rec.insert("prediction".into(), Value::Null);
                rec.insert("hit_rate".into(), Value::Null);
                rec.insert("argmax_change_rate".into(), Value::Null);
                rec.insert("error".into(), Value::String(e.clone()));
                trace.insert("error".into(), Value::String(e));
            }
        }
        out.predictions.push(rec);
        out.traces.push(trace);
    }
    Ok(out)
}

fn metrics_of(record: &Record, i: usize, stem: bool) -> Result<ExampleMetrics, PipelineError> {
    let source = text_field(record, i, "source")?;
    let reference = text_field(record, i, "reference")?;
    let prediction = match record.get("prediction") {
        Some(Value::Null) => "",
        _ => text_field(record, i, "prediction")?,
    };
    Ok(example_metrics(source, reference, prediction, stem))
}

fn check_score_ids(records: &[Record], scores: &HashMap<String, f64>) -> Result<(), PipelineError> {
    let ids: std::collections::HashSet<String> = records
        .iter()
        .enumerate()
        .map(|(i, r)| record_id(r, i))
        .collect();
    let mut unknown: Vec<&String> = scores.keys().filter(|k| !ids.contains(*k)).collect();
    unknown.sort();
    match unknown.first() {
        Some(id) => Err(PipelineError::Data(format!(
            "score file has unknown id {id:?}"
        ))),
        None => Ok(()),
    }
}

/// Metrics over prediction records. A null prediction counts as empty.
pub fn evaluate(
    records: &[Record],
    scores: Option<&HashMap<String, f64>>,
    stem: bool,
) -> Result<MetricsReport, PipelineError> {
    if let Some(s) = scores {
        check_score_ids(records, s)?;
    }
    let examples = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(ScoredExample {
                metrics: Some(metrics_of(r, i, stem)?),
                hit_rate: opt_f64(r, "hit_rate"),
                argmax_change_rate: opt_f64(r, "argmax_change_rate"),
                bartscore: scores.and_then(|s| s.get(&record_id(r, i)).copied()),
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(aggregate(&examples)?)
}

/// Per-example paired tests between two prediction files over the same
/// examples: ROUGE F1 as one family, novel n-gram F1 as another, and
/// BARTScore when both score maps are given.
pub fn compare(
    a: &[Record],
    b: &[Record],
    stem: bool,
    scores: Option<(&HashMap<String, f64>, &HashMap<String, f64>)>,
) -> Result<SignificanceReport, PipelineError> {
    let index_b: HashMap<String, usize> = b
        .iter()
        .enumerate()
        .map(|(i, r)| (record_id(r, i), i))
        .collect();
    if index_b.len() != b.len() || a.len() != b.len() {
        return Err(PipelineError::Data(
            "prediction files must cover the same unique ids".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(a.len());
    for (i, ra) in a.iter().enumerate() {
        let id = record_id(ra, i);
        let j = *index_b.get(&id).ok_or_else(|| {
            PipelineError::Data(format!("id {id:?} missing from the second file"))
        })?;
        pairs.push((id, metrics_of(ra, i, stem)?, metrics_of(&b[j], j, stem)?));
    }
    let column = |f: &dyn Fn(&ExampleMetrics) -> f64| -> (Vec<f64>, Vec<f64>) {
        pairs.iter().map(|(_, x, y)| (f(x), f(y))).unzip()
    };
    let mut tests = Vec::new();
    let mut push = |name: String, family: &str, (a, b): (Vec<f64>, Vec<f64>)| {
        tests.push(PairedTest {
            name,
            family: family.to_owned(),
            a,
            b,
        })
    };
    push("rouge1".into(), "rouge", column(&|m| m.rouge1.f1));
    push("rouge2".into(), "rouge", column(&|m| m.rouge2.f1));
    push("rougeL".into(), "rouge", column(&|m| m.rouge_l.f1));
    for n in NOVEL_NGRAM_ORDERS {
        push(
            format!("novel_{n}gram_f1"),
            "novel_ngram",
            column(&|m| m.novel[&n].f1),
        );
    }
    if let Some((sa, sb)) = scores {
        let get = |s: &HashMap<String, f64>, id: &String| {
            s.get(id)
                .copied()
                .ok_or_else(|| PipelineError::Data(format!("no BARTScore for id {id:?}")))
        };
        let xs = pairs
            .iter()
            .map(|(id, _, _)| get(sa, id))
            .collect::<Result<Vec<_>, _>>()?;
        let ys = pairs
            .iter()
            .map(|(id, _, _)| get(sb, id))
            .collect::<Result<Vec<_>, _>>()?;
        push("bartscore".into(), "bartscore", (xs, ys));
    }
    Ok(paired_significance(&tests)?)
}

/// BARTScores for grid cells, keyed by example id, alpha and beam width.
pub type CellScores = HashMap<(String, u64, usize), f64>;

/// Reads `{"id", "alpha", "beam_width", "bartscore"}` lines.
pub fn parse_cell_scores(text: &str, label: &str) -> Result<CellScores, PipelineError> {
    let mut out = HashMap::new();
    for (i, rec) in parse_jsonl(text, label)?.iter().enumerate() {
        let bad = || {
            PipelineError::Data(format!(
                "{label}: line {} needs id, alpha, beam_width and bartscore",
                i + 1
            ))
        };
        let alpha = opt_f64(rec, "alpha").ok_or_else(bad)?;
        let beam = rec
            .get("beam_width")
            .and_then(Value::as_u64)
            .ok_or_else(bad)? as usize;
        let score = opt_f64(rec, "bartscore").ok_or_else(bad)?;
        rec.get("id").ok_or_else(bad)?;
        out.insert((record_id(rec, i), alpha.to_bits(), beam), score);
    }
    Ok(out)
}

struct PipelineEvaluator<'a> {
    engine: &'a Engine,
    prepared: &'a [PreparedSource],
    records: &'a [Record],
    gen: &'a GenerationConfig,
    objective: &'a str,
    cell_scores: Option<&'a CellScores>,
    stem: bool,
}

impl CellEvaluator for PipelineEvaluator<'_> {
    fn evaluate(&self, cell: GridCell, subset: &[usize]) -> Result<f64, String> {
        let gen = GenerationConfig {
            alpha: cell.alpha,
            beam_width: cell.beam_width,
            jobs: 1,
            ..self.gen.clone()
        };
        let results =
            summarize(self.engine, self.prepared, Some(subset), &gen).map_err(|e| e.to_string())?;
        let mut examples = Vec::with_capacity(subset.len());
        for (&i, r) in subset.iter().zip(results) {
            let s = r?;
            let rec = &self.records[i];
            let id = record_id(rec, i);
            let bartscore = match self.cell_scores {
                Some(cs) => Some(
                    *cs.get(&(id.clone(), cell.alpha.to_bits(), cell.beam_width))
                        .ok_or_else(|| {
                            format!(
                                "no BARTScore for {id:?} at alpha {} beam {}",
                                cell.alpha, cell.beam_width
                            )
                        })?,
                ),
                None => None,
            };
            let prediction = s.text.unwrap_or_default();
            let metrics = example_metrics(
                text_field(rec, i, "source").map_err(|e| e.to_string())?,
                text_field(rec, i, "reference").map_err(|e| e.to_string())?,
                &prediction,
                self.stem,
            );
            examples.push(ScoredExample {
                metrics: Some(metrics),
                hit_rate: s.hit_rate,
                argmax_change_rate: s.argmax_change_rate,
                bartscore,
            });
        }
        let report = aggregate(&examples).map_err(|e| e.to_string())?;
        objective_value(&report, self.objective)
            .ok_or_else(|| format!("objective {} unavailable", self.objective))
    }

    fn concurrency_safe(&self) -> bool {
        self.engine.scorer().concurrency_safe()
    }
}

pub struct TuneOptions<'a> {
    pub cell_scores: Option<&'a CellScores>,
    pub journal: Option<&'a Path>,
    pub stem: bool,
    pub threads: usize,
}

/// Runs the grid over a seeded subset of `records`, which need `source`
/// and `reference` fields.
pub fn tune(
    records: &[Record],
    cfg: &EngineConfig,
    gen: &GenerationConfig,
    spec: &GridSpec,
    opts: &TuneOptions<'_>,
) -> Result<GridTable, PipelineError> {
    spec.validate()?;
    if records.is_empty() {
        return Err(PipelineError::Data("dataset is empty".into()));
    }
    let sources = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            text_field(r, i, "reference")?;
            text_field(r, i, "source")
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (engine, prepared) = Engine::prepare(cfg, &sources)?;
    let evaluator = PipelineEvaluator {
        engine: &engine,
        prepared: &prepared,
        records,
        gen,
        objective: &spec.objective,
        cell_scores: opts.cell_scores,
        stem: opts.stem,
    };
    Ok(grid_search(
        spec,
        records.len(),
        &evaluator,
        opts.journal,
        opts.threads,
    )?)
}

/// Vocabulary and one cache per input text, all sharing the vocabulary.
pub fn build_caches(
    texts: &[(String, &str)],
) -> Result<(Vocabulary, Vec<BigramCache>), PipelineError> {
    let mut vocab = Vocabulary::new();
    let mut caches = Vec::with_capacity(texts.len());
    for (id, text) in texts {
        let doc = tokenize(text, VocabMode::Build, &mut vocab)?;
        caches.push(BigramCache::build_with_id(&doc, id));
    }
    Ok((vocab, caches))
}
