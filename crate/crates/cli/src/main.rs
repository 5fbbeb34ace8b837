mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bloop::cache::BigramCache;
use bloop::pipeline::{
    build_caches, compare, evaluate, parse_cell_scores, parse_scores, read_jsonl, read_text, record_id,
    summarize_records, to_jsonl, tune, write_text, PipelineError, TuneOptions,
};
use bloop::tuner::{GridSpec, TunerError};
use config::{ConfigError, Settings};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "bloop", version, about = "Bigram lookahead promotion for summarization decoding")]
struct Cli {
    /// TOML file with default settings (overridden by flags).
    #[arg(long, global = true, env = "BLOOP_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CacheFormat {
    Json,
    Binary,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build bigram caches from a text file or a JSONL dataset.
    BuildCache {
        input: PathBuf,
        output: PathBuf,
        /// Where to write the vocabulary (default: OUTPUT.vocab).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: CacheFormat,
    },
    /// Summarize every record of a JSONL dataset.
    Summarize {
        dataset: PathBuf,
        /// Predictions JSONL (default: stdout).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Per-step decode traces as JSONL.
        #[arg(long)]
        trace_output: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Score a predictions file.
    Evaluate {
        predictions: PathBuf,
        /// JSONL of {"id", "bartscore"}.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Grid search over alpha and beam width.
    Tune {
        dataset: PathBuf,
        /// Comma-separated alphas (default -8..2).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Vec<f64>,
        /// Comma-separated beam widths (default 1..20).
        #[arg(long, value_delimiter = ',')]
        beam_widths: Vec<usize>,
        /// rouge1, rouge2, rougeL, bs_prob, bartscore or hit_rate.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        subset_fraction: Option<f64>,
        /// JSONL of {"id", "alpha", "beam_width", "bartscore"} per cell.
        #[arg(long)]
        cell_scores: Option<PathBuf>,
        /// Journal of finished cells; an existing journal resumes the search.
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long)]
        output_csv: Option<PathBuf>,
        /// Grid table as JSON (default: stdout).
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Paired significance tests between two prediction files.
    Compare {
        predictions_a: PathBuf,
        predictions_b: PathBuf,
        #[arg(long, requires = "scores_b")]
        scores_a: Option<PathBuf>,
        #[arg(long, requires = "scores_a")]
        scores_b: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Config(_) | PipelineError::Tuner(TunerError::InvalidGrid(_)) => EXIT_USAGE,
            PipelineError::Backend(_) => EXIT_BACKEND,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => write_text(p, text).map_err(Failure::from),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure {
                    code: EXIT_DATA,
                    message: format!("stdout: {e}"),
                })
        }
    }
}

fn layered(flags: Settings, config: Option<&Path>) -> Result<Settings, Failure> {
    let file = match config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    let env = Settings::from_env(|k| std::env::var(k).ok())?;
    Ok(flags.or(file).or(env))
}

fn pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn build_cache(input: &Path, output: &Path, vocab: Option<&Path>, format: CacheFormat) -> Result<(), Failure> {
    let is_jsonl = input.extension().is_some_and(|e| e == "jsonl");
    let vocab_path = vocab.map_or_else(|| PathBuf::from(format!("{}.vocab", output.display())), Path::to_path_buf);
    let (vocabulary, caches, body) = if is_jsonl {
        if matches!(format, CacheFormat::Binary) {
            return Err(Failure {
                code: EXIT_USAGE,
                message: "binary format holds a single cache; use a plain text input".into(),
            });
        }
        let records = read_jsonl(input)?;
        let mut texts = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let src = r.get("source").and_then(|v| v.as_str()).ok_or_else(|| Failure {
                code: EXIT_DATA,
                message: format!("{}: record {i} has no string \"source\"", input.display()),
            })?;
            texts.push((record_id(r, i), src));
        }
        let (v, caches) = build_caches(&texts)?;
        let body: Vec<u8> = caches.iter().flat_map(|c| (c.to_json() + "\n").into_bytes()).collect();
        (v, caches, body)
    } else {
        let text = read_text(input)?;
        let id = input.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let (v, caches) = build_caches(&[(id, text.as_str())])?;
        let body = match format {
            CacheFormat::Json => (caches[0].to_json() + "\n").into_bytes(),
            CacheFormat::Binary => {
                let mut buf = Vec::new();
                caches[0].write_binary(&mut buf).expect("writing to memory");
                buf
            }
        };
        (v, caches, body)
    };
    std::fs::write(output, body).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", output.display()),
    })?;
    let mut vbuf = Vec::new();
    vocabulary.write_to(&mut vbuf).expect("writing to memory");
    std::fs::write(&vocab_path, vbuf).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", vocab_path.display()),
    })?;
    let pairs: usize = caches.iter().map(BigramCache::len).sum();
    eprintln!("{} caches, {pairs} bigrams, {} vocabulary entries", caches.len(), vocabulary.len());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::BuildCache {
            input,
            output,
            vocab,
            format,
        } => build_cache(&input, &output, vocab.as_deref(), format),
        Command::Summarize {
            dataset,
            output,
            trace_output,
            settings,
        } => {
            let s = layered(settings, config)?;
            let (engine, gen) = (s.engine()?, s.generation()?);
            let records = read_jsonl(&dataset)?;
            let out = summarize_records(&records, &engine, &gen)?;
            emit(output.as_deref(), &to_jsonl(&out.predictions))?;
            if let Some(p) = trace_output {
                write_text(&p, &to_jsonl(&out.traces))?;
            }
            if out.failures > 0 {
                eprintln!("{} of {} examples failed to decode", out.failures, records.len());
                if out.failures == records.len() {
                    return Err(Failure {
                        code: EXIT_BACKEND,
                        message: "every example failed".into(),
                    });
                }
            }
            Ok(())
        }
        Command::Evaluate {
            predictions,
            scores,
            output,
            settings,
        } => {
            let s = layered(settings, config)?;
            let records = read_jsonl(&predictions)?;
            let scores = match scores {
                Some(p) => Some(parse_scores(&read_text(&p)?, &p.display().to_string())?),
                None => None,
            };
            let report = evaluate(&records, scores.as_ref(), s.stem.unwrap_or(false))?;
            emit(output.as_deref(), &pretty(&report))
        }
        Command::Tune {
            dataset,
            alphas,
            beam_widths,
            objective,
            subset_fraction,
            cell_scores,
            journal,
            output_csv,
            output,
            settings,
        } => {
            let s = layered(settings, config)?;
            let (engine, gen) = (s.engine()?, s.generation()?);
            let d = GridSpec::default();
            let cell_scores = match &cell_scores {
                Some(p) => Some(parse_cell_scores(&read_text(p)?, &p.display().to_string())?),
                None => None,
            };
            let spec = GridSpec {
                alphas: if alphas.is_empty() { d.alphas } else { alphas },
                beam_widths: if beam_widths.is_empty() { d.beam_widths } else { beam_widths },
                objective: objective.unwrap_or_else(|| {
                    if cell_scores.is_some() { "bs_prob" } else { "rougeL" }.to_owned()
                }),
                subset_fraction: subset_fraction.unwrap_or(d.subset_fraction),
                seed: s.seed.unwrap_or(d.seed),
            };
            let records = read_jsonl(&dataset)?;
            let table = tune(
                &records,
                &engine,
                &gen,
                &spec,
                &TuneOptions {
                    cell_scores: cell_scores.as_ref(),
                    journal: journal.as_deref(),
                    stem: s.stem.unwrap_or(false),
                    threads: gen.jobs,
                },
            )?;
            if let Some(p) = output_csv {
                let mut buf = Vec::new();
                table.write_csv(&mut buf).map_err(|e| Failure::from(PipelineError::from(e)))?;
                write_text(&p, &String::from_utf8(buf).expect("csv is UTF-8"))?;
            }
            match table.best() {
                Some(b) => eprintln!(
                    "best: alpha {} beam {} {} {}",
                    b.alpha,
                    b.beam_width,
                    table.objective,
                    b.objective.unwrap_or(f64::NAN)
                ),
                None => eprintln!("every grid cell failed"),
            }
            emit(output.as_deref(), &table.to_json())
        }
        Command::Compare {
            predictions_a,
            predictions_b,
            scores_a,
            scores_b,
            output,
            settings,
        } => {
            let s = layered(settings, config)?;
            let a = read_jsonl(&predictions_a)?;
            let b = read_jsonl(&predictions_b)?;
            let load = |p: &Path| -> Result<_, Failure> { Ok(parse_scores(&read_text(p)?, &p.display().to_string())?) };
            let scores = match (scores_a, scores_b) {
                (Some(x), Some(y)) => Some((load(&x)?, load(&y)?)),
                _ => None,
            };
            let report = compare(&a, &b, s.stem.unwrap_or(false), scores.as_ref().map(|(x, y)| (x, y)))?;
            emit(output.as_deref(), &pretty(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bloop: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
