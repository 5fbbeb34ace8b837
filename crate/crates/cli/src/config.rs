//! Layered run settings: command-line flags, then a TOML config file, then
//! `BLOOP_*` environment variables, then built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;

use bloop::model::BridgeOptions;
use bloop::pipeline::{read_text, BackendSpec, EngineConfig, GenerationConfig};
use bloop::transform::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Plain,
    Fw,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Plain => Variant::Plain,
            VariantArg::Fw => Variant::FrequencyWeighted,
        }
    }
}

/// Every setting that can come from any layer. `None` means "not given".
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Promotion added to source-bigram followers (may be negative).
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Decode with promotion switched off (cache lookups are still counted).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub no_promotion: Option<bool>,
    /// Stop string; repeatable. `\n`, `\t` and `\\` escapes are understood.
    #[arg(long = "stop-string")]
    #[serde(default)]
    pub stop_strings: Option<Vec<String>>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub length_penalty: Option<f64>,
    /// `reference` or `bridge:ADDRESS` (host:port, tcp://host:port, stdio:COMMAND).
    #[arg(long)]
    pub backend: Option<String>,
    /// File holding the prompt template; must contain {article} once.
    #[arg(long)]
    pub template_file: Option<PathBuf>,
    /// Prompt length limit in tokens.
    #[arg(long)]
    pub context_budget: Option<usize>,
    /// Request full-vocabulary logits from an external backend.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub dense: Option<bool>,
    #[arg(long)]
    pub ngram_order: Option<usize>,
    #[arg(long)]
    pub ngram_delta: Option<f64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stem words longer than three characters before scoring.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(default)]
    pub stem: Option<bool>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

impl Settings {
    /// Fills every unset field from `lower`.
    pub fn or(self, lower: Settings) -> Settings {
        Settings {
            alpha: self.alpha.or(lower.alpha),
            beam_width: self.beam_width.or(lower.beam_width),
            variant: self.variant.or(lower.variant),
            no_promotion: self.no_promotion.or(lower.no_promotion),
            stop_strings: self.stop_strings.or(lower.stop_strings),
            max_new_tokens: self.max_new_tokens.or(lower.max_new_tokens),
            length_penalty: self.length_penalty.or(lower.length_penalty),
            backend: self.backend.or(lower.backend),
            template_file: self.template_file.or(lower.template_file),
            context_budget: self.context_budget.or(lower.context_budget),
            dense: self.dense.or(lower.dense),
            ngram_order: self.ngram_order.or(lower.ngram_order),
            ngram_delta: self.ngram_delta.or(lower.ngram_delta),
            jobs: self.jobs.or(lower.jobs),
            seed: self.seed.or(lower.seed),
            stem: self.stem.or(lower.stem),
        }
    }

    pub fn from_file(path: &Path) -> Result<Settings, ConfigError> {
        let file_err = |message: String| ConfigError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| file_err(e.to_string()))
    }

    /// Reads `BLOOP_<FIELD>` variables through `get`.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Settings, ConfigError> {
        fn parse<T: std::str::FromStr>(get: &dyn Fn(&str) -> Option<String>, key: &str) -> Result<Option<T>, ConfigError> {
            match get(key) {
                None => Ok(None),
                Some(v) => v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| ConfigError::Invalid(format!("{key}={v:?} is not valid"))),
            }
        }
        let get: &dyn Fn(&str) -> Option<String> = &get;
        let variant = match get("BLOOP_VARIANT") {
            None => None,
            Some(v) => Some(
                VariantArg::from_str(v.trim(), true).map_err(|_| ConfigError::Invalid(format!("BLOOP_VARIANT={v:?} is not valid")))?,
            ),
        };
        Ok(Settings {
            alpha: parse(get, "BLOOP_ALPHA")?,
            beam_width: parse(get, "BLOOP_BEAM_WIDTH")?,
            variant,
            no_promotion: parse(get, "BLOOP_NO_PROMOTION")?,
            stop_strings: get("BLOOP_STOP_STRING").map(|s| vec![s]),
            max_new_tokens: parse(get, "BLOOP_MAX_NEW_TOKENS")?,
            length_penalty: parse(get, "BLOOP_LENGTH_PENALTY")?,
            backend: get("BLOOP_BACKEND"),
            template_file: get("BLOOP_TEMPLATE_FILE").map(PathBuf::from),
            context_budget: parse(get, "BLOOP_CONTEXT_BUDGET")?,
            dense: parse(get, "BLOOP_DENSE")?,
            ngram_order: parse(get, "BLOOP_NGRAM_ORDER")?,
            ngram_delta: parse(get, "BLOOP_NGRAM_DELTA")?,
            jobs: parse(get, "BLOOP_JOBS")?,
            seed: parse(get, "BLOOP_SEED")?,
            stem: parse(get, "BLOOP_STEM")?,
        })
    }

    pub fn generation(&self) -> Result<GenerationConfig, ConfigError> {
        let d = GenerationConfig::default();
        let gen = GenerationConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            variant: self.variant.map_or(d.variant, Variant::from),
            promote: !self.no_promotion.unwrap_or(false),
            beam_width: self.beam_width.unwrap_or(d.beam_width),
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            stop_strings: match &self.stop_strings {
                Some(s) => s.iter().map(|x| unescape(x)).collect(),
                None => d.stop_strings,
            },
            length_penalty: self.length_penalty.unwrap_or(d.length_penalty),
            jobs: self.jobs.unwrap_or(d.jobs),
        };
        if !gen.alpha.is_finite() {
            return Err(ConfigError::Invalid("alpha must be finite".into()));
        }
        if gen.beam_width == 0 || gen.max_new_tokens == 0 || gen.jobs == 0 {
            return Err(ConfigError::Invalid(
                "beam width, max new tokens and jobs must be positive".into(),
            ));
        }
        if gen.stop_strings.iter().any(String::is_empty) {
            return Err(ConfigError::Invalid("stop strings must be non-empty".into()));
        }
        Ok(gen)
    }

    pub fn engine(&self) -> Result<EngineConfig, ConfigError> {
        let d = EngineConfig::default();
        let backend = match &self.backend {
            Some(b) => b.parse::<BackendSpec>().map_err(ConfigError::Invalid)?,
            None => d.backend,
        };
        let prompt_template = match &self.template_file {
            Some(p) => read_text(p).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => d.prompt_template,
        };
        let cfg = EngineConfig {
            backend,
            ngram_order: self.ngram_order.unwrap_or(d.ngram_order),
            ngram_delta: self.ngram_delta.unwrap_or(d.ngram_delta),
            prompt_template,
            context_budget: self.context_budget.or(d.context_budget),
            bridge: BridgeOptions {
                dense: self.dense.unwrap_or(false),
                ..d.bridge
            },
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_file_env() {
        let flags = Settings {
            alpha: Some(1.0),
            ..Settings::default()
        };
        let file: Settings = toml::from_str("alpha = 2.0\nbeam_width = 5\n").unwrap();
        let env = Settings::from_env(|k| match k {
            "BLOOP_ALPHA" => Some("3".into()),
            "BLOOP_BEAM_WIDTH" => Some("7".into()),
            "BLOOP_JOBS" => Some("2".into()),
            _ => None,
        })
        .unwrap();
        let s = flags.or(file).or(env);
        assert_eq!((s.alpha, s.beam_width, s.jobs), (Some(1.0), Some(5), Some(2)));
        let gen = s.generation().unwrap();
        assert_eq!(gen.max_new_tokens, GenerationConfig::default().max_new_tokens);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Settings::from_env(|k| (k == "BLOOP_ALPHA").then(|| "lots".into())).is_err());
        assert!(Settings::from_env(|k| (k == "BLOOP_VARIANT").then(|| "weird".into())).is_err());
        assert!(toml::from_str::<Settings>("colour = 1").is_err());
        let zero = Settings {
            beam_width: Some(0),
            ..Settings::default()
        };
        assert!(zero.generation().is_err());
    }

    #[test]
    fn stop_string_escapes() {
        assert_eq!(unescape(".\\n"), ".\n");
        assert_eq!(unescape("a\\\\b\\q"), "a\\b\\q");
    }
}
