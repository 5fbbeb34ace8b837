//! Newline-delimited JSON frames exchanged with an external model process.
//!
//! Every frame is a single JSON object on one line, tagged by `"type"`.
//! Floats are written as decimals with 17 significant digits, which is
//! enough to round-trip any finite `f64` exactly.
//!
//! Besides the `hello`/`score`/`logits`/`logits_dense`/`error` frames, the
//! engine sends `encode` requests so the peer can tokenize text (optionally
//! wrapped in the model's chat template) into its native ids, and the
//! `hello` frame may carry the id-ordered `surface_forms` table.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use super::ModelError;
use crate::text::TokenId;

/// An `f64` serialized with 17 significant digits and compared bitwise.
#[derive(Clone, Copy)]
pub struct Float(pub f64);

impl PartialEq for Float {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl fmt::Debug for Float {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_float(self.0))
    }
}

/// Formats a finite float as `d.dddddddddddddddde±x` (17 significant digits).
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl Serialize for Float {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!(
                "cannot encode non-finite float {}",
                self.0
            )));
        }
        RawValue::from_string(format_float(self.0))
            .map_err(serde::ser::Error::custom)?
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Float {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        f64::deserialize(deserializer).map(Float)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Frame {
    Hello {
        vocab_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context_limit: Option<usize>,
        newline_token_ids: Vec<TokenId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        surface_forms: Option<Vec<String>>,
    },
    Score {
        session: u64,
        context: Vec<TokenId>,
        top_k: usize,
        must_score: Vec<TokenId>,
        dense: bool,
    },
    Logits {
        session: u64,
        entries: Vec<(TokenId, Float)>,
        floor: Float,
    },
    LogitsDense {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<u64>,
        scores: Vec<Float>,
    },
    Encode {
        session: u64,
        text: String,
        chat: bool,
    },
    Encoded {
        session: u64,
        ids: Vec<TokenId>,
    },
    Error {
        message: String,
    },
}

/// Serializes a frame as one line, without the trailing newline.
pub fn encode_frame(frame: &Frame) -> Result<String, ModelError> {
    serde_json::to_string(frame).map_err(|e| ModelError::Protocol(e.to_string()))
}

pub fn decode_frame(line: &str) -> Result<Frame, ModelError> {
    serde_json::from_str(line.trim_end_matches(['\n', '\r']))
        .map_err(|e| ModelError::Protocol(format!("{e} in frame {}", truncate(line, 120))))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub fn write_frame<W: Write>(out: &mut W, frame: &Frame) -> Result<(), ModelError> {
    let mut line = encode_frame(frame)?;
    line.push('\n');
    out.write_all(line.as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Reads the next frame; `Ok(None)` at end of stream.
pub fn read_frame<R: BufRead>(input: &mut R) -> Result<Option<Frame>, ModelError> {
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            return decode_frame(&line).map(Some);
        }
    }
}

/// What a serving peer needs to answer requests.
pub trait PeerModel {
    fn hello(&self) -> Frame;
    fn score(
        &self,
        session: u64,
        context: &[TokenId],
        top_k: usize,
        must_score: &[TokenId],
        dense: bool,
    ) -> Frame;
    fn encode(&self, session: u64, text: &str, chat: bool) -> Frame;
}

/// Serves frames until the input closes. Malformed or unexpected frames get
/// an `error` frame back and the connection stays open.
pub fn serve<R: BufRead, W: Write>(
    model: &dyn PeerModel,
    mut input: R,
    mut output: W,
) -> Result<(), ModelError> {
    write_frame(&mut output, &model.hello())?;
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let reply = match decode_frame(&line) {
            Ok(Frame::Score {
                session,
                context,
                top_k,
                must_score,
                dense,
            }) => model.score(session, &context, top_k, &must_score, dense),
            Ok(Frame::Encode {
                session,
                text,
                chat,
            }) => model.encode(session, &text, chat),
            Ok(other) => Frame::Error {
                message: format!("unexpected frame {other:?}"),
            },
            Err(e) => Frame::Error {
                message: e.to_string(),
            },
        };
        write_frame(&mut output, &reply)?;
    }
}

/// Test peer returning deterministic logits that depend on the token id, the
/// context length and the last context token. Text is "encoded" as one id
/// per byte modulo the vocabulary size.
#[derive(Debug, Clone)]
pub struct EchoModel {
    pub vocab_size: usize,
    pub context_limit: Option<usize>,
    pub newline_token_ids: Vec<TokenId>,
    pub surface_forms: Option<Vec<String>>,
}

impl EchoModel {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_limit: None,
            newline_token_ids: Vec::new(),
            surface_forms: None,
        }
    }

    pub fn logit(context: &[TokenId], id: TokenId) -> f64 {
        let last = context.last().copied().unwrap_or(0) as u64;
        let h = (id as u64)
            .wrapping_mul(2_654_435_761)
            .wrapping_add((context.len() as u64).wrapping_mul(40_503))
            .wrapping_add(last.wrapping_mul(97));
        -((h % 10_007) as f64) / 1_000.0 + 0.123_456_789
    }

    pub fn dense(&self, context: &[TokenId]) -> Vec<f64> {
        (0..self.vocab_size as TokenId)
            .map(|id| Self::logit(context, id))
            .collect()
    }
}

impl PeerModel for EchoModel {
    fn hello(&self) -> Frame {
        Frame::Hello {
            vocab_size: self.vocab_size,
            context_limit: self.context_limit,
            newline_token_ids: self.newline_token_ids.clone(),
            surface_forms: self.surface_forms.clone(),
        }
    }

    fn score(
        &self,
        session: u64,
        context: &[TokenId],
        top_k: usize,
        must_score: &[TokenId],
        dense: bool,
    ) -> Frame {
        if let Some(limit) = self.context_limit {
            if context.len() > limit {
                return Frame::Error {
                    message: format!("context of {} exceeds limit {limit}", context.len()),
                };
            }
        }
        if let Some(bad) = context
            .iter()
            .chain(must_score)
            .find(|&&id| id as usize >= self.vocab_size)
        {
            return Frame::Error {
                message: format!("token id {bad} out of range"),
            };
        }
        let scores = self.dense(context);
        if dense {
            return Frame::LogitsDense {
                session: Some(session),
                scores: scores.into_iter().map(Float).collect(),
            };
        }
        let mut order: Vec<TokenId> = (0..self.vocab_size as TokenId).collect();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .total_cmp(&scores[a as usize])
                .then(a.cmp(&b))
        });
        let mut ids: Vec<TokenId> = order.iter().take(top_k).copied().collect();
        ids.extend(must_score.iter().copied());
        ids.sort_unstable();
        ids.dedup();
        let floor = order.get(top_k).map_or(f64::MIN, |&id| scores[id as usize]);
        Frame::Logits {
            session,
            entries: ids
                .into_iter()
                .map(|id| (id, Float(scores[id as usize])))
                .collect(),
            floor: Float(floor),
        }
    }

    fn encode(&self, session: u64, text: &str, chat: bool) -> Frame {
        let mut ids: Vec<TokenId> = Vec::new();
        if chat {
            ids.push(0);
        }
        ids.extend(
            text.bytes()
                .map(|b| b as TokenId % self.vocab_size.max(1) as TokenId),
        );
        Frame::Encoded { session, ids }
    }
}
