//! Client side of the external-model protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use super::protocol::{read_frame, write_frame, Float, Frame};
use super::{check_context, ModelError, ScoreRequest, Scores, TokenScorer};
use crate::text::TokenId;
use crate::transform::LogitVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BridgeOptions {
    /// Request full-vocabulary logits instead of sparse responses.
    pub dense: bool,
    /// Lower bound on the `top_k` sent with sparse requests.
    pub min_top_k: usize,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            dense: false,
            min_top_k: 64,
        }
    }
}

/// Contents of the peer's `hello` frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerInfo {
    pub vocab_size: usize,
    pub context_limit: Option<usize>,
    pub newline_token_ids: Vec<TokenId>,
    pub surface_forms: Option<Vec<String>>,
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Connection {
    fn round_trip(&mut self, request: &Frame) -> Result<Frame, ModelError> {
        write_frame(&mut self.writer, request)?;
        match read_frame(&mut self.reader)? {
            Some(Frame::Error { message }) => Err(ModelError::Backend(message)),
            Some(frame) => Ok(frame),
            None => Err(ModelError::Protocol("peer closed the connection".into())),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A [`TokenScorer`] backed by a remote model. Requests on one client are
/// serialized; open several clients for parallel sessions.
pub struct BridgeClient {
    conn: Mutex<Connection>,
    info: PeerInfo,
    options: BridgeOptions,
}

impl std::fmt::Debug for BridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeClient")
            .field("info", &self.info)
            .field("options", &self.options)
            .finish()
    }
}

impl BridgeClient {
    /// Connects to `host:port` (optionally prefixed `tcp://`), or spawns
    /// `stdio:<command> [args...]` and talks over its stdin/stdout.
    pub fn connect(address: &str, options: BridgeOptions) -> Result<Self, ModelError> {
        if let Some(cmdline) = address.strip_prefix("stdio:") {
            let mut parts = cmdline.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| ModelError::Protocol("empty stdio command".into()))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            return Self::handshake(
                Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                },
                options,
            );
        }
        let addr = address.strip_prefix("tcp://").unwrap_or(address);
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Self::handshake(
            Connection {
                reader: Box::new(reader),
                writer: Box::new(stream),
                child: None,
            },
            options,
        )
    }

    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        options: BridgeOptions,
    ) -> Result<Self, ModelError> {
        Self::handshake(
            Connection {
                reader: Box::new(reader),
                writer: Box::new(writer),
                child: None,
            },
            options,
        )
    }

    fn handshake(mut conn: Connection, options: BridgeOptions) -> Result<Self, ModelError> {
        let info = match read_frame(&mut conn.reader)? {
            Some(Frame::Hello {
                vocab_size,
                context_limit,
                newline_token_ids,
                surface_forms,
            }) => PeerInfo {
                vocab_size,
                context_limit,
                newline_token_ids,
                surface_forms,
            },
            Some(other) => {
                return Err(ModelError::Protocol(format!(
                    "expected hello, got {other:?}"
                )))
            }
            None => return Err(ModelError::Protocol("peer closed before hello".into())),
        };
        if info.vocab_size == 0 {
            return Err(ModelError::Protocol(
                "peer reported an empty vocabulary".into(),
            ));
        }
        if let Some(forms) = &info.surface_forms {
            if forms.len() != info.vocab_size {
                return Err(ModelError::Protocol(format!(
                    "surface table has {} entries for vocab_size {}",
                    forms.len(),
                    info.vocab_size
                )));
            }
        }
        if let Some(bad) = info
            .newline_token_ids
            .iter()
            .find(|&&id| id as usize >= info.vocab_size)
        {
            return Err(ModelError::Protocol(format!(
                "newline id {bad} out of range"
            )));
        }
        Ok(Self {
            conn: Mutex::new(conn),
            info,
            options,
        })
    }

    pub fn info(&self) -> &PeerInfo {
        &self.info
    }

    /// Tokenizes `text` on the peer. With `chat` the peer wraps the text as a
    /// user message in its chat template and appends the generation prompt.
    pub fn encode(&self, session: u64, text: &str, chat: bool) -> Result<Vec<TokenId>, ModelError> {
        let reply = self
            .conn
            .lock()
            .expect("bridge lock")
            .round_trip(&Frame::Encode {
                session,
                text: text.to_owned(),
                chat,
            })?;
        match reply {
            Frame::Encoded { session: s, ids } if s == session => {
                if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.info.vocab_size) {
                    return Err(ModelError::Protocol(format!(
                        "encoded id {bad} out of range"
                    )));
                }
                Ok(ids)
            }
            other => Err(ModelError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

impl TokenScorer for BridgeClient {
    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }

    fn context_limit(&self) -> Option<usize> {
        self.info.context_limit
    }

    fn concurrency_safe(&self) -> bool {
        false
    }

    fn score(&self, request: &ScoreRequest<'_>) -> Result<Scores, ModelError> {
        check_context(self, request.context)?;
        let frame = Frame::Score {
            session: request.session,
            context: request.context.to_vec(),
            top_k: request.top_k.max(self.options.min_top_k),
            must_score: request.must_score.to_vec(),
            dense: self.options.dense,
        };
        let reply = self.conn.lock().expect("bridge lock").round_trip(&frame)?;
        match reply {
            Frame::LogitsDense { session, scores } => {
                if session.is_some_and(|s| s != request.session) {
                    return Err(ModelError::Protocol(format!(
                        "reply for session {session:?}, expected {}",
                        request.session
                    )));
                }
                if scores.len() != self.info.vocab_size {
                    return Err(ModelError::SizeMismatch {
                        got: scores.len(),
                        expected: self.info.vocab_size,
                    });
                }
                Ok(Scores::Dense(LogitVector::new(
                    scores.into_iter().map(|Float(x)| x).collect(),
                )))
            }
            Frame::Logits {
                session,
                entries,
                floor,
            } => {
                if session != request.session {
                    return Err(ModelError::Protocol(format!(
                        "reply for session {session}, expected {}",
                        request.session
                    )));
                }
                if let Some(missing) = request
                    .must_score
                    .iter()
                    .find(|id| !entries.iter().any(|e| e.0 == **id))
                {
                    return Err(ModelError::Protocol(format!(
                        "sparse reply is missing must_score id {missing}"
                    )));
                }
                Ok(Scores::Sparse {
                    entries: entries.into_iter().map(|(id, Float(x))| (id, x)).collect(),
                    floor: floor.0,
                })
            }
            other => Err(ModelError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}
