//! Word-level tokenization, sentence segmentation and vocabulary handling.
//!
//! Tokens are maximal runs of non-whitespace, non-punctuation characters,
//! plus single-character punctuation tokens drawn from [`PUNCTUATION`].
//! Any whitespace run containing a line break becomes a single `"\n"` token
//! which also closes the current sentence. A sentence additionally ends at
//! `.`, `!` or `?` when the next character is whitespace or end of input.
//!
//! The canonical surface form produced by [`detokenize`] joins tokens with a
//! single space, except that no space is written before a punctuation or
//! newline token, nor after a newline token. Tokenizing that canonical form
//! again yields the same id sequence.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

/// Identifier of a vocabulary entry. Ids are dense in `0..vocab.len()`.
pub type TokenId = u32;

/// Characters emitted as standalone single-character tokens.
pub const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '"', '\'', '(', ')'];

const SENTENCE_END: &[char] = &['.', '!', '?'];

/// Surface form used for line-break tokens.
pub const NEWLINE_TOKEN: &str = "\n";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("token {token:?} at byte offset {offset} is not in the vocabulary")]
    UnknownToken { token: String, offset: usize },
    #[error("token id {0} is out of range")]
    IdOutOfRange(TokenId),
    #[error("duplicate token {token:?} at vocabulary line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("invalid escape sequence at vocabulary line {line}")]
    BadEscape { line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How surface forms are glued back together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spacing {
    /// Canonical word-level spacing (see module docs).
    #[default]
    Canonical,
    /// Plain concatenation, for subword vocabularies whose surface forms
    /// already carry their own whitespace.
    Concatenate,
}

#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    newline_mask: Vec<bool>,
    unknown: Option<TokenId>,
    spacing: Spacing,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from an id-ordered table of surface forms, as
    /// reported by an external model. Duplicate surfaces are allowed here
    /// (subword vocabularies often have them); the index keeps the lowest id.
    pub fn from_surface_forms(forms: Vec<String>, spacing: Spacing) -> Self {
        let mut index = HashMap::with_capacity(forms.len());
        let mut newline_mask = Vec::with_capacity(forms.len());
        for (id, form) in forms.iter().enumerate() {
            index.entry(form.clone()).or_insert(id as TokenId);
            newline_mask.push(form.contains('\n'));
        }
        Self {
            tokens: forms,
            index,
            newline_mask,
            unknown: None,
            spacing,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Returns the id of `token`, appending it if absent.
    pub fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        self.newline_mask.push(token.contains('\n'));
        id
    }

    /// Designates (and interns) the token that frozen-mode tokenization maps
    /// unseen surface forms to.
    pub fn set_unknown(&mut self, token: &str) -> TokenId {
        let id = self.intern(token);
        self.unknown = Some(id);
        id
    }

    pub fn unknown(&self) -> Option<TokenId> {
        self.unknown
    }

    pub fn is_newline(&self, id: TokenId) -> bool {
        self.newline_mask.get(id as usize).copied().unwrap_or(false)
    }

    pub fn newline_mask(&self) -> &[bool] {
        &self.newline_mask
    }

    /// Ids whose surface form contains a line break, ascending.
    pub fn newline_ids(&self) -> Vec<TokenId> {
        self.newline_mask
            .iter()
            .enumerate()
            .filter(|(_, &nl)| nl)
            .map(|(id, _)| id as TokenId)
            .collect()
    }

    /// Writes one token per line; line number is the id. Backslashes and
    /// line breaks inside tokens are escaped as `\\`, `\n` and `\r`.
    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        for token in &self.tokens {
            let mut line = String::with_capacity(token.len());
            for c in token.chars() {
                match c {
                    '\\' => line.push_str("\\\\"),
                    '\n' => line.push_str("\\n"),
                    '\r' => line.push_str("\\r"),
                    c => line.push(c),
                }
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, TextError> {
        let mut vocab = Vocabulary::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let token = unescape(&line).ok_or(TextError::BadEscape { line: lineno + 1 })?;
            if vocab.index.contains_key(&token) {
                return Err(TextError::DuplicateToken {
                    token,
                    line: lineno + 1,
                });
            }
            vocab.intern(&token);
        }
        Ok(vocab)
    }
}

fn unescape(line: &str) -> Option<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

/// A sentence-segmented token-id sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Document {
    pub sentences: Vec<Vec<TokenId>>,
    pub raw: String,
}

impl Document {
    /// Wraps pre-segmented ids, dropping empty sentences.
    pub fn from_sentences(sentences: Vec<Vec<TokenId>>) -> Self {
        Self {
            sentences: sentences.into_iter().filter(|s| !s.is_empty()).collect(),
            raw: String::new(),
        }
    }

    pub fn flatten(&self) -> Vec<TokenId> {
        self.sentences.iter().flatten().copied().collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Concatenates several documents (e.g. a multi-source cluster) into one.
    pub fn concat<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Document {
        let mut out = Document::default();
        for doc in docs {
            if !out.raw.is_empty() && !doc.raw.is_empty() {
                out.raw.push('\n');
            }
            out.raw.push_str(&doc.raw);
            out.sentences.extend(doc.sentences.iter().cloned());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabMode {
    /// Unseen tokens are appended to the vocabulary.
    Build,
    /// Unseen tokens map to the unknown id or fail.
    Frozen,
}

#[derive(Debug, Clone, Copy)]
struct Piece<'a> {
    text: &'a str,
    offset: usize,
    ends_sentence: bool,
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some(&(start, c)) = iter.peek() {
        if c.is_whitespace() {
            let mut saw_newline = false;
            while let Some(&(_, c)) = iter.peek() {
                if !c.is_whitespace() {
                    break;
                }
                saw_newline |= c == '\n';
                iter.next();
            }
            if saw_newline {
                out.push(Piece {
                    text: NEWLINE_TOKEN,
                    offset: start,
                    ends_sentence: true,
                });
            }
        } else if PUNCTUATION.contains(&c) {
            iter.next();
            let next = iter.peek().map(|&(_, n)| n);
            let ends_sentence = SENTENCE_END.contains(&c) && next.map_or(true, char::is_whitespace);
            out.push(Piece {
                text: &text[start..start + c.len_utf8()],
                offset: start,
                ends_sentence,
            });
        } else {
            let mut end = start;
            while let Some(&(i, c)) = iter.peek() {
                if c.is_whitespace() || PUNCTUATION.contains(&c) {
                    break;
                }
                end = i + c.len_utf8();
                iter.next();
            }
            out.push(Piece {
                text: &text[start..end],
                offset: start,
                ends_sentence: false,
            });
        }
    }
    out
}

/// Splits `text` into sentences of token ids.
///
/// In [`VocabMode::Build`] unseen tokens are added to `vocab`; in
/// [`VocabMode::Frozen`] they map to the unknown id, or produce
/// [`TextError::UnknownToken`] when none is configured (in which case
/// `vocab` is left untouched).
pub fn tokenize(
    text: &str,
    mode: VocabMode,
    vocab: &mut Vocabulary,
) -> Result<Document, TextError> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for piece in pieces(text) {
        let id = match mode {
            VocabMode::Build => vocab.intern(piece.text),
            VocabMode::Frozen => match vocab.id(piece.text).or(vocab.unknown) {
                Some(id) => id,
                None => {
                    return Err(TextError::UnknownToken {
                        token: piece.text.to_owned(),
                        offset: piece.offset,
                    })
                }
            },
        };
        current.push(id);
        if piece.ends_sentence {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(Document {
        sentences,
        raw: text.to_owned(),
    })
}

fn is_glued_left(token: &str) -> bool {
    token == NEWLINE_TOKEN || (token.chars().count() == 1 && token.starts_with(PUNCTUATION))
}

/// Renders ids as text under the vocabulary's spacing rule.
pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> Result<String, TextError> {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for &id in ids {
        let token = vocab.token(id).ok_or(TextError::IdOutOfRange(id))?;
        if vocab.spacing == Spacing::Canonical {
            if let Some(p) = prev {
                if p != NEWLINE_TOKEN && !is_glued_left(token) {
                    out.push(' ');
                }
            }
        }
        out.push_str(token);
        prev = Some(token);
    }
    Ok(out)
}

impl fmt::Display for Document {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sentences, {} tokens",
            self.sentences.len(),
            self.num_tokens()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(doc: &Document, vocab: &Vocabulary) -> Vec<Vec<String>> {
        doc.sentences
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&id| vocab.token(id).unwrap().to_owned())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn good_example_builds_three_tokens() {
        let mut vocab = Vocabulary::new();
        let doc = tokenize("Good example.", VocabMode::Build, &mut vocab).unwrap();
        assert_eq!(doc.sentences.len(), 1);
        assert_eq!(words(&doc, &vocab), vec![vec!["Good", "example", "."]]);
        assert_eq!(vocab.len(), 3);
        assert_eq!(detokenize(&doc.flatten(), &vocab).unwrap(), "Good example.");
    }

    #[test]
    fn empty_text() {
        let mut vocab = Vocabulary::new();
        vocab.intern("x");
        let doc = tokenize("", VocabMode::Build, &mut vocab).unwrap();
        assert!(doc.is_empty());
        assert_eq!(vocab.len(), 1);
        assert_eq!(detokenize(&[], &vocab).unwrap(), "");
    }

    #[test]
    fn two_sentences_match_hand_fixture() {
        let mut vocab = Vocabulary::new();
        let doc = tokenize("A b. C d.", VocabMode::Build, &mut vocab).unwrap();
        // Hand-tokenized: A=0 b=1 .=2 C=3 d=4
        assert_eq!(doc.sentences, vec![vec![0, 1, 2], vec![3, 4, 2]]);
        assert_eq!(vocab.tokens(), &["A", "b", ".", "C", "d"]);
    }

    #[test]
    fn period_inside_number_does_not_split() {
        let mut vocab = Vocabulary::new();
        let doc = tokenize("It cost 3.5 dollars. Then", VocabMode::Build, &mut vocab).unwrap();
        assert_eq!(
            words(&doc, &vocab),
            vec![
                vec!["It", "cost", "3", ".", "5", "dollars", "."],
                vec!["Then"]
            ]
        );
    }

    #[test]
    fn newline_closes_sentence_and_collapses() {
        let mut vocab = Vocabulary::new();
        let doc = tokenize("one two\n\n  three.\nfour", VocabMode::Build, &mut vocab).unwrap();
        assert_eq!(
            words(&doc, &vocab),
            vec![
                vec!["one", "two", "\n"],
                vec!["three", "."],
                vec!["\n"],
                vec!["four"]
            ]
        );
        assert_eq!(vocab.newline_ids(), vec![vocab.id("\n").unwrap()]);
        assert_eq!(
            detokenize(&doc.flatten(), &vocab).unwrap(),
            "one two\nthree.\nfour"
        );
    }

    #[test]
    fn frozen_mode_unknown_token_reports_offset() {
        let mut vocab = Vocabulary::new();
        tokenize("a b", VocabMode::Build, &mut vocab).unwrap();
        let err = tokenize("a  zz", VocabMode::Frozen, &mut vocab).unwrap_err();
        match err {
            TextError::UnknownToken { token, offset } => {
                assert_eq!(token, "zz");
                assert_eq!(offset, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(vocab.len(), 2);
    }

    #[test]
    fn frozen_mode_uses_unknown_id() {
        let mut vocab = Vocabulary::new();
        tokenize("a b", VocabMode::Build, &mut vocab).unwrap();
        let unk = vocab.set_unknown("<unk>");
        let doc = tokenize("a zz", VocabMode::Frozen, &mut vocab).unwrap();
        assert_eq!(doc.flatten(), vec![0, unk]);
    }

    #[test]
    fn detokenize_rejects_out_of_range() {
        let vocab = Vocabulary::new();
        assert!(matches!(
            detokenize(&[7], &vocab),
            Err(TextError::IdOutOfRange(7))
        ));
    }

    #[test]
    fn punctuation_spacing() {
        let mut vocab = Vocabulary::new();
        let doc = tokenize("This dog's (certainly) fine!", VocabMode::Build, &mut vocab).unwrap();
        let text = detokenize(&doc.flatten(), &vocab).unwrap();
        assert_eq!(text, "This dog' s( certainly) fine!");
        let again = tokenize(&text, VocabMode::Frozen, &mut vocab).unwrap();
        assert_eq!(again.flatten(), doc.flatten());
    }

    #[test]
    fn vocabulary_file_round_trip_with_escapes() {
        let mut vocab = Vocabulary::new();
        for t in ["a", "\n", "back\\slash", "\r\n"] {
            vocab.intern(t);
        }
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 4);
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        assert_eq!(back.tokens(), vocab.tokens());
        assert_eq!(back.newline_mask(), &[false, true, false, true]);
    }

    #[test]
    fn concatenate_spacing_for_subword_forms() {
        let vocab = Vocabulary::from_surface_forms(
            vec!["Hello".into(), " world".into(), ".\n".into()],
            Spacing::Concatenate,
        );
        assert_eq!(detokenize(&[0, 1, 2], &vocab).unwrap(), "Hello world.\n");
        assert_eq!(vocab.newline_ids(), vec![2]);
    }
}
