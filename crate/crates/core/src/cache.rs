//! Intra-sentence bigram cache.
//!
//! Maps every token of a source document to the deduplicated, ascending list
//! of tokens that immediately follow it inside some sentence, together with
//! the number of times each pair occurs. Pairs never span a sentence break.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{Document, TokenId};

const BINARY_MAGIC: &[u8; 4] = b"BLPC";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("bad cache file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Followers of one token: ascending ids with their pair counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Followers {
    ids: Vec<TokenId>,
    counts: Vec<u32>,
}

impl Followers {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, u32)> + '_ {
        self.ids.iter().copied().zip(self.counts.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Hit/miss counters for one decode session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupStats {
    pub hits: u64,
    pub misses: u64,
}

impl LookupStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }

    /// `None` when no lookup has been made.
    pub fn hit_rate(&self) -> Option<f64> {
        match self.lookups() {
            0 => None,
            n => Some(self.hits as f64 / n as f64),
        }
    }
}

static EMPTY: Followers = Followers {
    ids: Vec::new(),
    counts: Vec::new(),
};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BigramCache {
    followers: HashMap<TokenId, Followers>,
    pair_counts: HashMap<(TokenId, TokenId), u32>,
    source_doc_id: String,
}

impl BigramCache {
    pub fn build(doc: &Document) -> Self {
        Self::build_with_id(doc, "")
    }

    pub fn build_with_id(doc: &Document, source_doc_id: &str) -> Self {
        let mut pair_counts: HashMap<(TokenId, TokenId), u32> = HashMap::new();
        for sentence in &doc.sentences {
            for pair in sentence.windows(2) {
                *pair_counts.entry((pair[0], pair[1])).or_insert(0) += 1;
            }
        }
        Self::from_pair_counts(pair_counts, source_doc_id.to_owned())
    }

    fn from_pair_counts(
        pair_counts: HashMap<(TokenId, TokenId), u32>,
        source_doc_id: String,
    ) -> Self {
        let mut grouped: HashMap<TokenId, Vec<(TokenId, u32)>> = HashMap::new();
        for (&(a, b), &c) in &pair_counts {
            grouped.entry(a).or_default().push((b, c));
        }
        let followers = grouped
            .into_iter()
            .map(|(a, mut list)| {
                list.sort_unstable();
                let (ids, counts) = list.into_iter().unzip();
                (a, Followers { ids, counts })
            })
            .collect();
        Self {
            followers,
            pair_counts,
            source_doc_id,
        }
    }

    pub fn source_doc_id(&self) -> &str {
        &self.source_doc_id
    }

    /// Follower set of `prev`; empty for ids absent from the source.
    pub fn followers(&self, prev: TokenId) -> &Followers {
        self.followers.get(&prev).unwrap_or(&EMPTY)
    }

    /// Like [`followers`](Self::followers) but records a hit or a miss.
    pub fn lookup(&self, prev: TokenId, stats: &mut LookupStats) -> &Followers {
        let found = self.followers(prev);
        if found.is_empty() {
            stats.misses += 1;
        } else {
            stats.hits += 1;
        }
        found
    }

    pub fn contains(&self, prev: TokenId, next: TokenId) -> bool {
        self.pair_counts.contains_key(&(prev, next))
    }

    /// Occurrences of the pair in the source; 0 when absent.
    pub fn count(&self, prev: TokenId, next: TokenId) -> u32 {
        self.pair_counts.get(&(prev, next)).copied().unwrap_or(0)
    }

    /// Number of distinct bigrams.
    pub fn len(&self) -> usize {
        self.pair_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_counts.is_empty()
    }

    /// All `(prev, next, count)` triples in lexicographic order.
    pub fn triples(&self) -> Vec<(TokenId, TokenId, u32)> {
        let mut out: Vec<_> = self
            .pair_counts
            .iter()
            .map(|(&(a, b), &c)| (a, b, c))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn from_triples(
        triples: impl IntoIterator<Item = (TokenId, TokenId, u32)>,
        source_doc_id: &str,
    ) -> Result<Self, CacheError> {
        let mut pair_counts = HashMap::new();
        for (a, b, c) in triples {
            if c == 0 {
                return Err(CacheError::Format(format!(
                    "zero count for pair ({a}, {b})"
                )));
            }
            if pair_counts.insert((a, b), c).is_some() {
                return Err(CacheError::Format(format!("duplicate pair ({a}, {b})")));
            }
        }
        Ok(Self::from_pair_counts(
            pair_counts,
            source_doc_id.to_owned(),
        ))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&CacheFile {
            source_doc_id: self.source_doc_id.clone(),
            entries: self.triples(),
        })
        .expect("cache serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, CacheError> {
        let file: CacheFile = serde_json::from_str(text)?;
        Self::from_triples(file.entries, &file.source_doc_id)
    }

    /// Little-endian binary layout: magic `BLPC`, u32 version, u32 id length
    /// and UTF-8 id, u64 triple count, then `(u32, u32, u32)` triples in
    /// lexicographic order.
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        let triples = self.triples();
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        out.write_all(&(self.source_doc_id.len() as u32).to_le_bytes())?;
        out.write_all(self.source_doc_id.as_bytes())?;
        out.write_all(&(triples.len() as u64).to_le_bytes())?;
        for (a, b, c) in triples {
            out.write_all(&a.to_le_bytes())?;
            out.write_all(&b.to_le_bytes())?;
            out.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, CacheError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(CacheError::Format("missing BLPC magic".into()));
        }
        let version = read_u32(&mut input)?;
        if version != BINARY_VERSION {
            return Err(CacheError::Format(format!("unsupported version {version}")));
        }
        let id_len = read_u32(&mut input)? as usize;
        let mut id = vec![0u8; id_len];
        input.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| CacheError::Format(e.to_string()))?;
        let mut n = [0u8; 8];
        input.read_exact(&mut n)?;
        let n = u64::from_le_bytes(n);
        let mut triples = Vec::new();
        for _ in 0..n {
            triples.push((
                read_u32(&mut input)?,
                read_u32(&mut input)?,
                read_u32(&mut input)?,
            ));
        }
        Self::from_triples(triples, &id)
    }
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    source_doc_id: String,
    entries: Vec<(TokenId, TokenId, u32)>,
}
