//! Closed vocabularies with part-of-speech tags.
//!
//! File format: one token per line, `token index pos`, whitespace separated.
//! `index` must equal the zero-based line number. `pos` is `ADJ`, `NOUN` or
//! `OTHER` and may be omitted (treated as `OTHER`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "[CLS]";
pub const END_TOKEN: &str = "[END]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pos {
    Adjective,
    Noun,
    Other,
}

impl Pos {
    pub fn is_attribute(self) -> bool {
        matches!(self, Pos::Adjective | Pos::Noun)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pos::Adjective => "ADJ",
            Pos::Noun => "NOUN",
            Pos::Other => "OTHER",
        })
    }
}

impl FromStr for Pos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ADJ" => Ok(Pos::Adjective),
            "NOUN" => Ok(Pos::Noun),
            "OTHER" => Ok(Pos::Other),
            other => Err(Error::format("vocabulary", format!("unknown POS tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    pos: Vec<Pos>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; the start and end markers must be present.
    pub fn new(entries: Vec<(String, Pos)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, (t, _)) in entries.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        for marker in [START_TOKEN, END_TOKEN] {
            if !index.contains_key(marker) {
                return Err(Error::format("vocabulary", format!("missing marker {marker}")));
            }
        }
        let (tokens, pos) = entries.into_iter().unzip();
        Ok(Self { tokens, pos, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let mut cols = line.split_whitespace();
            let token = cols
                .next()
                .ok_or_else(|| Error::format("vocabulary", format!("empty line {line_no}")))?;
            if let Some(idx) = cols.next() {
                let idx: usize = idx
                    .parse()
                    .map_err(|_| Error::format("vocabulary", format!("bad index on line {line_no}")))?;
                if idx != line_no {
                    return Err(Error::format(
                        "vocabulary",
                        format!("index {idx} on line {line_no}; index must equal line number"),
                    ));
                }
            }
            let pos = cols.next().map(str::parse).transpose()?.unwrap_or(Pos::Other);
            entries.push((token.to_string(), pos));
        }
        Self::new(entries)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (i, (t, p)) in self.tokens.iter().zip(&self.pos).enumerate() {
            out.push_str(&format!("{t}\t{i}\t{p}\n"));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pos(&self, id: usize) -> Option<Pos> {
        self.pos.get(id).copied()
    }

    pub fn start_id(&self) -> usize {
        self.index[START_TOKEN]
    }

    pub fn end_id(&self) -> usize {
        self.index[END_TOKEN]
    }

    /// Whitespace tokenization wrapped in the start and end markers.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = vec![self.start_id()];
        for w in text.split_whitespace() {
            ids.push(
                self.id(w)
                    .ok_or_else(|| Error::invalid(format!("out-of-vocabulary word {w:?}")))?,
            );
        }
        ids.push(self.end_id());
        TokenSequence::new(ids, self)
    }

    /// Words between the markers, joined by spaces.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.content()
            .iter()
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids of one text, starting with the start marker and ending with the
/// end marker.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: &Vocabulary) -> Result<Self> {
        if ids.len() < 2 || ids[0] != vocab.start_id() || ids[ids.len() - 1] != vocab.end_id() {
            return Err(Error::invalid(format!(
                "token sequence {ids:?} must start with {START_TOKEN} and end with {END_TOKEN}"
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                vocab.len()
            )));
        }
        Ok(Self { ids })
    }

    /// No validation; the encoder still range-checks ids.
    pub fn from_ids_unchecked(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids between the markers.
    pub fn content(&self) -> &[usize] {
        &self.ids[1..self.ids.len().saturating_sub(1).max(1)]
    }
}
