//! The full/pruned prompt pair record and its JSON Lines encoding.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::RetentionMask;
use crate::text::{tokenize, TokenId, TokenSeq, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Full,
    FewerShot,
    TaIntermediate,
    TaFinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    pub stage: Stage,
    pub score: Option<f64>,
    pub source: String,
}

/// One training record: the full prompt's tokens and the retention mask over them.
///
/// Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub id: String,
    pub text: String,
    pub tokenizer: String,
    pub tokens: Vec<TokenId>,
    pub mask: RetentionMask,
    pub meta: PairMeta,
}

impl PromptPair {
    pub fn new(id: String, seq: &TokenSeq, tokenizer: &str, mask: RetentionMask, meta: PairMeta) -> Result<Self> {
        if mask.len() != seq.len() {
            return Err(Error::shape(seq.len(), mask.len()));
        }
        Ok(Self {
            id,
            text: seq.source_text().to_string(),
            tokenizer: tokenizer.to_string(),
            tokens: seq.tokens().to_vec(),
            mask,
            meta,
        })
    }

    /// Re-tokenizes `text` and checks it reproduces the stored ids.
    pub fn token_seq(&self, tok: &dyn Tokenizer) -> Result<TokenSeq> {
        if tok.name() != self.tokenizer {
            return Err(Error::InvalidInput(format!(
                "record {} was tokenized with {:?}, not {:?}",
                self.id,
                self.tokenizer,
                tok.name()
            )));
        }
        let seq = tokenize(&self.text, tok)?;
        if seq.tokens() != self.tokens.as_slice() {
            return Err(Error::InvalidInput(format!("record {} tokens do not match its text", self.id)));
        }
        Ok(seq)
    }

    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let pair: PromptPair = serde_json::from_str(line)?;
        if pair.mask.len() != pair.tokens.len() {
            return Err(Error::shape(pair.tokens.len(), pair.mask.len()));
        }
        Ok(pair)
    }
}

/// Writes records one per line, LF-terminated.
pub fn write_jsonl<'a>(path: &Path, pairs: impl IntoIterator<Item = &'a PromptPair>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        w.write_all(p.to_line()?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PromptPair>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(PromptPair::from_line(&line)?);
    }
    Ok(out)
}
