//! Binary retention masks and their application to token sequences.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::text::{TokenId, TokenSeq};

/// Per-token keep (`true`) / remove (`false`) vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RetentionMask {
    bits: Vec<bool>,
}

impl RetentionMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidInput("mask length must be positive".into()));
        }
        Ok(Self { bits })
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let bits = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidInput(format!("mask entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn ones(len: usize) -> Self {
        assert!(len > 0, "mask length must be positive");
        Self { bits: vec![true; len] }
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "mask length must be positive");
        Self { bits: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        self.bits[i] = keep;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }

    pub fn retained_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn retained_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Fails if the mask would prune a prompt to nothing.
    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.retained_count() == 0 {
            return Err(Error::InvalidInput("a prompt cannot be pruned to emptiness".into()));
        }
        Ok(())
    }

    /// Position-wise AND.
    pub fn and(&self, other: &RetentionMask) -> Result<RetentionMask> {
        if self.len() != other.len() {
            return Err(Error::shape(self.len(), other.len()));
        }
        Ok(Self { bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect() })
    }
}

impl Serialize for RetentionMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_u8().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RetentionMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        RetentionMask::from_bits(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Drop removed tokens; the output is the pruned prompt.
    Delete,
    /// Replace removed tokens with the mask id; length is preserved.
    MaskSymbol(TokenId),
}

/// Applies `mask` to `seq`.
///
/// In delete mode the result is re-based onto the concatenated text of the
/// retained tokens. Deleting part of a multi-byte character is rejected.
pub fn apply_mask(seq: &TokenSeq, mask: &RetentionMask, mode: MaskMode) -> Result<TokenSeq> {
    if mask.len() != seq.len() {
        return Err(Error::shape(seq.len(), mask.len()));
    }
    match mode {
        MaskMode::MaskSymbol(mask_id) => {
            let tokens = seq
                .tokens()
                .iter()
                .zip(mask.bits())
                .map(|(&t, &keep)| if keep { t } else { mask_id })
                .collect();
            Ok(seq.with_tokens(tokens))
        }
        MaskMode::Delete => {
            let mut bytes = Vec::with_capacity(seq.source_text().len());
            let mut tokens = Vec::with_capacity(mask.retained_count());
            let mut spans = Vec::with_capacity(mask.retained_count());
            for i in mask.retained_indices() {
                let piece = seq.token_bytes(i);
                spans.push(bytes.len()..bytes.len() + piece.len());
                bytes.extend_from_slice(piece);
                tokens.push(seq.tokens()[i]);
            }
            let text = String::from_utf8(bytes).map_err(|_| {
                Error::InvalidInput("deletion splits a multi-byte character".into())
            })?;
            TokenSeq::from_parts(tokens, spans, text)
        }
    }
}
