//! Tokenizers and the span-carrying token sequence.

use std::borrow::Cow;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lexicon::{self, Lexicon};

pub type TokenId = u32;

/// A lossless tokenizer: every byte of the input is covered by exactly one span.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    /// Number of ids, including the reserved mask id.
    fn vocab_size(&self) -> u32;

    /// Reserved id for the MASK symbol. Never produced by [`Tokenizer::encode`].
    fn mask_id(&self) -> TokenId;

    /// Splits `text` into `(id, byte span)` pairs that partition it.
    fn encode(&self, text: &str) -> Vec<(TokenId, Range<usize>)>;
}

/// Whitespace-and-punctuation splitter.
///
/// Runs of whitespace form one token, runs of alphanumerics (plus `_`) form one
/// token, and any other character is a token of its own. Words from the built-in
/// lexicon get dense ids; anything else is hashed into the remaining id range.
#[derive(Debug, Clone)]
pub struct WordTokenizer {
    vocab_size: u32,
    lexicon: &'static Lexicon,
}

pub const WORD_TOKENIZER: &str = "word";
pub const BYTE_TOKENIZER: &str = "byte";
pub const DEFAULT_WORD_VOCAB: u32 = 512;

impl WordTokenizer {
    pub fn new(vocab_size: u32) -> Result<Self> {
        let lexicon = lexicon::builtin();
        // Known words, at least one hash bucket, and the mask id.
        if (vocab_size as usize) < lexicon.len() + 2 {
            return Err(Error::Config(format!(
                "word tokenizer needs vocab_size >= {}, got {vocab_size}",
                lexicon.len() + 2
            )));
        }
        Ok(Self { vocab_size, lexicon })
    }

    fn id_of(&self, piece: &str) -> TokenId {
        if let Some(id) = self.lexicon.id(piece) {
            return id;
        }
        let known = self.lexicon.len() as u32;
        let buckets = self.vocab_size - 1 - known;
        known + (fnv1a(piece.as_bytes()) % buckets as u64) as u32
    }
}

impl Default for WordTokenizer {
    fn default() -> Self {
        Self::new(DEFAULT_WORD_VOCAB).expect("default vocab fits the lexicon")
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharKind {
    Space,
    Word,
    Single,
}

fn char_kind(c: char) -> CharKind {
    if c.is_whitespace() {
        CharKind::Space
    } else if c.is_alphanumeric() || c == '_' {
        CharKind::Word
    } else {
        CharKind::Single
    }
}

impl Tokenizer for WordTokenizer {
    fn name(&self) -> &str {
        WORD_TOKENIZER
    }

    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    fn mask_id(&self) -> TokenId {
        self.vocab_size - 1
    }

    fn encode(&self, text: &str) -> Vec<(TokenId, Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut current: Option<CharKind> = None;
        for (i, c) in text.char_indices() {
            let kind = char_kind(c);
            match current {
                Some(k) if k == kind && k != CharKind::Single => {}
                Some(_) => {
                    out.push((self.id_of(&text[start..i]), start..i));
                    start = i;
                }
                None => {}
            }
            current = Some(kind);
        }
        if current.is_some() {
            out.push((self.id_of(&text[start..]), start..text.len()));
        }
        out
    }
}

/// One token per byte; id == byte value, mask id 256.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn name(&self) -> &str {
        BYTE_TOKENIZER
    }

    fn vocab_size(&self) -> u32 {
        257
    }

    fn mask_id(&self) -> TokenId {
        256
    }

    fn encode(&self, text: &str) -> Vec<(TokenId, Range<usize>)> {
        text.bytes().enumerate().map(|(i, b)| (b as TokenId, i..i + 1)).collect()
    }
}

/// Looks up one of the built-in tokenizers by name.
pub fn tokenizer_by_name(name: &str) -> Result<Arc<dyn Tokenizer>> {
    match name {
        WORD_TOKENIZER => Ok(Arc::new(WordTokenizer::default())),
        BYTE_TOKENIZER => Ok(Arc::new(ByteTokenizer)),
        other => Err(Error::Config(format!("unknown tokenizer {other:?}"))),
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A tokenized text with the byte span of every token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<TokenId>,
    spans: Vec<Range<usize>>,
    source: String,
}

impl TokenSeq {
    /// Builds a sequence, checking that the spans partition `source` in order.
    pub fn from_parts(tokens: Vec<TokenId>, spans: Vec<Range<usize>>, source: String) -> Result<Self> {
        if tokens.len() != spans.len() {
            return Err(Error::shape(tokens.len(), spans.len()));
        }
        let mut cursor = 0;
        for s in &spans {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::InvalidInput(format!(
                    "spans must partition the text; span {s:?} at offset {cursor}"
                )));
            }
            cursor = s.end;
        }
        if cursor != source.len() {
            return Err(Error::InvalidInput(format!(
                "spans cover {cursor} of {} bytes",
                source.len()
            )));
        }
        Ok(Self { tokens, spans, source })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn source_text(&self) -> &str {
        &self.source
    }

    pub fn token_bytes(&self, i: usize) -> &[u8] {
        &self.source.as_bytes()[self.spans[i].clone()]
    }

    /// Text of token `i`; lossy only for byte tokens that split a character.
    pub fn token_text(&self, i: usize) -> Cow<'_, str> {
        String::from_utf8_lossy(self.token_bytes(i))
    }

    /// Byte range covered by tokens `range`.
    pub fn byte_range(&self, range: Range<usize>) -> Range<usize> {
        if range.is_empty() {
            let at = self.spans.get(range.start).map_or(self.source.len(), |s| s.start);
            return at..at;
        }
        self.spans[range.start].start..self.spans[range.end - 1].end
    }

    /// Same spans and text with new ids (used for MASK substitution).
    pub(crate) fn with_tokens(&self, tokens: Vec<TokenId>) -> Self {
        debug_assert_eq!(tokens.len(), self.tokens.len());
        Self { tokens, spans: self.spans.clone(), source: self.source.clone() }
    }
}

/// Tokenizes non-empty text.
pub fn tokenize(text: &str, tok: &dyn Tokenizer) -> Result<TokenSeq> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot tokenize empty text".into()));
    }
    let (tokens, spans): (Vec<_>, Vec<_>) = tok.encode(text).into_iter().unzip();
    TokenSeq::from_parts(tokens, spans, text.to_string())
}

/// Reassembles the text covered by the spans.
pub fn detokenize(seq: &TokenSeq) -> String {
    let bytes: Vec<u8> = (0..seq.len()).flat_map(|i| seq.token_bytes(i).iter().copied()).collect();
    String::from_utf8(bytes).expect("spans partition a valid string")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pieces(seq: &TokenSeq) -> Vec<String> {
        (0..seq.len()).map(|i| seq.token_text(i).into_owned()).collect()
    }

    #[test]
    fn word_tokenizer_splits_spaces() {
        let seq = tokenize("a b", &WordTokenizer::default()).unwrap();
        assert_eq!(pieces(&seq), ["a", " ", "b"]);
        assert_eq!(seq.spans(), &[0..1, 1..2, 2..3]);
    }

    #[test]
    fn word_tokenizer_punctuation_is_single() {
        let seq = tokenize("x,, yy\n\nz!", &WordTokenizer::default()).unwrap();
        assert_eq!(pieces(&seq), ["x", ",", ",", " ", "yy", "\n\n", "z", "!"]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(tokenize("", &ByteTokenizer), Err(Error::InvalidInput(_))));
        assert!(matches!(tokenize("", &WordTokenizer::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn random_ascii_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let word = WordTokenizer::default();
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let s: String = (0..n).map(|_| rng.gen_range(0x20u8..0x7f) as char).collect();
            for tok in [&word as &dyn Tokenizer, &ByteTokenizer] {
                let seq = tokenize(&s, tok).unwrap();
                assert_eq!(detokenize(&seq), s);
                assert_eq!(seq.tokens().len(), seq.spans().len());
            }
        }
    }

    #[test]
    fn mask_id_never_emitted() {
        let word = WordTokenizer::default();
        let text = "Fact : note that bubo unknownword 12345 ### ünïcödé";
        let seq = tokenize(text, &word).unwrap();
        assert!(seq.tokens().iter().all(|&t| t != word.mask_id() && t < word.vocab_size()));
        let seq = tokenize(text, &ByteTokenizer).unwrap();
        assert!(seq.tokens().iter().all(|&t| t < 256));
    }

    #[test]
    fn tokenize_is_pure() {
        let word = WordTokenizer::default();
        assert_eq!(tokenize("same input", &word).unwrap(), tokenize("same input", &word).unwrap());
    }

    #[test]
    fn too_small_vocab_rejected() {
        assert!(matches!(WordTokenizer::new(10), Err(Error::Config(_))));
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let err = TokenSeq::from_parts(vec![1, 2], vec![0..1, 2..3], "abc".into());
        assert!(err.is_err());
    }
}
