//! Re-expressing a retention mask in another tokenization of the same text.

use crate::error::{Error, Result};
use crate::mask::RetentionMask;
use crate::text::TokenSeq;

/// Default minimum fraction of a destination token's bytes that must be
/// covered by retained source tokens for it to be retained.
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Maps `src_mask` (over `src`) onto the tokens of `dst`.
///
/// A destination token is retained iff at least `theta` of its bytes fall
/// inside retained source tokens. Both sequences must tokenize the same text.
pub fn align_mask(
    src: &TokenSeq,
    src_mask: &RetentionMask,
    dst: &TokenSeq,
    theta: f64,
) -> Result<RetentionMask> {
    if src.source_text() != dst.source_text() {
        return Err(Error::Alignment("source and destination texts differ".into()));
    }
    if src_mask.len() != src.len() {
        return Err(Error::shape(src.len(), src_mask.len()));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("overlap threshold {theta} outside [0, 1]")));
    }
    let src_spans = src.spans();
    let mut bits = Vec::with_capacity(dst.len());
    let mut j = 0;
    for span in dst.spans() {
        while j < src_spans.len() && src_spans[j].end <= span.start {
            j += 1;
        }
        let mut covered = 0usize;
        let mut k = j;
        while k < src_spans.len() && src_spans[k].start < span.end {
            if src_mask.get(k) {
                let lo = src_spans[k].start.max(span.start);
                let hi = src_spans[k].end.min(span.end);
                covered += hi - lo;
            }
            k += 1;
        }
        let len = span.end - span.start;
        bits.push(covered as f64 >= theta * len as f64);
    }
    RetentionMask::new(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, ByteTokenizer, TokenSeq, WordTokenizer};

    fn seq_from(pieces: &[&str]) -> TokenSeq {
        let text: String = pieces.concat();
        let mut spans = Vec::new();
        let mut at = 0;
        for p in pieces {
            spans.push(at..at + p.len());
            at += p.len();
        }
        TokenSeq::from_parts((0..pieces.len() as u32).collect(), spans, text).unwrap()
    }

    #[test]
    fn identical_tokenizations_are_identity() {
        let a = tokenize("one two, three", &WordTokenizer::default()).unwrap();
        let m = RetentionMask::from_bits(&[1, 0, 0, 1, 1, 0]).unwrap();
        assert_eq!(align_mask(&a, &m, &a, DEFAULT_OVERLAP).unwrap(), m);
    }

    #[test]
    fn full_retention_is_invariant() {
        let text = "prices rose 12345 points";
        let a = tokenize(text, &WordTokenizer::default()).unwrap();
        let b = tokenize(text, &ByteTokenizer).unwrap();
        let out = align_mask(&a, &RetentionMask::ones(a.len()), &b, DEFAULT_OVERLAP).unwrap();
        assert_eq!(out, RetentionMask::ones(b.len()));
    }

    #[test]
    fn split_number_keeps_both_halves() {
        let src = seq_from(&["12345"]);
        let dst = seq_from(&["123", "45"]);
        let out = align_mask(&src, &RetentionMask::ones(1), &dst, DEFAULT_OVERLAP).unwrap();
        assert_eq!(out.to_u8(), [1, 1]);
    }

    #[test]
    fn majority_overlap_decides() {
        // "abcd" as ["ab", "cd"]; keep only "ab". dst ["abc", "d"]: 2/3 kept, 0/1 kept.
        let src = seq_from(&["ab", "cd"]);
        let dst = seq_from(&["abc", "d"]);
        let m = RetentionMask::from_bits(&[1, 0]).unwrap();
        assert_eq!(align_mask(&src, &m, &dst, DEFAULT_OVERLAP).unwrap().to_u8(), [1, 0]);
        // ["a", "bcd"]: 1/1 kept, 1/3 kept.
        let dst = seq_from(&["a", "bcd"]);
        assert_eq!(align_mask(&src, &m, &dst, DEFAULT_OVERLAP).unwrap().to_u8(), [1, 0]);
    }

    #[test]
    fn differing_text_is_alignment_error() {
        let a = seq_from(&["ab"]);
        let b = seq_from(&["ac"]);
        let err = align_mask(&a, &RetentionMask::ones(1), &b, DEFAULT_OVERLAP).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }
}
