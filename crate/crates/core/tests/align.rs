use maskpress_core::{align_mask, tokenize, ByteTokenizer, Error, RetentionMask, TokenSeq, WordTokenizer, DEFAULT_OVERLAP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALPHABET: &[&str] = &["a", "b", "Z", "7", "42", " ", "  ", "\n", ",", ".", "$", "é", "日本", "_x"];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..40);
    (0..n).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> RetentionMask {
    RetentionMask::new((0..n).map(|_| rng.gen_bool(0.6)).collect()).unwrap()
}

/// Per-byte retention implied by a token mask.
fn kept_bytes(seq: &TokenSeq, m: &RetentionMask) -> Vec<bool> {
    let mut out = vec![false; seq.source_text().len()];
    for (i, span) in seq.spans().iter().enumerate() {
        for b in span.clone() {
            out[b] = m.get(i);
        }
    }
    out
}

/// The overlap rule evaluated byte by byte.
fn oracle(dst: &TokenSeq, src_bytes: &[bool], theta: f64) -> Vec<bool> {
    dst.spans()
        .iter()
        .map(|s| {
            let covered = s.clone().filter(|&b| src_bytes[b]).count();
            covered as f64 >= theta * s.len() as f64
        })
        .collect()
}

#[test]
fn word_to_byte_and_back_match_character_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let word = WordTokenizer::default();
    for _ in 0..500 {
        let text = random_text(&mut rng);
        let a = tokenize(&text, &word).unwrap();
        let b = tokenize(&text, &ByteTokenizer).unwrap();
        let ma = random_mask(&mut rng, a.len());
        let mb = align_mask(&a, &ma, &b, DEFAULT_OVERLAP).unwrap();
        // Single-byte destination tokens inherit retention exactly.
        assert_eq!(kept_bytes(&b, &mb), kept_bytes(&a, &ma));
        assert_eq!(mb.bits(), oracle(&b, &kept_bytes(&a, &ma), DEFAULT_OVERLAP));

        let mb2 = random_mask(&mut rng, b.len());
        let ma2 = align_mask(&b, &mb2, &a, DEFAULT_OVERLAP).unwrap();
        assert_eq!(ma2.bits(), oracle(&a, &kept_bytes(&b, &mb2), DEFAULT_OVERLAP));
    }
}

#[test]
fn round_trip_loses_only_minority_slivers() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let word = WordTokenizer::default();
    for _ in 0..500 {
        let text = random_text(&mut rng);
        let a = tokenize(&text, &word).unwrap();
        let b = tokenize(&text, &ByteTokenizer).unwrap();
        let mb = random_mask(&mut rng, b.len());
        let ma = align_mask(&b, &mb, &a, DEFAULT_OVERLAP).unwrap();
        let back = align_mask(&a, &ma, &b, DEFAULT_OVERLAP).unwrap();
        let before = kept_bytes(&b, &mb);
        let after = kept_bytes(&b, &back);
        for (i, span) in a.spans().iter().enumerate() {
            let kept_in_span = span.clone().filter(|&x| before[x]).count();
            let lost = span.clone().any(|x| before[x] && !after[x]);
            if lost {
                assert!(!ma.get(i));
                assert!((kept_in_span as f64) < DEFAULT_OVERLAP * span.len() as f64);
            }
        }
    }
}

#[test]
fn identical_tokenization_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let text = random_text(&mut rng);
        let a = tokenize(&text, &WordTokenizer::default()).unwrap();
        let m = random_mask(&mut rng, a.len());
        let once = align_mask(&a, &m, &a, DEFAULT_OVERLAP).unwrap();
        assert_eq!(once, m);
        assert_eq!(align_mask(&a, &once, &a, DEFAULT_OVERLAP).unwrap(), once);
    }
}

#[test]
fn mismatched_inputs_rejected() {
    let a = tokenize("abc", &ByteTokenizer).unwrap();
    let b = tokenize("abd", &ByteTokenizer).unwrap();
    assert!(matches!(align_mask(&a, &RetentionMask::ones(3), &b, 0.5), Err(Error::Alignment(_))));
    assert!(matches!(align_mask(&a, &RetentionMask::ones(2), &a, 0.5), Err(Error::Shape { .. })));
    assert!(matches!(align_mask(&a, &RetentionMask::ones(3), &a, 1.5), Err(Error::Config(_))));
}
