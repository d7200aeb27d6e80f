//! Synthetic few-shot corpus with exactly known essential and redundant tokens.
//!
//! Each exemplar reads `Fact : note that <c1> .. <cn> .` with redundant words
//! inserted between body words and, for undermined exemplars, a trailing hedge
//! word. Exemplars are separated by a blank line and followed by `Answer :`.
//!
//! The deterministic answerer works on token text: an exemplar's query is
//! answered iff all of its content words are present; its hedged query
//! additionally requires its hedge word to be absent. Template words,
//! punctuation, whitespace and redundant words never affect any answer.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PerformanceFn, Score};
use crate::error::{Error, Result};
use crate::lexicon::{self, WordClass, CONNECTIVE_WORDS, FILLER_WORDS, HEDGE_WORDS};
use crate::mask::{apply_mask, MaskMode, RetentionMask};
use crate::shots::{segment_shots, ShotPrompt};
use crate::text::{TokenSeq, WordTokenizer};

pub const SHOT_DELIMITER: &str = "\n\n";
pub const QUERY_TEXT: &str = "Answer :";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancyKind {
    FillerPhrase,
    DuplicateClause,
    VerboseConnective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCorpusSpec {
    pub n_prompts: usize,
    /// Exemplars per prompt.
    pub n_exemplars: usize,
    pub essential_per_shot: usize,
    pub redundant_per_shot: usize,
    /// Probability that an exemplar carries a hedge word.
    pub spoiler_rate: f64,
    /// Always hedge the last exemplar of a prompt.
    pub spoil_final_shot: bool,
    /// Number of content pseudo-words to draw from.
    pub content_vocab: usize,
    pub seed: u64,
    pub redundancy_kinds: Vec<RedundancyKind>,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self {
            n_prompts: 20,
            n_exemplars: 8,
            essential_per_shot: 3,
            redundant_per_shot: 3,
            spoiler_rate: 0.3,
            spoil_final_shot: true,
            content_vocab: 256,
            seed: 0,
            redundancy_kinds: vec![
                RedundancyKind::FillerPhrase,
                RedundancyKind::DuplicateClause,
                RedundancyKind::VerboseConnective,
            ],
        }
    }
}

/// Token indices of essential and redundant words in a generated prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLabel {
    pub essential: BTreeSet<usize>,
    pub redundant: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthQuery {
    pub shot: usize,
    pub required: Vec<String>,
    pub spoilers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPrompt {
    pub id: String,
    pub prompt: ShotPrompt,
    pub labels: SynthLabel,
    pub queries: Vec<SynthQuery>,
}

/// Scores `prompt` against `queries` with the deterministic answerer.
pub fn synth_score(prompt: &TokenSeq, queries: &[SynthQuery]) -> Result<Score> {
    if queries.is_empty() {
        return Err(Error::Scoring("at least one query is required".into()));
    }
    let lex = lexicon::builtin();
    let mut present = HashSet::new();
    for i in 0..prompt.len() {
        let text = prompt.token_text(i);
        match lex.class_of(&text) {
            Some(WordClass::Space | WordClass::Punct) => {}
            Some(_) => {
                present.insert(text.into_owned());
            }
            None if text.trim().is_empty() => {}
            None => return Err(Error::Scoring(format!("unknown token {text:?} at position {i}"))),
        }
    }
    let detail = queries
        .iter()
        .map(|q| {
            q.required.iter().all(|w| present.contains(w))
                && !q.spoilers.iter().any(|w| present.contains(w))
        })
        .collect();
    Score::from_detail(detail)
}

/// [`synth_score`] bound to one prompt's queries.
#[derive(Debug, Clone)]
pub struct SynthOracle {
    pub queries: Vec<SynthQuery>,
}

impl PerformanceFn for SynthOracle {
    fn evaluate(&self, prompt: &TokenSeq) -> Result<Score> {
        synth_score(prompt, &self.queries)
    }
}

impl SynthPrompt {
    pub fn oracle(&self) -> SynthOracle {
        SynthOracle { queries: self.queries.clone() }
    }

    /// Score of the prompt with `mask` applied.
    pub fn score_masked(&self, mask: &RetentionMask) -> Result<Score> {
        let pruned = apply_mask(&self.prompt.base, mask, MaskMode::Delete)?;
        synth_score(&pruned, &self.queries)
    }
}

enum Role {
    Template,
    Essential,
    Redundant,
    Hedge,
}

fn validate(spec: &SynthCorpusSpec) -> Result<()> {
    let lex = lexicon::builtin();
    let pool = lex.words_of(WordClass::Content).count();
    if spec.essential_per_shot < 1 {
        return Err(Error::Config("essential_per_shot must be at least 1".into()));
    }
    if spec.n_exemplars < 1 || spec.n_prompts < 1 {
        return Err(Error::Config("need at least one prompt and one exemplar".into()));
    }
    if !(0.0..=1.0).contains(&spec.spoiler_rate) {
        return Err(Error::Config(format!("spoiler_rate {} outside [0, 1]", spec.spoiler_rate)));
    }
    if spec.content_vocab > pool {
        return Err(Error::Config(format!(
            "content_vocab {} exceeds the {pool}-word pool",
            spec.content_vocab
        )));
    }
    let needed = spec.n_exemplars * spec.essential_per_shot;
    if spec.content_vocab < needed {
        return Err(Error::Config(format!(
            "vocab too small: {} content words for {needed} distinct essential words per prompt",
            spec.content_vocab
        )));
    }
    if spec.redundant_per_shot > 0 && spec.redundancy_kinds.is_empty() {
        return Err(Error::Config("redundant_per_shot > 0 needs at least one redundancy kind".into()));
    }
    Ok(())
}

/// Generates the corpus. Same spec, same bytes.
pub fn generate_synth_corpus(spec: &SynthCorpusSpec) -> Result<Vec<SynthPrompt>> {
    validate(spec)?;
    let lex = lexicon::builtin();
    let pool: Vec<&str> = lex.words_of(WordClass::Content).take(spec.content_vocab).collect();
    let tok = WordTokenizer::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n_prompts.to_string().len().max(4);

    let mut out = Vec::with_capacity(spec.n_prompts);
    for p in 0..spec.n_prompts {
        let content: Vec<&str> =
            pool.choose_multiple(&mut rng, spec.n_exemplars * spec.essential_per_shot).copied().collect();
        let mut spoiled: Vec<usize> =
            (0..spec.n_exemplars).filter(|_| rng.gen_bool(spec.spoiler_rate)).collect();
        let last = spec.n_exemplars - 1;
        if spec.spoil_final_shot && !spoiled.contains(&last) {
            spoiled.push(last);
        }
        if spoiled.len() > HEDGE_WORDS.len() {
            // Keep the final exemplar hedged if requested; drop others at random.
            let keep_last = spec.spoil_final_shot;
            spoiled.retain(|&s| !(keep_last && s == last));
            spoiled.shuffle(&mut rng);
            spoiled.truncate(HEDGE_WORDS.len() - keep_last as usize);
            if keep_last {
                spoiled.push(last);
            }
            spoiled.sort_unstable();
        }
        let hedges: Vec<&str> = HEDGE_WORDS.choose_multiple(&mut rng, spoiled.len()).copied().collect();

        let mut words: Vec<(String, Role)> = Vec::new();
        let mut queries = Vec::new();
        let mut shot_starts = Vec::new();
        for s in 0..spec.n_exemplars {
            let essentials = &content[s * spec.essential_per_shot..(s + 1) * spec.essential_per_shot];
            let mut body: Vec<(String, Role)> = ["Fact", ":", "note", "that"]
                .iter()
                .map(|w| (w.to_string(), Role::Template))
                .chain(essentials.iter().map(|w| (w.to_string(), Role::Essential)))
                .collect();
            for _ in 0..spec.redundant_per_shot {
                let kind = *spec.redundancy_kinds.choose(&mut rng).expect("validated non-empty");
                let word = match kind {
                    RedundancyKind::FillerPhrase => *FILLER_WORDS.choose(&mut rng).unwrap(),
                    RedundancyKind::VerboseConnective => *CONNECTIVE_WORDS.choose(&mut rng).unwrap(),
                    RedundancyKind::DuplicateClause => *["note", "that"].choose(&mut rng).unwrap(),
                };
                let at = rng.gen_range(2..=body.len());
                body.insert(at, (word.to_string(), Role::Redundant));
            }
            body.push((".".to_string(), Role::Template));
            let required: Vec<String> = essentials.iter().map(|w| w.to_string()).collect();
            queries.push(SynthQuery { shot: s, required: required.clone(), spoilers: vec![] });
            if let Some(k) = spoiled.iter().position(|&x| x == s) {
                body.push((hedges[k].to_string(), Role::Hedge));
                queries.push(SynthQuery { shot: s, required, spoilers: vec![hedges[k].to_string()] });
            }
            shot_starts.push(words.len());
            words.extend(body);
        }

        // Render, remembering the byte offset of every word.
        let mut text = String::new();
        let mut offsets = Vec::with_capacity(words.len());
        let mut next_shot = 0;
        for (i, (w, _)) in words.iter().enumerate() {
            if next_shot < shot_starts.len() && shot_starts[next_shot] == i {
                if i > 0 {
                    text.push_str(SHOT_DELIMITER);
                }
                next_shot += 1;
            } else {
                text.push(' ');
            }
            offsets.push(text.len());
            text.push_str(w);
        }
        text.push_str(SHOT_DELIMITER);
        text.push_str(QUERY_TEXT);

        let prompt = segment_shots(&text, SHOT_DELIMITER, &tok)?;
        debug_assert_eq!(prompt.shot_count(), spec.n_exemplars);
        let spans = prompt.base.spans();
        let mut labels = SynthLabel::default();
        for ((_, role), off) in words.iter().zip(&offsets) {
            let idx = spans.partition_point(|s| s.start < *off);
            match role {
                Role::Essential => {
                    labels.essential.insert(idx);
                }
                Role::Redundant => {
                    labels.redundant.insert(idx);
                }
                Role::Template | Role::Hedge => {}
            }
        }

        let sp = SynthPrompt { id: format!("p{p:0width$}"), prompt, labels, queries };
        check_single_deletions(&sp)?;
        out.push(sp);
    }
    Ok(out)
}

/// Every redundant token is individually removable without changing the
/// score, and every essential token is not.
fn check_single_deletions(sp: &SynthPrompt) -> Result<()> {
    let n = sp.prompt.base.len();
    let full = sp.score_masked(&RetentionMask::ones(n))?;
    let labelled = sp.labels.redundant.iter().map(|&i| (i, false));
    for (i, essential) in labelled.chain(sp.labels.essential.iter().map(|&i| (i, true))) {
        let mut m = RetentionMask::ones(n);
        m.set(i, false);
        let s = sp.score_masked(&m)?;
        let ok = if essential { s.value < full.value } else { s.detail == full.detail };
        if !ok {
            return Err(Error::Config(format!(
                "{}: token {i} violates its label under single deletion",
                sp.id
            )));
        }
    }
    Ok(())
}

/// On-disk form of a generated prompt (one JSON object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub tokenizer: String,
    pub delimiter: String,
    pub essential: Vec<usize>,
    pub redundant: Vec<usize>,
    pub queries: Vec<SynthQuery>,
}

impl From<&SynthPrompt> for CorpusRecord {
    fn from(sp: &SynthPrompt) -> Self {
        Self {
            id: sp.id.clone(),
            text: sp.prompt.base.source_text().to_string(),
            tokenizer: crate::text::WORD_TOKENIZER.to_string(),
            delimiter: SHOT_DELIMITER.to_string(),
            essential: sp.labels.essential.iter().copied().collect(),
            redundant: sp.labels.redundant.iter().copied().collect(),
            queries: sp.queries.clone(),
        }
    }
}

impl CorpusRecord {
    pub fn into_prompt(self) -> Result<SynthPrompt> {
        let tok = crate::text::tokenizer_by_name(&self.tokenizer)?;
        let prompt = segment_shots(&self.text, &regex::escape(&self.delimiter), tok.as_ref())?;
        let n = prompt.base.len();
        if self.essential.iter().chain(&self.redundant).any(|&i| i >= n) {
            return Err(Error::InvalidInput(format!("{}: label index out of range", self.id)));
        }
        let labels = SynthLabel {
            essential: self.essential.into_iter().collect(),
            redundant: self.redundant.into_iter().collect(),
        };
        if labels.essential.intersection(&labels.redundant).next().is_some() {
            return Err(Error::InvalidInput(format!("{}: essential and redundant overlap", self.id)));
        }
        Ok(SynthPrompt { id: self.id, prompt, labels, queries: self.queries })
    }
}

pub fn write_corpus(path: &std::path::Path, corpus: &[SynthPrompt]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sp in corpus {
        serde_json::to_writer(&mut w, &CorpusRecord::from(sp))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &std::path::Path) -> Result<Vec<SynthPrompt>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str::<CorpusRecord>(l)?.into_prompt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, WordTokenizer};
    use rand::Rng;

    fn small_spec() -> SynthCorpusSpec {
        SynthCorpusSpec { n_prompts: 4, n_exemplars: 5, seed: 3, ..Default::default() }
    }

    #[test]
    fn no_redundancy_means_empty_redundant_set() {
        let spec = SynthCorpusSpec { redundant_per_shot: 0, ..small_spec() };
        for sp in generate_synth_corpus(&spec).unwrap() {
            assert!(sp.labels.redundant.is_empty());
            assert_eq!(sp.labels.essential.len(), 5 * 3);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synth_corpus(&small_spec()).unwrap();
        let b = generate_synth_corpus(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_synth_corpus(&SynthCorpusSpec { seed: 4, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_are_disjoint_and_point_at_words() {
        let lex = lexicon::builtin();
        for sp in generate_synth_corpus(&small_spec()).unwrap() {
            assert!(sp.labels.essential.is_disjoint(&sp.labels.redundant));
            for &i in &sp.labels.essential {
                assert_eq!(lex.class_of(&sp.prompt.base.token_text(i)), Some(WordClass::Content));
            }
            for &i in &sp.labels.redundant {
                let class = lex.class_of(&sp.prompt.base.token_text(i));
                assert!(matches!(class, Some(WordClass::Filler | WordClass::Connective | WordClass::Template)));
            }
            assert_eq!(sp.prompt.shot_count(), 5);
            assert_eq!(sp.prompt.query_text(), QUERY_TEXT);
        }
    }

    #[test]
    fn all_essentials_present_scores_per_hedges() {
        let sp = &generate_synth_corpus(&small_spec()).unwrap()[0];
        let full = sp.score_masked(&RetentionMask::ones(sp.prompt.base.len())).unwrap();
        let hedged = sp.queries.iter().filter(|q| !q.spoilers.is_empty()).count();
        assert_eq!(full.n_queries, 5 + hedged);
        assert_eq!(full.value, 5.0 / (5 + hedged) as f64);
    }

    #[test]
    fn all_essentials_present_is_perfect_without_hedges() {
        let spec = SynthCorpusSpec { spoiler_rate: 0.0, spoil_final_shot: false, ..small_spec() };
        let sp = &generate_synth_corpus(&spec).unwrap()[0];
        let full = sp.score_masked(&RetentionMask::ones(sp.prompt.base.len())).unwrap();
        assert_eq!(full.value, 1.0);
    }

    #[test]
    fn deleting_one_of_four_exemplars_scores_three_quarters() {
        let spec = SynthCorpusSpec {
            n_exemplars: 4,
            spoiler_rate: 0.0,
            spoil_final_shot: false,
            ..small_spec()
        };
        let sp = &generate_synth_corpus(&spec).unwrap()[0];
        let mut m = RetentionMask::ones(sp.prompt.base.len());
        let shot = sp.prompt.shots[2].clone();
        for &i in sp.labels.essential.iter().filter(|i| shot.contains(i)) {
            m.set(i, false);
        }
        assert_eq!(sp.score_masked(&m).unwrap().value, 0.75);
    }

    #[test]
    fn redundant_subsets_never_change_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for sp in generate_synth_corpus(&small_spec()).unwrap() {
            let n = sp.prompt.base.len();
            let full = sp.score_masked(&RetentionMask::ones(n)).unwrap();
            let red: Vec<usize> = sp.labels.redundant.iter().copied().collect();
            for _ in 0..1000 {
                let mut m = RetentionMask::ones(n);
                for &i in &red {
                    if rng.gen_bool(0.5) {
                        m.set(i, false);
                    }
                }
                assert_eq!(sp.score_masked(&m).unwrap().detail, full.detail);
            }
        }
    }

    #[test]
    fn essential_deletion_never_increases() {
        for sp in generate_synth_corpus(&small_spec()).unwrap() {
            let n = sp.prompt.base.len();
            let full = sp.score_masked(&RetentionMask::ones(n)).unwrap();
            for &i in &sp.labels.essential {
                let mut m = RetentionMask::ones(n);
                m.set(i, false);
                let s = sp.score_masked(&m).unwrap();
                assert!(s.value < full.value);
                assert!(s.detail.iter().zip(&full.detail).all(|(a, b)| !a || *b));
            }
        }
    }

    #[test]
    fn unknown_token_is_scoring_error() {
        let seq = tokenize("Fact : zzzzunknown .", &WordTokenizer::default()).unwrap();
        let q = vec![SynthQuery { shot: 0, required: vec![], spoilers: vec![] }];
        assert!(matches!(synth_score(&seq, &q), Err(Error::Scoring(_))));
    }

    #[test]
    fn empty_query_set_rejected() {
        let seq = tokenize("Fact .", &WordTokenizer::default()).unwrap();
        assert!(matches!(synth_score(&seq, &[]), Err(Error::Scoring(_))));
    }

    #[test]
    fn vocab_too_small_is_config_error() {
        let spec = SynthCorpusSpec { content_vocab: 10, ..small_spec() };
        assert!(matches!(generate_synth_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_file_round_trips() {
        let corpus = generate_synth_corpus(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
    }
}
