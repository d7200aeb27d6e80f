//! Built-in word inventory shared by the word tokenizer and the synthetic corpus.
//!
//! Every word here gets a stable token id (its position in [`Lexicon::words`]),
//! so that models trained on synthetic prompts see a collision-free vocabulary.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordClass {
    /// Structural words of the exemplar template.
    Template,
    /// Marker words of the trailing query.
    Query,
    Filler,
    Connective,
    /// Hedge words that undermine an exemplar when present.
    Hedge,
    /// Pseudo-words that carry exemplar content.
    Content,
    Punct,
    Space,
}

pub const TEMPLATE_WORDS: &[&str] = &["Fact", "note", "that"];
pub const QUERY_WORDS: &[&str] = &["Answer"];
pub const FILLER_WORDS: &[&str] = &[
    "basically", "actually", "really", "honestly", "literally", "simply", "clearly", "obviously",
];
pub const CONNECTIVE_WORDS: &[&str] = &[
    "furthermore", "moreover", "additionally", "accordingly", "consequently", "henceforth",
];
pub const HEDGE_WORDS: &[&str] = &[
    "maybe", "perhaps", "allegedly", "reportedly", "supposedly", "arguably", "seemingly",
    "apparently", "possibly", "presumably", "ostensibly", "purportedly",
];
pub const SPACE_TOKENS: &[&str] = &[" ", "\n", "\n\n", "  ", "\t"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const CONTENT_POOL_SIZE: usize = 256;

#[derive(Debug)]
pub struct Lexicon {
    words: Vec<String>,
    classes: Vec<WordClass>,
    index: HashMap<String, u32>,
}

impl Lexicon {
    fn build() -> Self {
        let mut lex = Lexicon { words: Vec::new(), classes: Vec::new(), index: HashMap::new() };
        for w in SPACE_TOKENS {
            lex.push(w, WordClass::Space);
        }
        for b in 0x21u8..0x7f {
            if b.is_ascii_punctuation() {
                lex.push(&(b as char).to_string(), WordClass::Punct);
            }
        }
        for (words, class) in [
            (TEMPLATE_WORDS, WordClass::Template),
            (QUERY_WORDS, WordClass::Query),
            (FILLER_WORDS, WordClass::Filler),
            (CONNECTIVE_WORDS, WordClass::Connective),
            (HEDGE_WORDS, WordClass::Hedge),
        ] {
            for w in words {
                lex.push(w, class);
            }
        }
        // Two-syllable CVCV pseudo-words, enumerated with a stride coprime to
        // the number of syllable pairs so the pool is spread over the space.
        let syllables: Vec<String> = CONSONANTS
            .iter()
            .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
            .collect();
        let n_pairs = syllables.len() * syllables.len();
        let mut added = 0;
        let mut i = 0usize;
        while added < CONTENT_POOL_SIZE {
            let p = (i * 19) % n_pairs;
            i += 1;
            let w = format!("{}{}", syllables[p / syllables.len()], syllables[p % syllables.len()]);
            if lex.index.contains_key(&w) || lex.index.contains_key(&capitalize(&w)) {
                continue;
            }
            lex.push(&w, WordClass::Content);
            added += 1;
        }
        lex
    }

    fn push(&mut self, w: &str, class: WordClass) {
        let id = self.words.len() as u32;
        self.words.push(w.to_string());
        self.classes.push(class);
        self.index.insert(w.to_string(), id);
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn class_of(&self, word: &str) -> Option<WordClass> {
        self.id(word).map(|id| self.classes[id as usize])
    }

    pub fn words_of(&self, class: WordClass) -> impl Iterator<Item = &str> {
        self.words
            .iter()
            .zip(&self.classes)
            .filter(move |(_, c)| **c == class)
            .map(|(w, _)| w.as_str())
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// The process-wide built-in lexicon.
pub fn builtin() -> &'static Lexicon {
    static LEX: OnceLock<Lexicon> = OnceLock::new();
    LEX.get_or_init(Lexicon::build)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_pool_is_full_and_disjoint() {
        let lex = builtin();
        let content: Vec<&str> = lex.words_of(WordClass::Content).collect();
        assert_eq!(content.len(), CONTENT_POOL_SIZE);
        for w in &content {
            assert_eq!(lex.class_of(w), Some(WordClass::Content));
            assert_eq!(w.len(), 4);
        }
        assert_eq!(lex.class_of("note"), Some(WordClass::Template));
    }

    #[test]
    fn ids_are_dense() {
        let lex = builtin();
        for (i, w) in lex.words.iter().enumerate() {
            assert_eq!(lex.id(w), Some(i as u32));
        }
    }
}
