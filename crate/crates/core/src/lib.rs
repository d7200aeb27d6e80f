//! Prompt compression by retention masks.
//!
//! Token sequences and masks, scoring oracles, shot- and token-level pruning,
//! and the construction of full/pruned training pairs.

pub mod align;
pub mod error;
pub mod lexicon;
pub mod mask;
pub mod oracle;
pub mod pipeline;
pub mod record;
pub mod shotprune;
pub mod shots;
pub mod taprune;
pub mod text;

pub use align::{align_mask, DEFAULT_OVERLAP};
pub use error::{Error, Result};
pub use mask::{apply_mask, MaskMode, RetentionMask};
pub use oracle::{PerformanceFn, Score};
pub use record::{PairMeta, PromptPair, Stage};
pub use shots::{segment_shots, ShotPrompt};
pub use text::{detokenize, tokenize, tokenizer_by_name, ByteTokenizer, TokenId, TokenSeq, Tokenizer, WordTokenizer};
