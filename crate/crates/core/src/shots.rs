//! Few-shot prompt structure: exemplar ranges plus a trailing query.

use std::ops::Range;

use regex::Regex;

use crate::error::{Error, Result};
use crate::mask::RetentionMask;
use crate::text::{tokenize, TokenSeq, Tokenizer};

/// A prompt split into exemplar token ranges and a query token range.
///
/// Tokens outside every shot and the query are delimiter filler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotPrompt {
    pub base: TokenSeq,
    pub shots: Vec<Range<usize>>,
    pub query: Range<usize>,
}

impl ShotPrompt {
    pub fn new(base: TokenSeq, shots: Vec<Range<usize>>, query: Range<usize>) -> Result<Self> {
        let mut cursor = 0;
        for r in shots.iter().chain(std::iter::once(&query)) {
            if r.start < cursor || r.end < r.start || r.end > base.len() {
                return Err(Error::InvalidInput(format!(
                    "token range {r:?} overlaps or is out of order"
                )));
            }
            cursor = r.end;
        }
        Ok(Self { base, shots, query })
    }

    pub fn shot_count(&self) -> usize {
        self.shots.len()
    }

    pub fn shot_text(&self, i: usize) -> &str {
        &self.base.source_text()[self.base.byte_range(self.shots[i].clone())]
    }

    pub fn query_text(&self) -> &str {
        &self.base.source_text()[self.base.byte_range(self.query.clone())]
    }

    /// Token span a shot owns together with the filler that follows it,
    /// up to the next shot or the query.
    pub fn shot_block(&self, i: usize) -> Range<usize> {
        let end = self.shots.get(i + 1).map_or(self.query.start, |r| r.start);
        self.shots[i].start..end
    }
}

/// Maps a token range of a full sequence onto the sequence kept by `mask`.
/// Returns `None` if any token of `range` is removed.
pub fn project_range(mask: &RetentionMask, range: Range<usize>) -> Option<Range<usize>> {
    if range.clone().any(|i| !mask.get(i)) {
        return None;
    }
    let start = mask.bits()[..range.start].iter().filter(|&&b| b).count();
    Some(start..start + range.len())
}

/// Splits `text` on every match of the `delimiter` regex: all segments but
/// the last are exemplars, the last is the query. Empty segments are skipped
/// as exemplars. Tokens straddling a boundary count as filler.
pub fn segment_shots(text: &str, delimiter: &str, tok: &dyn Tokenizer) -> Result<ShotPrompt> {
    let re = Regex::new(delimiter)
        .map_err(|e| Error::Config(format!("bad delimiter pattern {delimiter:?}: {e}")))?;
    let mut segments = Vec::new();
    let mut last = 0;
    for m in re.find_iter(text) {
        if m.start() == m.end() {
            continue;
        }
        segments.push(last..m.start());
        last = m.end();
    }
    if segments.is_empty() {
        return Err(Error::Segmentation(format!("delimiter {delimiter:?} matches no boundary")));
    }
    let query_bytes = last..text.len();
    let base = tokenize(text, tok)?;
    let shots: Vec<Range<usize>> = segments
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| tokens_within(&base, s))
        .filter(|r| !r.is_empty())
        .collect();
    if shots.is_empty() {
        return Err(Error::Segmentation("no non-empty exemplar".into()));
    }
    let query = tokens_within(&base, query_bytes);
    ShotPrompt::new(base, shots, query)
}

/// Tokens whose spans lie entirely inside `bytes`.
fn tokens_within(seq: &TokenSeq, bytes: Range<usize>) -> Range<usize> {
    let spans = seq.spans();
    let start = spans.partition_point(|s| s.start < bytes.start);
    let end = spans.partition_point(|s| s.end <= bytes.end);
    if end <= start {
        // Anchor empty ranges at the segment position.
        return start..start;
    }
    start..end
}
