//! Threshold-accepting token pruning.
//!
//! Tokens are removed one at a time. A removal is kept when it beats the best
//! score so far (and then becomes the new best), or when it stays above the
//! best score times `delta`. Passes over the prompt repeat until one accepts
//! nothing.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::{apply_mask, MaskMode, RetentionMask};
use crate::oracle::PerformanceFn;
use crate::text::TokenSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaConfig {
    pub delta: f64,
    pub max_passes: usize,
    pub min_tokens: usize,
    pub protect_query: bool,
}

impl Default for TaConfig {
    fn default() -> Self {
        Self { delta: 0.95, max_passes: 50, min_tokens: 1, protect_query: true }
    }
}

impl TaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1]", self.delta)));
        }
        if self.min_tokens < 1 {
            return Err(Error::Config("min_tokens must be at least 1".into()));
        }
        if self.max_passes < 1 {
            return Err(Error::Config("max_passes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptKind {
    AcceptedImprove,
    AcceptedThreshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaState {
    pub mask: RetentionMask,
    pub score: f64,
    pub kind: AcceptKind,
    /// 1-based pass in which the state was accepted.
    pub pass: usize,
    /// Token index removed to reach this state.
    pub removed: usize,
    /// Best score at the moment of acceptance (before any update).
    pub best_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaTrajectory {
    pub states: Vec<TaState>,
    /// Index of the best state; `None` when no removal ever improved.
    pub optimal_index: Option<usize>,
    pub baseline: f64,
    /// Passes run, including the final pass that accepted nothing.
    pub converged_passes: usize,
    /// False if stopped by `max_passes`.
    pub converged: bool,
    pub initial: RetentionMask,
    pub evaluations: usize,
}

impl TaTrajectory {
    /// Mask and score of the best prompt found.
    pub fn optimal(&self) -> (&RetentionMask, f64) {
        match self.optimal_index {
            Some(i) => (&self.states[i].mask, self.states[i].score),
            None => (&self.initial, self.baseline),
        }
    }

    pub fn improve_states(&self) -> impl Iterator<Item = (usize, &TaState)> {
        self.states.iter().enumerate().filter(|(_, s)| s.kind == AcceptKind::AcceptedImprove)
    }
}

/// Search failure with everything accepted up to that point.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct TaError {
    #[source]
    pub source: Error,
    pub partial: Box<TaTrajectory>,
}

impl From<TaError> for Error {
    fn from(e: TaError) -> Self {
        e.source
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    prompt_sha256: String,
    delta: f64,
    baseline: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    mask: RetentionMask,
    score: f64,
    kind: AcceptKind,
    pass: usize,
}

/// Hash identifying a search problem: text, token ids, start mask, protection.
pub fn problem_hash(seq: &TokenSeq, init: &RetentionMask, protected: &[Range<usize>]) -> String {
    let mut h = Sha256::new();
    h.update(seq.source_text().as_bytes());
    h.update([0]);
    for t in seq.tokens() {
        h.update(t.to_le_bytes());
    }
    h.update(init.to_u8());
    for r in protected {
        h.update((r.start as u64).to_le_bytes());
        h.update((r.end as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

struct Search<'a> {
    seq: &'a TokenSeq,
    f: &'a dyn PerformanceFn,
    cfg: &'a TaConfig,
    protected: Vec<bool>,
    cache: HashMap<RetentionMask, f64>,
    sink: Option<File>,
    traj: TaTrajectory,
    current: RetentionMask,
    best: f64,
}

impl Search<'_> {
    fn eval(&mut self, mask: &RetentionMask) -> Result<f64> {
        if let Some(&v) = self.cache.get(mask) {
            return Ok(v);
        }
        let pruned = apply_mask(self.seq, mask, MaskMode::Delete)?;
        let v = self.f.evaluate(&pruned)?.value;
        self.traj.evaluations += 1;
        self.cache.insert(mask.clone(), v);
        Ok(v)
    }

    fn record(&mut self, state: TaState) -> Result<()> {
        if let Some(f) = &mut self.sink {
            let line = Line { mask: state.mask.clone(), score: state.score, kind: state.kind, pass: state.pass };
            let mut bytes = serde_json::to_vec(&line)?;
            bytes.push(b'\n');
            f.write_all(&bytes)?;
            f.flush()?;
        }
        if state.kind == AcceptKind::AcceptedImprove {
            self.best = state.score;
            self.traj.optimal_index = Some(self.traj.states.len());
        }
        self.current = state.mask.clone();
        self.traj.states.push(state);
        Ok(())
    }

    /// Runs passes starting at `pass` with the scan cursor at `cursor`.
    /// `accepted` says whether the starting pass already accepted something.
    fn run(&mut self, mut pass: usize, mut cursor: usize, mut accepted: bool) -> Result<()> {
        let n = self.seq.len();
        loop {
            self.traj.converged_passes = pass;
            let mut floor_hit = false;
            while let Some(i) = (cursor..n).find(|&i| self.current.get(i) && !self.protected[i]) {
                if self.current.retained_count() <= self.cfg.min_tokens {
                    floor_hit = true;
                    break;
                }
                let mut cand = self.current.clone();
                cand.set(i, false);
                let score = self.eval(&cand)?;
                let best_before = self.best;
                let kind = if score > self.best {
                    Some(AcceptKind::AcceptedImprove)
                } else if score > self.best * self.cfg.delta {
                    Some(AcceptKind::AcceptedThreshold)
                } else {
                    None
                };
                if let Some(kind) = kind {
                    self.record(TaState { mask: cand, score, kind, pass, removed: i, best_before })?;
                    accepted = true;
                }
                cursor = i + 1;
            }
            if !accepted || floor_hit {
                self.traj.converged = true;
                return Ok(());
            }
            if pass >= self.cfg.max_passes {
                log::warn!("threshold-accepting search hit max_passes = {}", self.cfg.max_passes);
                return Ok(());
            }
            pass += 1;
            cursor = 0;
            accepted = false;
        }
    }
}

fn protection(n: usize, protected: &[Range<usize>], cfg: &TaConfig) -> Result<Vec<bool>> {
    let mut p = vec![false; n];
    if cfg.protect_query {
        for r in protected {
            if r.end > n {
                return Err(Error::InvalidInput(format!("protected range {r:?} exceeds {n} tokens")));
            }
            p[r.clone()].iter_mut().for_each(|b| *b = true);
        }
    }
    Ok(p)
}

fn empty_trajectory(init: &RetentionMask, baseline: f64) -> TaTrajectory {
    TaTrajectory {
        states: Vec::new(),
        optimal_index: None,
        baseline,
        converged_passes: 0,
        converged: false,
        initial: init.clone(),
        evaluations: 0,
    }
}

fn finish(search: Search<'_>, outcome: Result<()>) -> Result<TaTrajectory, TaError> {
    match outcome {
        Ok(()) => Ok(search.traj),
        Err(source) => Err(TaError { source, partial: Box::new(search.traj) }),
    }
}

/// Runs the search from `init_mask`. Tokens in `protected` ranges are never
/// removed when `cfg.protect_query` is set. If `checkpoint` is given, the
/// trajectory is written there as it grows (the file is truncated first).
pub fn ta_prune(
    seq: &TokenSeq,
    init_mask: &RetentionMask,
    protected: &[Range<usize>],
    f: &dyn PerformanceFn,
    cfg: &TaConfig,
    checkpoint: Option<&Path>,
) -> Result<TaTrajectory, TaError> {
    let fail = |source: Error, baseline: f64| TaError { source, partial: Box::new(empty_trajectory(init_mask, baseline)) };
    let setup = || -> Result<Vec<bool>> {
        cfg.validate()?;
        if init_mask.len() != seq.len() {
            return Err(Error::shape(seq.len(), init_mask.len()));
        }
        init_mask.ensure_nonempty()?;
        protection(seq.len(), protected, cfg)
    };
    let prot = setup().map_err(|e| fail(e, f64::NAN))?;
    let mut search = Search {
        seq,
        f,
        cfg,
        protected: prot,
        cache: HashMap::new(),
        sink: None,
        traj: empty_trajectory(init_mask, f64::NAN),
        current: init_mask.clone(),
        best: f64::NAN,
    };
    let baseline = match search.eval(init_mask) {
        Ok(b) => b,
        Err(e) => return finish(search, Err(e)),
    };
    search.traj.baseline = baseline;
    search.best = baseline;
    if let Some(path) = checkpoint {
        let opened = (|| -> Result<File> {
            let mut file = File::create(path)?;
            let header = Header { prompt_sha256: problem_hash(seq, init_mask, protected), delta: cfg.delta, baseline };
            let mut bytes = serde_json::to_vec(&header)?;
            bytes.push(b'\n');
            file.write_all(&bytes)?;
            file.flush()?;
            Ok(file)
        })();
        match opened {
            Ok(file) => search.sink = Some(file),
            Err(e) => return finish(search, Err(e)),
        }
    }
    let outcome = search.run(1, 0, false);
    finish(search, outcome)
}

/// Continues a search persisted at `path` by [`ta_prune`].
///
/// A trailing line without a newline is treated as torn by a crash: it is
/// dropped and the file truncated before appending. Any other malformed
/// content or a problem-hash mismatch is a resume error.
pub fn resume(
    path: &Path,
    seq: &TokenSeq,
    init_mask: &RetentionMask,
    protected: &[Range<usize>],
    f: &dyn PerformanceFn,
    cfg: &TaConfig,
) -> Result<TaTrajectory, TaError> {
    let fail = |source: Error| TaError { source, partial: Box::new(empty_trajectory(init_mask, f64::NAN)) };
    cfg.validate().map_err(fail)?;
    let raw = std::fs::read(path).map_err(|e| fail(e.into()))?;
    let complete_len = raw.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if complete_len == 0 {
        // Not even a header survived: start over.
        return ta_prune(seq, init_mask, protected, f, cfg, Some(path));
    }
    let reader = BufReader::new(&raw[..complete_len]);
    let mut lines = reader.lines();
    let bad = |msg: String| fail(Error::Resume(msg));
    let header: Header = lines
        .next()
        .and_then(|l| l.ok())
        .and_then(|l| serde_json::from_str(&l).ok())
        .ok_or_else(|| bad("unreadable header".into()))?;
    let expected = problem_hash(seq, init_mask, protected);
    if header.prompt_sha256 != expected {
        return Err(bad(format!("prompt hash {} does not match {expected}", header.prompt_sha256)));
    }
    if header.delta != cfg.delta {
        return Err(bad(format!("checkpoint delta {} differs from configured {}", header.delta, cfg.delta)));
    }
    let prot = protection(seq.len(), protected, cfg).map_err(fail)?;

    let mut traj = empty_trajectory(init_mask, header.baseline);
    let mut prev = init_mask.clone();
    let mut best = header.baseline;
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        let parsed: Line = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
        if parsed.mask.len() != prev.len() {
            return Err(bad(format!("line {}: mask length {}", n + 2, parsed.mask.len())));
        }
        let removed: Vec<usize> = (0..prev.len()).filter(|&i| prev.get(i) && !parsed.mask.get(i)).collect();
        let added = (0..prev.len()).any(|i| !prev.get(i) && parsed.mask.get(i));
        if removed.len() != 1 || added {
            return Err(bad(format!("line {}: not a single-token removal", n + 2)));
        }
        let best_before = best;
        if parsed.kind == AcceptKind::AcceptedImprove {
            best = parsed.score;
            traj.optimal_index = Some(traj.states.len());
        }
        traj.states.push(TaState {
            mask: parsed.mask.clone(),
            score: parsed.score,
            kind: parsed.kind,
            pass: parsed.pass,
            removed: removed[0],
            best_before,
        });
        prev = parsed.mask;
    }

    let mut file = OpenOptions::new().write(true).open(path).map_err(|e| fail(e.into()))?;
    file.set_len(complete_len as u64).map_err(|e| fail(e.into()))?;
    use std::io::Seek;
    file.seek(std::io::SeekFrom::End(0)).map_err(|e| fail(e.into()))?;

    let (pass, cursor, accepted) = match traj.states.last() {
        Some(s) => (s.pass, s.removed + 1, true),
        None => (1, 0, false),
    };
    let mut search = Search {
        seq,
        f,
        cfg,
        protected: prot,
        cache: HashMap::new(),
        sink: Some(file),
        current: prev,
        best,
        traj,
    };
    let outcome = search.run(pass, cursor, accepted);
    finish(search, outcome)
}

/// Resumes from `path` if it exists, otherwise starts a fresh checkpointed run.
pub fn ta_prune_checkpointed(
    path: &Path,
    seq: &TokenSeq,
    init_mask: &RetentionMask,
    protected: &[Range<usize>],
    f: &dyn PerformanceFn,
    cfg: &TaConfig,
) -> Result<TaTrajectory, TaError> {
    if path.exists() {
        resume(path, seq, init_mask, protected, f, cfg)
    } else {
        ta_prune(seq, init_mask, protected, f, cfg, Some(path))
    }
}

/// Every `stride`-th improving state plus the optimal one, in trajectory order.
pub fn harvest_intermediates(traj: &TaTrajectory, stride: usize) -> Result<Vec<(usize, &TaState)>> {
    if stride < 1 {
        return Err(Error::Config("harvest stride must be at least 1".into()));
    }
    let mut picked: Vec<usize> = traj.improve_states().map(|(i, _)| i).step_by(stride).collect();
    if let Some(opt) = traj.optimal_index {
        if !picked.contains(&opt) {
            picked.push(opt);
        }
    }
    Ok(picked.into_iter().map(|i| (i, &traj.states[i])).collect())
}
