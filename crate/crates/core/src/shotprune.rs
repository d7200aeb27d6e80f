//! Shot-level pruning: dropping whole exemplars before token-level search.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{apply_mask, MaskMode, RetentionMask};
use crate::shots::ShotPrompt;
use crate::text::TokenSeq;

/// Half-width of the uniform window the variable-k sampler draws from.
pub const VARIABLE_K_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    RandomVariableK,
    RandomFixedK,
    Pluggable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSelection {
    /// Sorted, unique shot indices.
    pub kept: Vec<usize>,
    pub strategy: SelectionStrategy,
    pub seed: u64,
}

impl ShotSelection {
    pub fn k_effective(&self) -> usize {
        self.kept.len()
    }

    fn validate(&self, shot_count: usize) -> Result<()> {
        if self.kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("kept shot indices must be sorted and unique".into()));
        }
        if self.kept.last().is_some_and(|&i| i >= shot_count) {
            return Err(Error::InvalidInput(format!("shot index out of range for {shot_count} shots")));
        }
        Ok(())
    }
}

/// Scores how relevant an exemplar is to a query.
pub trait SimilarityProvider {
    fn name(&self) -> &str;
    fn similarity(&self, query: &TokenSeq, exemplar: &TokenSeq) -> f64;
}

/// Jaccard overlap of the sets of non-whitespace token texts.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardSimilarity;

fn token_set(seq: &TokenSeq) -> HashSet<String> {
    (0..seq.len())
        .map(|i| seq.token_text(i).into_owned())
        .filter(|t| !t.trim().is_empty())
        .collect()
}

impl SimilarityProvider for JaccardSimilarity {
    fn name(&self) -> &str {
        "jaccard"
    }

    fn similarity(&self, query: &TokenSeq, exemplar: &TokenSeq) -> f64 {
        let a = token_set(query);
        let b = token_set(exemplar);
        let union = a.union(&b).count();
        if union == 0 {
            return 0.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub score: f64,
}

/// The `n` most similar pool entries, best first; ties go to the lower index.
pub fn retrieve_candidates(
    query: &TokenSeq,
    pool: &[TokenSeq],
    n: usize,
    sim: &dyn SimilarityProvider,
) -> Result<Vec<Candidate>> {
    if pool.len() < n {
        return Err(Error::Config(format!("pool has {} exemplars, {n} requested", pool.len())));
    }
    let mut scored: Vec<Candidate> = pool
        .iter()
        .enumerate()
        .map(|(index, e)| Candidate { index, score: sim.similarity(query, e) })
        .collect();
    if let Some(c) = scored.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::Scoring(format!("{} returned {} for exemplar {}", sim.name(), c.score, c.index)));
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    scored.truncate(n);
    Ok(scored)
}

fn sample_sorted(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut kept = index::sample(rng, n, k).into_vec();
    kept.sort_unstable();
    kept
}

/// Keeps a random number of shots whose expectation is `mean_target`.
///
/// The window center is `floor(mean)` or `floor(mean) + 1`, chosen so its
/// expectation is `mean`; k is then uniform over a symmetric window around
/// the center, shrunk to stay inside `1..=shot_count`.
pub fn prune_shots_variable_k(prompt: &ShotPrompt, mean_target: f64, seed: u64) -> Result<ShotSelection> {
    let n = prompt.shot_count();
    if !(mean_target >= 1.0 && mean_target <= n as f64) {
        return Err(Error::Config(format!("mean_target {mean_target} outside [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = mean_target.floor();
    let frac = mean_target - base;
    let center = base as usize + usize::from(frac > 0.0 && rng.gen_bool(frac));
    let w = VARIABLE_K_WINDOW.min(center - 1).min(n - center);
    let k = rng.gen_range(center - w..=center + w);
    Ok(ShotSelection {
        kept: sample_sorted(&mut rng, n, k),
        strategy: SelectionStrategy::RandomVariableK,
        seed,
    })
}

/// Keeps exactly `k` shots chosen uniformly without replacement.
pub fn prune_shots_fixed_k(prompt: &ShotPrompt, k: usize, seed: u64) -> Result<ShotSelection> {
    let n = prompt.shot_count();
    if k < 1 || k > n {
        return Err(Error::Config(format!("k = {k} outside [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ShotSelection { kept: sample_sorted(&mut rng, n, k), strategy: SelectionStrategy::RandomFixedK, seed })
}

/// The fewer-shot prompt and its retention mask over the full prompt.
///
/// Kept shots carry the delimiter filler that follows them; text before the
/// first shot and the query are always kept.
pub fn materialize_fewer_shot(prompt: &ShotPrompt, sel: &ShotSelection) -> Result<(TokenSeq, RetentionMask)> {
    sel.validate(prompt.shot_count())?;
    let n = prompt.base.len();
    let mut mask = RetentionMask::zeros(n);
    let first = prompt.shots.first().map_or(prompt.query.start, |r| r.start);
    for i in (0..first).chain(prompt.query.start..n) {
        mask.set(i, true);
    }
    for &s in &sel.kept {
        for i in prompt.shot_block(s) {
            mask.set(i, true);
        }
    }
    mask.ensure_nonempty()?;
    let seq = apply_mask(&prompt.base, &mask, MaskMode::Delete)?;
    Ok((seq, mask))
}
