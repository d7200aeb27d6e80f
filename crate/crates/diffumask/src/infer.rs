//! Iterative top-k / threshold pruning with the mask model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskModel;
use maskpress_core::{RetentionMask, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub steps: usize,
    pub top_k: usize,
    /// Minimum MASK probability to prune. Values above 1 disable pruning.
    pub tau: f64,
    /// At most this many prunes per step, highest MASK probability first.
    pub per_step_cap: Option<usize>,
    /// Run every step even after a fixed point.
    pub force_all_steps: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { steps: 64, top_k: 4, tau: 1e-3, per_step_cap: None, force_all_steps: false }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.top_k == 0 {
            return Err(Error::Config("steps and top_k must be at least 1".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.per_step_cap == Some(0) {
            return Err(Error::Config("per_step_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whether a position with output distribution `row` is pruned: MASK ranks
/// within the `top_k` largest entries and its probability reaches `tau`.
///
/// Rank counts strictly larger entries, so ties with MASK do not push it out.
pub fn prune_predicate(row: &[f64], mask_id: TokenId, top_k: usize, tau: f64) -> bool {
    let pm = row[mask_id as usize];
    pm >= tau && row.iter().filter(|&&p| p > pm).count() < top_k
}

/// Positions among `visible` that one step would prune, before any cap.
pub fn step_prune_set(probs: &[f64], vocab: usize, visible: &[bool], mask_id: TokenId, top_k: usize, tau: f64) -> Vec<usize> {
    probs
        .chunks(vocab)
        .zip(visible)
        .enumerate()
        .filter(|(_, (row, &v))| v && prune_predicate(row, mask_id, top_k, tau))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// MASK probability at every position for this step's input.
    pub p_mask: Vec<f64>,
    pub pruned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub mask: RetentionMask,
    pub trace: Vec<StepTrace>,
}

impl Inference {
    pub fn compression_ratio(&self) -> f64 {
        compression_ratio(&self.mask)
    }
}

/// `1 - retained / total`.
pub fn compression_ratio(mask: &RetentionMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    1.0 - mask.retained_count() as f64 / mask.len() as f64
}

/// Runs up to `cfg.steps` denoising steps. Pruned positions are fed back as
/// MASK. At least one token always survives.
pub fn infer_mask(model: &MaskModel, tokens: &[TokenId], cfg: &InferenceConfig) -> Result<Inference> {
    cfg.validate()?;
    let arch = model.arch();
    let (vocab, mid) = (arch.vocab_size, arch.mask_id);
    let mut visible = vec![true; tokens.len()];
    let mut trace = Vec::new();
    for step in 0..cfg.steps {
        let input: Vec<TokenId> = tokens.iter().zip(&visible).map(|(&t, &v)| if v { t } else { mid }).collect();
        let probs = model.forward(&input)?;
        let p_mask: Vec<f64> = probs.chunks(vocab).map(|r| r[mid as usize]).collect();
        let mut pruned = step_prune_set(&probs, vocab, &visible, mid, cfg.top_k, cfg.tau);
        if let Some(cap) = cfg.per_step_cap {
            if pruned.len() > cap {
                pruned.sort_by(|&a, &b| p_mask[b].total_cmp(&p_mask[a]).then(a.cmp(&b)));
                pruned.truncate(cap);
                pruned.sort_unstable();
            }
        }
        let remaining = visible.iter().filter(|&&v| v).count();
        if !pruned.is_empty() && pruned.len() == remaining {
            // Spare the most confidently retained candidate.
            let spare = *pruned.iter().min_by(|&&a, &&b| p_mask[a].total_cmp(&p_mask[b]).then(a.cmp(&b))).unwrap();
            pruned.retain(|&i| i != spare);
        }
        for &i in &pruned {
            visible[i] = false;
        }
        let fixed_point = pruned.is_empty();
        trace.push(StepTrace { step, p_mask, pruned });
        if fixed_point && !cfg.force_all_steps {
            break;
        }
    }
    Ok(Inference { mask: RetentionMask::new(visible)?, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicate_by_hand() {
        let row = [0.5, 0.3, 0.2];
        assert!(prune_predicate(&row, 1, 2, 0.1));
        assert!(!prune_predicate(&row, 1, 1, 0.1));
        assert!(!prune_predicate(&row, 1, 2, 0.31));
        assert!(prune_predicate(&[0.4, 0.4, 0.2], 1, 1, 0.0));
    }

    #[test]
    fn invalid_configs() {
        for c in [
            InferenceConfig { steps: 0, ..Default::default() },
            InferenceConfig { top_k: 0, ..Default::default() },
            InferenceConfig { tau: f64::NAN, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
