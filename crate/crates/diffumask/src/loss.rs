//! Composite objective: retention BCE plus the anti-mask penalty.
//!
//! The model never sees a separate retention head. Retention is
//! `r = 1 - p(MASK)`, and its log is computed as `LSE(z without MASK) - LSE(z)`
//! so it stays finite when `p(MASK)` approaches one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::logsumexp;
use maskpress_core::{RetentionMask, TokenId};

/// Decision boundary: a position is predicted "remove" when `r < RETAIN_THRESHOLD`.
pub const RETAIN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_bce: f64,
    pub l_anti_mask: f64,
    pub l_total: f64,
    /// Visible positions labeled "keep" but predicted "remove".
    pub incorrect_set: Vec<usize>,
    pub n_scored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_mask: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.lambda_mask >= 0.0) || !self.lambda_mask.is_finite() {
            return Err(Error::Config(format!("need alpha in [0,1] and lambda_mask >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Inputs to [`compute_loss`] for one sequence.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    /// `L × vocab` logits from the model on `x_tilde`.
    pub logits: &'a [f64],
    pub vocab: usize,
    pub mask_id: TokenId,
    /// The original tokens.
    pub x: &'a [TokenId],
    /// Ground-truth pruned mask; it labels every visible position.
    pub m: &'a RetentionMask,
    /// Visibility after the forward process.
    pub m_t: &'a RetentionMask,
}

/// Loss value and its gradient w.r.t. the logits.
///
/// `frozen_incorrect` replaces the incorrect set computed from the logits;
/// finite-difference checks use it to stay on one smooth piece of the loss.
pub fn compute_loss_with(inp: LossInput<'_>, w: LossWeights, frozen_incorrect: Option<&[usize]>) -> Result<(LossBreakdown, Vec<f64>)> {
    w.validate()?;
    let l = inp.x.len();
    if inp.logits.len() != l * inp.vocab {
        return Err(Error::Shape { expected: l * inp.vocab, actual: inp.logits.len() });
    }
    for mask in [inp.m, inp.m_t] {
        if mask.len() != l {
            return Err(Error::Shape { expected: l, actual: mask.len() });
        }
    }
    let mid = inp.mask_id as usize;
    let visible: Vec<usize> = inp.m_t.retained_indices().collect();
    if visible.is_empty() {
        return Err(Error::Loss("no visible positions to score".into()));
    }
    let mut grad = vec![0.0; inp.logits.len()];

    let mut computed_incorrect = Vec::new();
    let mut bce = 0.0;
    let n = visible.len() as f64;
    let scale_bce = w.alpha / n;
    let mut probs = vec![0.0; inp.vocab];
    for &i in &visible {
        let z = &inp.logits[i * inp.vocab..(i + 1) * inp.vocab];
        let lse = logsumexp(z);
        for (p, &zj) in probs.iter_mut().zip(z) {
            *p = (zj - lse).exp();
        }
        let rest = logsumexp_skip(z, mid);
        let log_r = rest - lse;
        let log_pm = z[mid] - lse;
        let label = inp.m.get(i);
        bce -= if label { log_r } else { log_pm };
        if label && log_r.exp() < RETAIN_THRESHOLD {
            computed_incorrect.push(i);
        }
        let g = &mut grad[i * inp.vocab..(i + 1) * inp.vocab];
        if label {
            // d(-log r)/dz_j = p_j - q_j, q = softmax over non-MASK entries.
            for j in 0..inp.vocab {
                let q = if j == mid { 0.0 } else { (z[j] - rest).exp() };
                g[j] += scale_bce * (probs[j] - q);
            }
        } else {
            for j in 0..inp.vocab {
                g[j] += scale_bce * (probs[j] - if j == mid { 1.0 } else { 0.0 });
            }
        }
    }
    let l_bce = bce / n;

    let incorrect: Vec<usize> = match frozen_incorrect {
        Some(set) => set.to_vec(),
        None => computed_incorrect,
    };
    let mut anti = 0.0;
    if !incorrect.is_empty() {
        let k = incorrect.len() as f64;
        let scale = (1.0 - w.alpha) * w.lambda_mask / k;
        for &i in &incorrect {
            if !inp.m_t.get(i) {
                return Err(Error::Loss(format!("incorrect-set position {i} is not visible")));
            }
            let z = &inp.logits[i * inp.vocab..(i + 1) * inp.vocab];
            let lse = logsumexp(z);
            let xi = inp.x[i] as usize;
            anti += lse - z[xi];
            let g = &mut grad[i * inp.vocab..(i + 1) * inp.vocab];
            for j in 0..inp.vocab {
                g[j] += scale * ((z[j] - lse).exp() - if j == xi { 1.0 } else { 0.0 });
            }
        }
        anti = w.lambda_mask * anti / k;
    }
    let l_total = w.alpha * l_bce + (1.0 - w.alpha) * anti;
    Ok((LossBreakdown { l_bce, l_anti_mask: anti, l_total, incorrect_set: incorrect, n_scored: visible.len() }, grad))
}

pub fn compute_loss(inp: LossInput<'_>, w: LossWeights) -> Result<(LossBreakdown, Vec<f64>)> {
    compute_loss_with(inp, w, None)
}

fn logsumexp_skip(z: &[f64], skip: usize) -> f64 {
    let m = z.iter().enumerate().filter(|&(j, _)| j != skip).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().enumerate().filter(|&(j, _)| j != skip).map(|(_, &v)| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-symbol logits giving retention `r` exactly: token 0 and MASK = 1.
    fn logits_for(r: &[f64]) -> Vec<f64> {
        r.iter().flat_map(|&r| [r.ln(), (1.0 - r).ln()]).collect()
    }

    fn run(r: &[f64], labels: &[bool], w: LossWeights) -> LossBreakdown {
        let z = logits_for(r);
        let x = vec![0; r.len()];
        let m = RetentionMask::new(labels.to_vec()).unwrap();
        let vis = RetentionMask::ones(r.len());
        compute_loss(LossInput { logits: &z, vocab: 2, mask_id: 1, x: &x, m: &m, m_t: &vis }, w).unwrap().0
    }

    const W: LossWeights = LossWeights { alpha: 0.8, lambda_mask: 2.0 };

    #[test]
    fn hand_computed_bce() {
        let b = run(&[0.9, 0.2, 0.6], &[true, false, true], W);
        let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((b.l_bce - expected).abs() < 1e-12);
        assert!((b.l_bce - 0.279_78).abs() < 1e-5);
        assert!(b.incorrect_set.is_empty());
        assert_eq!(b.l_anti_mask, 0.0);
        assert_eq!(b.n_scored, 3);

        let b = run(&[0.9, 0.2, 0.4], &[true, false, true], W);
        assert_eq!(b.incorrect_set, vec![2]);
        // p_correct for token 0 equals r here.
        assert!((b.l_anti_mask - 2.0 * -(0.4f64.ln())).abs() < 1e-12);
        assert_eq!(b.l_total, 0.8 * b.l_bce + (1.0 - 0.8) * b.l_anti_mask);
    }

    #[test]
    fn perfect_predictor() {
        let b = run(&[1.0 - 1e-12, 1e-12], &[true, false], W);
        assert!(b.incorrect_set.is_empty());
        assert_eq!(b.l_anti_mask, 0.0);
        assert!(b.l_bce < 1e-9);
    }

    #[test]
    fn total_is_convex_combination() {
        let b = run(&[0.3, 0.1, 0.45, 0.8], &[true, true, false, true], W);
        assert!(b.l_total >= b.l_bce.min(b.l_anti_mask) && b.l_total <= b.l_bce.max(b.l_anti_mask));
    }

    #[test]
    fn hidden_positions_are_not_scored() {
        let z = logits_for(&[0.3, 0.1, 0.6]);
        let m = RetentionMask::new(vec![true, false, true]).unwrap();
        let m_t = RetentionMask::new(vec![true, false, true]).unwrap();
        let x = [0, 0, 0];
        let (b, g) = compute_loss(LossInput { logits: &z, vocab: 2, mask_id: 1, x: &x, m: &m, m_t: &m_t }, W).unwrap();
        assert_eq!(b.n_scored, 2);
        assert_eq!(b.incorrect_set, vec![0]);
        assert_eq!(&g[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn nothing_visible_is_loss_error() {
        let z = logits_for(&[0.5]);
        let m = RetentionMask::zeros(1);
        let r = compute_loss(LossInput { logits: &z, vocab: 2, mask_id: 1, x: &[0], m: &m, m_t: &m }, W);
        assert!(matches!(r, Err(Error::Loss(_))));
    }

    #[test]
    fn stable_at_saturation() {
        let z = vec![0.0, 800.0];
        let m = RetentionMask::ones(1);
        let (b, g) = compute_loss(LossInput { logits: &z, vocab: 2, mask_id: 1, x: &[0], m: &m, m_t: &m }, W).unwrap();
        assert!(b.l_total.is_finite() && g.iter().all(|v| v.is_finite()));
        assert!((b.l_bce - 800.0).abs() < 1e-9);
    }
}
