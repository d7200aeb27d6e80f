//! Central finite-difference check of the hand-written gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{compute_loss_with, LossBreakdown, LossInput, LossWeights};
use crate::model::MaskModel;
use maskpress_core::{RetentionMask, TokenId};

/// One training example in model terms.
#[derive(Debug, Clone)]
pub struct LossSample {
    pub x: Vec<TokenId>,
    pub m: RetentionMask,
    pub m_t: RetentionMask,
}

impl LossSample {
    pub fn x_tilde(&self, mask_id: TokenId) -> Vec<TokenId> {
        self.x.iter().zip(self.m_t.bits()).map(|(&t, &v)| if v { t } else { mask_id }).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub weights: LossWeights,
    pub h: f64,
    pub n_params: usize,
    pub seed: u64,
    /// Restrict sampling to these segments; all parameters when `None`.
    pub segments: Option<Vec<String>>,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights { alpha: 0.8, lambda_mask: 2.0 },
            h: 1e-4,
            n_params: 64,
            seed: 0,
            segments: None,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, analytic, numeric)` for every checked parameter.
    pub checked: Vec<(usize, f64, f64)>,
    pub loss: LossBreakdown,
}

fn loss_at(model: &MaskModel, s: &LossSample, w: LossWeights, frozen: Option<&[usize]>) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let arch = model.arch();
    let (z, cache) = model.forward_cached(&s.x_tilde(arch.mask_id))?;
    let inp = LossInput { logits: &z, vocab: arch.vocab_size, mask_id: arch.mask_id, x: &s.x, m: &s.m, m_t: &s.m_t };
    let (b, dz) = compute_loss_with(inp, w, frozen)?;
    let grad = model.backward(&cache, &dz);
    Ok((b, dz, grad))
}

/// Loss breakdown and full parameter gradient for one sample.
pub fn loss_and_grad(model: &MaskModel, s: &LossSample, w: LossWeights) -> Result<(LossBreakdown, Vec<f64>)> {
    let (b, _, g) = loss_at(model, s, w, None)?;
    Ok((b, g))
}

/// Compares analytic and numeric gradients on a random parameter subset.
///
/// The incorrect set is held at its value for the unperturbed model, so the
/// check measures the gradient of the smooth piece the model sits on.
pub fn grad_check(model: &MaskModel, s: &LossSample, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (base, _, grad) = loss_at(model, s, cfg.weights, None)?;
    let pool: Vec<usize> = match &cfg.segments {
        None => (0..model.n_params()).collect(),
        Some(names) => {
            let mut v = Vec::new();
            for n in names {
                let seg = model.segment(n).ok_or_else(|| Error::Config(format!("no parameter segment {n:?}")))?;
                v.extend(seg.offset..seg.offset + seg.len);
            }
            v
        }
    };
    let n = cfg.n_params.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<usize> = sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picks.sort_unstable();

    let frozen = Some(base.incorrect_set.as_slice());
    let mut work = model.clone();
    let mut checked = Vec::with_capacity(n);
    let mut max_rel: f64 = 0.0;
    for &p in &picks {
        let orig = work.params()[p];
        work.params_mut()[p] = orig + cfg.h;
        let plus = loss_at(&work, s, cfg.weights, frozen)?.0.l_total;
        work.params_mut()[p] = orig - cfg.h;
        let minus = loss_at(&work, s, cfg.weights, frozen)?.0.l_total;
        work.params_mut()[p] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let analytic = grad[p];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        max_rel = max_rel.max(rel);
        checked.push((p, analytic, numeric));
    }
    Ok(GradCheckReport { max_rel_error: max_rel, checked, loss: base })
}
