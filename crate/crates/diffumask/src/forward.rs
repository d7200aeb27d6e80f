//! The forward reveal process: pruned positions come back at rate `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use maskpress_core::{apply_mask, MaskMode, RetentionMask, TokenId, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSample {
    pub t: f64,
    pub m_t: RetentionMask,
    /// `x` with every position hidden by `m_t` replaced by the mask id.
    pub x_tilde: TokenSeq,
    /// Pruned in `m` but visible in `m_t`.
    pub revealed: Vec<usize>,
    /// Hidden in `m_t`.
    pub masked: Vec<usize>,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("reveal rate t must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// Reveals each zero of `m` independently with probability `t`.
///
/// Draws exactly one uniform per zero position, in index order.
pub fn reveal<R: Rng + ?Sized>(m: &RetentionMask, t: f64, rng: &mut R) -> Result<RetentionMask> {
    check_t(t)?;
    let bits = m.bits().iter().map(|&keep| keep || rng.gen::<f64>() < t).collect();
    Ok(RetentionMask::new(bits)?)
}

pub fn forward_process<R: Rng + ?Sized>(
    x: &TokenSeq,
    m: &RetentionMask,
    t: f64,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<ForwardSample> {
    if m.len() != x.len() {
        return Err(Error::Shape { expected: x.len(), actual: m.len() });
    }
    let m_t = reveal(m, t, rng)?;
    let x_tilde = apply_mask(x, &m_t, MaskMode::MaskSymbol(mask_id))?;
    let revealed = (0..m.len()).filter(|&i| !m.get(i) && m_t.get(i)).collect();
    let masked = (0..m.len()).filter(|&i| !m_t.get(i)).collect();
    Ok(ForwardSample { t, m_t, x_tilde, revealed, masked })
}

/// [`forward_process`] with a fresh generator seeded from `seed`.
pub fn forward_process_seeded(x: &TokenSeq, m: &RetentionMask, t: f64, mask_id: TokenId, seed: u64) -> Result<ForwardSample> {
    forward_process(x, m, t, mask_id, &mut ChaCha8Rng::seed_from_u64(seed))
}
