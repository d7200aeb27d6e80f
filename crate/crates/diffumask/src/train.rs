//! Single-threaded, seed-deterministic training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::reveal;
use crate::gradcheck::{loss_and_grad, LossSample};
use crate::loss::{LossWeights, RETAIN_THRESHOLD};
use crate::model::MaskModel;
use maskpress_core::{PromptPair, RetentionMask, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Momentum-free per-parameter scaling by a running RMS of gradients.
    RmsProp { decay: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::RmsProp { decay: 0.99, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda_mask: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            lambda_mask: 2.0,
            lr: 1e-4,
            warmup_steps: 100,
            epochs: 20,
            max_seq_len: 512,
            batch_size: 1,
            seed: 0,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, lambda_mask: self.lambda_mask }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("lr, epochs, batch_size and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then linear decay towards zero at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        self.lr * (total + 1).saturating_sub(step) as f64 / span
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub x: Vec<TokenId>,
    pub m: RetentionMask,
}

impl TrainExample {
    pub fn from_pair(p: &PromptPair) -> Self {
        Self { x: p.tokens.clone(), m: p.mask.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub t: f64,
    pub l_bce: f64,
    pub l_anti: f64,
    pub l_total: f64,
}

/// Hard-decision mask quality. The positive class is "retained".
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of label-0 positions predicted removed.
    pub removed_recall: f64,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: Option<f64>,
    pub heldout: Option<MaskMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MaskModel,
    pub steps: Vec<StepMetrics>,
    /// Entry 0 is the untrained model.
    pub epochs: Vec<EpochMetrics>,
    pub skipped: usize,
}

/// Counts `r >= 0.5` as retained after one forward pass over the full prompt.
pub fn evaluate_masks(model: &MaskModel, examples: &[TrainExample]) -> Result<MaskMetrics> {
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for ex in examples {
        let r = model.retention(&ex.x)?;
        for (ri, &label) in r.iter().zip(ex.m.bits()) {
            match (*ri >= RETAIN_THRESHOLD, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => tn += 1,
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(MaskMetrics { precision, recall, f1, removed_recall: ratio(tn, tn + fp), n_tokens: tp + fp + fneg + tn })
}

struct OptState {
    v: Vec<f64>,
    m: Vec<f64>,
    t: i32,
}

impl OptState {
    fn step(&mut self, opt: Optimizer, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match opt {
            Optimizer::RmsProp { decay, eps } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.v) {
                    *v = decay * *v + (1.0 - decay) * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), v), m) in params.iter_mut().zip(grad).zip(&mut self.v).zip(&mut self.m) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Trains in place on `train`, evaluating on `heldout` after every epoch.
///
/// Pairs longer than `cfg.max_seq_len` (or the model's limit) are skipped
/// with a warning. Metrics lines go to `metrics` as JSON Lines. Final
/// parameters are rounded to f32 so a checkpoint reproduces them exactly.
pub fn train(
    model: MaskModel,
    train: &[TrainExample],
    heldout: &[TrainExample],
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let limit = cfg.max_seq_len.min(model.arch().max_seq_len);
    let usable: Vec<&TrainExample> = train
        .iter()
        .filter(|ex| {
            let ok = !ex.x.is_empty() && ex.x.len() <= limit && ex.m.len() == ex.x.len();
            if !ok {
                log::warn!("skipping training pair of length {} (limit {limit})", ex.x.len());
            }
            ok
        })
        .collect();
    let skipped = train.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Config("no usable training pairs".into()));
    }
    let heldout: Vec<TrainExample> = heldout.iter().filter(|ex| ex.x.len() <= limit).cloned().collect();
    let eval = |m: &MaskModel| -> Result<Option<MaskMetrics>> {
        if heldout.is_empty() {
            Ok(None)
        } else {
            evaluate_masks(m, &heldout).map(Some)
        }
    };

    let mut model = model;
    let w = cfg.weights();
    let per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState { v: vec![0.0; model.n_params()], m: vec![0.0; model.n_params()], t: 0 };
    let mut steps = Vec::with_capacity(total);
    let mut epochs = vec![EpochMetrics { epoch: 0, mean_loss: None, heldout: eval(&model)? }];
    let mut step = 0;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 1..=cfg.epochs {
        let last_good = model.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut grad = vec![0.0; model.n_params()];
            let mut acc = StepMetrics { step, t: 0.0, l_bce: 0.0, l_anti: 0.0, l_total: 0.0 };
            let mut counted = 0usize;
            for &i in batch {
                let ex = usable[i];
                let t: f64 = rng.gen();
                let m_t = reveal(&ex.m, t, &mut rng)?;
                let sample = LossSample { x: ex.x.clone(), m: ex.m.clone(), m_t };
                let (b, g) = match loss_and_grad(&model, &sample, w) {
                    Ok(v) => v,
                    // Everything hidden: nothing to score for this draw.
                    Err(Error::Loss(_)) => continue,
                    Err(e) => return Err(e),
                };
                if !b.l_total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { step, last_good: Box::new(last_good) });
                }
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
                acc.t += t;
                acc.l_bce += b.l_bce;
                acc.l_anti += b.l_anti_mask;
                acc.l_total += b.l_total;
                counted += 1;
            }
            if counted > 0 {
                let k = counted as f64;
                grad.iter_mut().for_each(|g| *g /= k);
                acc.t /= k;
                acc.l_bce /= k;
                acc.l_anti /= k;
                acc.l_total /= k;
                opt.step(cfg.optimizer, model.params_mut(), &grad, cfg.lr_at(step, total));
                if model.params().iter().any(|p| !p.is_finite()) {
                    return Err(Error::Diverged { step, last_good: Box::new(last_good) });
                }
            }
            loss_sum += acc.l_total;
            if let Some(out) = metrics.as_deref_mut() {
                serde_json::to_writer(&mut *out, &acc)?;
                out.write_all(b"\n")?;
            }
            steps.push(acc);
        }
        let em = EpochMetrics { epoch, mean_loss: Some(loss_sum / per_epoch as f64), heldout: eval(&model)? };
        log::info!("epoch {epoch}: mean loss {:.4}, held-out {:?}", em.mean_loss.unwrap_or(f64::NAN), em.heldout);
        epochs.push(em);
    }
    if let Some(out) = metrics.as_deref_mut() {
        out.flush()?;
    }
    model.snap_to_f32();
    Ok(TrainOutcome { model, steps, epochs, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = TrainConfig { lr: 1.0, warmup_steps: 10, ..Default::default() };
        assert_eq!(c.lr_at(5, 110), 0.5);
        assert_eq!(c.lr_at(10, 110), 1.0);
        assert!(c.lr_at(60, 110) < 1.0 && c.lr_at(60, 110) > c.lr_at(100, 110));
        assert!(c.lr_at(110, 110) > 0.0);
    }
}
