//! Performance functions used to score (pruned) prompts.

pub mod llm;
pub mod synth;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TokenSeq;

/// Fraction of evaluation queries answered correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub n_queries: usize,
    pub detail: Vec<bool>,
}

impl Score {
    pub fn from_detail(detail: Vec<bool>) -> Result<Self> {
        if detail.is_empty() {
            return Err(Error::Scoring("at least one query is required".into()));
        }
        let correct = detail.iter().filter(|&&b| b).count();
        Ok(Self { value: correct as f64 / detail.len() as f64, n_queries: detail.len(), detail })
    }

    /// A score known only by value (e.g. reloaded from a checkpoint).
    pub fn from_value(value: f64) -> Self {
        Self { value, n_queries: 0, detail: Vec::new() }
    }
}

/// Scores a prompt. Implementations must be deterministic within one search.
pub trait PerformanceFn {
    fn evaluate(&self, prompt: &TokenSeq) -> Result<Score>;
}

impl<F: PerformanceFn + ?Sized> PerformanceFn for &F {
    fn evaluate(&self, prompt: &TokenSeq) -> Result<Score> {
        (**self).evaluate(prompt)
    }
}

impl<F: PerformanceFn + ?Sized> PerformanceFn for Box<F> {
    fn evaluate(&self, prompt: &TokenSeq) -> Result<Score> {
        (**self).evaluate(prompt)
    }
}

/// Wraps an oracle and fails once a call budget is exhausted.
///
/// Used to simulate an interrupted search in crash-recovery tests and runs.
pub struct EvalBudget<F> {
    inner: F,
    remaining: Arc<AtomicUsize>,
}

impl<F> EvalBudget<F> {
    pub fn new(inner: F, calls: usize) -> Self {
        Self::shared(inner, Arc::new(AtomicUsize::new(calls)))
    }

    /// Several oracles drawing from one budget.
    pub fn shared(inner: F, remaining: Arc<AtomicUsize>) -> Self {
        Self { inner, remaining }
    }
}

impl<F: PerformanceFn> PerformanceFn for EvalBudget<F> {
    fn evaluate(&self, prompt: &TokenSeq) -> Result<Score> {
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .map_err(|_| Error::Aborted("evaluation budget exhausted".into()))?;
        self.inner.evaluate(prompt)
    }
}
