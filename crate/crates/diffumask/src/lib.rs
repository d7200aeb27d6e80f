//! Mask prediction model trained on full/pruned prompt pairs.
//!
//! A small bidirectional transformer reads a prompt in which some tokens may be
//! replaced by MASK and predicts, per position, a distribution over the
//! vocabulary including MASK. The retention probability of a token is one
//! minus its MASK probability. Inference prunes tokens over several steps.

pub mod checkpoint;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod infer;
mod linalg;
pub mod loss;
pub mod model;
pub mod toy;
pub mod train;
pub mod tuner;

pub use error::{Error, Result};
pub use forward::{forward_process, forward_process_seeded, reveal, ForwardSample};
pub use gradcheck::{grad_check, loss_and_grad, GradCheckConfig, GradCheckReport, LossSample};
pub use infer::{compression_ratio, infer_mask, prune_predicate, step_prune_set, Inference, InferenceConfig, StepTrace};
pub use loss::{compute_loss, LossBreakdown, LossInput, LossWeights, RETAIN_THRESHOLD};
pub use model::{Arch, MaskModel, Segment};
pub use train::{evaluate_masks, train, EpochMetrics, MaskMetrics, Optimizer, StepMetrics, TrainConfig, TrainExample, TrainOutcome};
pub use tuner::{grid_search, read_table, select_row, GridResult, GridRow, GridSpec, Objective, ValidationItem};
