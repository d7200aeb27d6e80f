//! Desk-scale training recipe on the synthetic corpus.
//!
//! Pairs come from the dataset pipeline with shot pruning switched off (every
//! exemplar kept), so the model learns token-level pruning only. Only final
//! search states are used.

use maskpress_core::oracle::synth::{generate_synth_corpus, SynthCorpusSpec, SynthOracle, SynthPrompt};
use maskpress_core::pipeline::{build_dataset, PipelineConfig, PipelineItem, ShotStrategy};
use maskpress_core::{PromptPair, Stage};

use crate::error::{Error, Result};
use crate::model::Arch;
use crate::train::{TrainConfig, TrainExample};

#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: Vec<TrainExample>,
    pub heldout: Vec<TrainExample>,
    /// Source prompts of the held-out pairs, in the same order.
    pub heldout_prompts: Vec<SynthPrompt>,
}

pub const TOY_EXEMPLARS: usize = 6;

/// Corpus spec for the toy runs; `seed` picks the corpus.
pub fn toy_corpus_spec(n_prompts: usize, seed: u64) -> SynthCorpusSpec {
    SynthCorpusSpec { n_prompts, n_exemplars: TOY_EXEMPLARS, seed, ..Default::default() }
}

/// Runs the pipeline on `corpus` and returns its final-state pairs by source id.
pub fn final_pairs(corpus: &[SynthPrompt], seed: u64) -> Result<Vec<PromptPair>> {
    let oracles: Vec<SynthOracle> = corpus.iter().map(|p| p.oracle()).collect();
    let items: Vec<PipelineItem> = corpus
        .iter()
        .zip(&oracles)
        .map(|(p, o)| PipelineItem { id: p.id.clone(), prompt: &p.prompt, oracle: o })
        .collect();
    let cfg = PipelineConfig {
        shots: ShotStrategy::FixedK { k: TOY_EXEMPLARS },
        harvest_stride: 0,
        validation_fraction: 0.0,
        seed,
        ..Default::default()
    };
    let ds = build_dataset(&items, &cfg)?;
    let mut pairs: Vec<PromptPair> =
        ds.train.into_iter().chain(ds.validation).filter(|p| p.meta.stage == Stage::TaFinal).collect();
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pairs)
}

/// `n_train` training pairs and `n_heldout` held-out pairs from disjoint corpora.
pub fn toy_data(n_train: usize, n_heldout: usize, seed: u64) -> Result<ToyData> {
    let take = |n: usize, corpus_seed: u64| -> Result<(Vec<SynthPrompt>, Vec<PromptPair>)> {
        let corpus = generate_synth_corpus(&toy_corpus_spec(n, corpus_seed))?;
        let pairs = final_pairs(&corpus, seed)?;
        if pairs.len() != n {
            return Err(Error::Config(format!("only {} of {n} toy prompts produced a final pair", pairs.len())));
        }
        Ok((corpus, pairs))
    };
    let (_, train) = take(n_train, seed.wrapping_mul(2).wrapping_add(1))?;
    let (corpus, held) = take(n_heldout, seed.wrapping_mul(2).wrapping_add(2))?;
    let heldout_prompts = held
        .iter()
        .map(|p| corpus.iter().find(|c| c.id == p.meta.source).cloned().expect("pair source in corpus"))
        .collect();
    Ok(ToyData {
        train: train.iter().map(TrainExample::from_pair).collect(),
        heldout: held.iter().map(TrainExample::from_pair).collect(),
        heldout_prompts,
    })
}

pub fn toy_arch() -> Arch {
    Arch::toy()
}

/// Stock hyperparameters (20 epochs, lr 1e-4, RMSProp) with the given seed.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..Default::default() }
}
