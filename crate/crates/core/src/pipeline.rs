//! Dataset construction: shot selection, token search, filtering, splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{apply_mask, MaskMode, RetentionMask};
use crate::oracle::PerformanceFn;
use crate::record::{write_jsonl, PairMeta, PromptPair, Stage};
use crate::shotprune::{materialize_fewer_shot, prune_shots_fixed_k, prune_shots_variable_k, ShotSelection};
use crate::shots::{project_range, ShotPrompt};
use crate::taprune::{harvest_intermediates, ta_prune, ta_prune_checkpointed, TaConfig, TaTrajectory};
use crate::text::tokenizer_by_name;

/// Maps a mask over a fewer-shot prompt back onto the full prompt.
pub fn compose_masks(full_len: usize, shot_mask: &RetentionMask, token_mask: &RetentionMask) -> Result<RetentionMask> {
    if shot_mask.len() != full_len {
        return Err(Error::shape(full_len, shot_mask.len()));
    }
    if token_mask.len() != shot_mask.retained_count() {
        return Err(Error::shape(shot_mask.retained_count(), token_mask.len()));
    }
    let mut out = RetentionMask::zeros(full_len);
    for (j, i) in shot_mask.retained_indices().enumerate() {
        out.set(i, token_mask.get(j));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRule {
    pub require_beats_full: bool,
    pub require_beats_fewer: bool,
    pub margin: f64,
}

impl Default for FilterRule {
    fn default() -> Self {
        Self { require_beats_full: true, require_beats_fewer: true, margin: 0.0 }
    }
}

impl FilterRule {
    pub fn validate(&self) -> Result<()> {
        if !self.require_beats_full && !self.require_beats_fewer {
            return Err(Error::Config("filter must require beating the full or the fewer-shot prompt".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be >= 0", self.margin)));
        }
        Ok(())
    }

    pub fn accepts(&self, score: f64, full: f64, fewer: f64) -> bool {
        (!self.require_beats_full || score > full + self.margin)
            && (!self.require_beats_fewer || score > fewer + self.margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShotStrategy {
    FixedK { k: usize },
    VariableK { mean_target: f64 },
}

impl Default for ShotStrategy {
    fn default() -> Self {
        ShotStrategy::FixedK { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub shots: ShotStrategy,
    pub ta: TaConfig,
    pub filter: FilterRule,
    /// Harvest every n-th improving search state as an extra pair; 0 disables.
    pub harvest_stride: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub tokenizer: String,
    /// Per-prompt search checkpoints; existing ones are resumed.
    pub checkpoint_dir: Option<PathBuf>,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            shots: ShotStrategy::default(),
            ta: TaConfig::default(),
            filter: FilterRule::default(),
            harvest_stride: 2,
            validation_fraction: 0.1,
            seed: 0,
            tokenizer: crate::text::WORD_TOKENIZER.to_string(),
            checkpoint_dir: None,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.ta.validate()?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if self.jobs < 1 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// A full prompt with the oracle that scores it.
pub struct PipelineItem<'a> {
    pub id: String,
    pub prompt: &'a ShotPrompt,
    pub oracle: &'a (dyn PerformanceFn + Sync),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub id: String,
    pub full_score: f64,
    pub fewer_score: f64,
    pub final_score: f64,
    pub shots_kept: usize,
    pub full_tokens: usize,
    pub final_tokens: usize,
    pub ta_states: usize,
    pub ta_passes: usize,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub stage_counts: BTreeMap<String, usize>,
    pub improved: usize,
    pub trajectory_pairs: usize,
    pub splits: BTreeMap<String, usize>,
    pub prompts: Vec<PromptOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PromptPair>,
    pub validation: Vec<PromptPair>,
    pub test: Vec<PromptPair>,
    pub splits: SplitAssignment,
    pub report: Report,
}

struct ItemResult {
    outcome: PromptOutcome,
    /// Pairs passing the filter (improved prompts only).
    pairs: Vec<PromptPair>,
    /// Baseline records for the test split (non-improved prompts only).
    baselines: Vec<PromptPair>,
    harvested: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the shot selection of the `index`-th prompt.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64))
}

fn checkpoint_name(id: &str) -> String {
    let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.ta.jsonl")
}

fn process(item: &PipelineItem<'_>, index: usize, cfg: &PipelineConfig) -> Result<ItemResult> {
    let p = item.prompt;
    let f = item.oracle;
    let full = &p.base;
    let n = full.len();
    let seed = item_seed(cfg.seed, index);
    let sel: ShotSelection = match &cfg.shots {
        ShotStrategy::FixedK { k } => prune_shots_fixed_k(p, (*k).min(p.shot_count()), seed)?,
        ShotStrategy::VariableK { mean_target } => {
            prune_shots_variable_k(p, mean_target.min(p.shot_count() as f64), seed)?
        }
    };
    let full_score = f.evaluate(full)?.value;
    let (fewer, shot_mask) = materialize_fewer_shot(p, &sel)?;
    let fewer_score = f.evaluate(&fewer)?.value;
    let query = project_range(&shot_mask, p.query.clone()).expect("query is always kept");
    let protected = [query];
    let init = RetentionMask::ones(fewer.len());
    let traj: TaTrajectory = match &cfg.checkpoint_dir {
        Some(dir) => ta_prune_checkpointed(&dir.join(checkpoint_name(&item.id)), &fewer, &init, &protected, f, &cfg.ta)?,
        None => ta_prune(&fewer, &init, &protected, f, &cfg.ta, None)?,
    };

    let meta = |stage, score| PairMeta { stage, score: Some(score), source: item.id.clone() };
    let mut candidates: Vec<(String, Stage, RetentionMask, f64)> = Vec::new();
    if let Some(opt) = traj.optimal_index {
        if cfg.harvest_stride > 0 {
            for (i, st) in harvest_intermediates(&traj, cfg.harvest_stride)? {
                if i != opt {
                    candidates.push((format!("{}/ta_intermediate/{i:04}", item.id), Stage::TaIntermediate, st.mask.clone(), st.score));
                }
            }
        }
        let st = &traj.states[opt];
        candidates.push((format!("{}/ta_final", item.id), Stage::TaFinal, st.mask.clone(), st.score));
    }
    let mut pairs = Vec::new();
    let mut harvested = 0;
    for (id, stage, mask, score) in candidates {
        if !cfg.filter.accepts(score, full_score, fewer_score) {
            continue;
        }
        let composed = compose_masks(n, &shot_mask, &mask)?;
        composed.ensure_nonempty()?;
        harvested += usize::from(stage == Stage::TaIntermediate);
        pairs.push(PromptPair::new(id, full, &cfg.tokenizer, composed, meta(stage, score))?);
    }
    let improved = !pairs.is_empty();
    let mut baselines = Vec::new();
    if !improved {
        baselines.push(PromptPair::new(format!("{}/full", item.id), full, &cfg.tokenizer, RetentionMask::ones(n), meta(Stage::Full, full_score))?);
        baselines.push(PromptPair::new(
            format!("{}/fewer_shot", item.id),
            full,
            &cfg.tokenizer,
            shot_mask.clone(),
            meta(Stage::FewerShot, fewer_score),
        )?);
    }
    let (opt_mask, final_score) = traj.optimal();
    Ok(ItemResult {
        outcome: PromptOutcome {
            id: item.id.clone(),
            full_score,
            fewer_score,
            final_score,
            shots_kept: sel.k_effective(),
            full_tokens: n,
            final_tokens: opt_mask.retained_count(),
            ta_states: traj.states.len(),
            ta_passes: traj.converged_passes,
            improved,
        },
        pairs,
        baselines,
        harvested,
    })
}

fn check_tokenizer(items: &[PipelineItem<'_>], cfg: &PipelineConfig) -> Result<()> {
    let tok = tokenizer_by_name(&cfg.tokenizer)?;
    for it in items {
        let again = crate::text::tokenize(it.prompt.base.source_text(), tok.as_ref())?;
        if again.tokens() != it.prompt.base.tokens() {
            return Err(Error::Config(format!("prompt {} was not tokenized with {:?}", it.id, cfg.tokenizer)));
        }
    }
    Ok(())
}

/// Runs every prompt through the pipeline and assigns splits.
pub fn build_dataset(items: &[PipelineItem<'_>], cfg: &PipelineConfig) -> Result<Dataset> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("no prompts".into()));
    }
    check_tokenizer(items, cfg)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ItemResult>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..cfg.jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = process(item, i, cfg);
                if r.is_err() {
                    next.store(items.len(), Ordering::SeqCst);
                }
                log::debug!("prompt {} done", item.id);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut done = Vec::with_capacity(items.len());
    for r in results.into_inner().unwrap() {
        match r {
            Some(Ok(x)) => done.push(x),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    assemble(done, cfg)
}

fn assemble(done: Vec<ItemResult>, cfg: &PipelineConfig) -> Result<Dataset> {
    let mut improved_ids: Vec<String> = done.iter().filter(|r| r.outcome.improved).map(|r| r.outcome.id.clone()).collect();
    improved_ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5EED_5B17));
    improved_ids.shuffle(&mut rng);
    let n_val = (improved_ids.len() as f64 * cfg.validation_fraction).round() as usize;
    let val_sources: std::collections::HashSet<&String> = improved_ids[..n_val].iter().collect();

    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut outcomes = Vec::new();
    let mut trajectory_pairs = 0;
    for r in done {
        trajectory_pairs += r.harvested;
        if r.outcome.improved {
            if val_sources.contains(&r.outcome.id) {
                validation.extend(r.pairs);
            } else {
                train.extend(r.pairs);
            }
        } else {
            test.extend(r.baselines);
        }
        outcomes.push(r.outcome);
    }
    for v in [&mut train, &mut validation, &mut test] {
        v.sort_by(|a, b| a.id.cmp(&b.id));
    }
    outcomes.sort_by(|a, b| a.id.cmp(&b.id));
    let ids = |v: &[PromptPair]| v.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    let splits = SplitAssignment { train: ids(&train), validation: ids(&validation), test: ids(&test) };

    let improved = outcomes.iter().filter(|o| o.improved).count();
    let mut stage_counts = BTreeMap::new();
    stage_counts.insert("prompts".to_string(), outcomes.len());
    stage_counts.insert("improved".to_string(), improved);
    stage_counts.insert("not_improved".to_string(), outcomes.len() - improved);
    stage_counts.insert("ta_final_pairs".to_string(), train.iter().chain(&validation).filter(|p| p.meta.stage == Stage::TaFinal).count());
    stage_counts.insert("ta_intermediate_pairs".to_string(), trajectory_pairs);
    let mut split_counts = BTreeMap::new();
    split_counts.insert("train".to_string(), train.len());
    split_counts.insert("validation".to_string(), validation.len());
    split_counts.insert("test".to_string(), test.len());
    Ok(Dataset {
        train,
        validation,
        test,
        splits,
        report: Report { stage_counts, improved, trajectory_pairs, splits: split_counts, prompts: outcomes },
    })
}

/// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl`, `splits.json` and `report.json`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train.jsonl"), &ds.train)?;
    write_jsonl(&dir.join("validation.jsonl"), &ds.validation)?;
    write_jsonl(&dir.join("test.jsonl"), &ds.test)?;
    let mut splits = serde_json::to_string_pretty(&ds.splits)?;
    splits.push('\n');
    std::fs::write(dir.join("splits.json"), splits)?;
    let mut report = serde_json::to_string_pretty(&ds.report)?;
    report.push('\n');
    std::fs::write(dir.join("report.json"), report)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    Word,
    Numeral,
    Punctuation,
    Symbol,
    Whitespace,
    Other,
}

impl TokenCategory {
    pub const ALL: [TokenCategory; 6] = [
        TokenCategory::Word,
        TokenCategory::Numeral,
        TokenCategory::Punctuation,
        TokenCategory::Symbol,
        TokenCategory::Whitespace,
        TokenCategory::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenCategory::Word => "word",
            TokenCategory::Numeral => "numeral",
            TokenCategory::Punctuation => "punctuation",
            TokenCategory::Symbol => "symbol",
            TokenCategory::Whitespace => "whitespace",
            TokenCategory::Other => "other",
        }
    }
}

const PUNCTUATION: &str = ".,;:!?'\"()[]{}-";

/// Character-class rule:
/// whitespace if all whitespace; numeral if all digits; word if alphanumeric
/// or `_` with at least one letter; punctuation if all in `.,;:!?'"()[]{}-`;
/// symbol if all other ASCII punctuation (or a mix with the punctuation set);
/// anything else is other.
pub fn classify_token(text: &str) -> TokenCategory {
    if text.is_empty() {
        return TokenCategory::Other;
    }
    if text.chars().all(char::is_whitespace) {
        TokenCategory::Whitespace
    } else if text.chars().all(|c| c.is_numeric()) {
        TokenCategory::Numeral
    } else if text.chars().all(|c| c.is_alphanumeric() || c == '_') && text.chars().any(char::is_alphabetic) {
        TokenCategory::Word
    } else if text.chars().all(|c| PUNCTUATION.contains(c)) {
        TokenCategory::Punctuation
    } else if text.chars().all(|c| c.is_ascii_punctuation()) {
        TokenCategory::Symbol
    } else {
        TokenCategory::Other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub rule: String,
    pub all_counts: BTreeMap<String, usize>,
    pub removed_counts: BTreeMap<String, usize>,
    pub all_freq: BTreeMap<String, f64>,
    pub removed_freq: BTreeMap<String, f64>,
    /// Total-variation distance between the two distributions; null when
    /// nothing was removed.
    pub tv_distance: Option<f64>,
}

/// Category distribution of all tokens versus removed tokens.
pub fn analyze_token_categories(pairs: &[PromptPair]) -> Result<CategoryReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to analyze".into()));
    }
    let mut all = BTreeMap::new();
    let mut removed = BTreeMap::new();
    for c in TokenCategory::ALL {
        all.insert(c.name().to_string(), 0usize);
        removed.insert(c.name().to_string(), 0usize);
    }
    for p in pairs {
        let tok = tokenizer_by_name(&p.tokenizer)?;
        let seq = p.token_seq(tok.as_ref())?;
        for i in 0..seq.len() {
            let c = classify_token(&seq.token_text(i)).name().to_string();
            *all.get_mut(&c).unwrap() += 1;
            if !p.mask.get(i) {
                *removed.get_mut(&c).unwrap() += 1;
            }
        }
    }
    let freq = |m: &BTreeMap<String, usize>| {
        let total: usize = m.values().sum();
        m.iter()
            .map(|(k, &v)| (k.clone(), if total == 0 { 0.0 } else { v as f64 / total as f64 }))
            .collect::<BTreeMap<_, _>>()
    };
    let all_freq = freq(&all);
    let removed_freq = freq(&removed);
    let tv_distance = (removed.values().sum::<usize>() > 0)
        .then(|| 0.5 * all_freq.iter().map(|(k, a)| (a - removed_freq[k]).abs()).sum::<f64>());
    Ok(CategoryReport {
        rule: "whitespace: all whitespace; numeral: all digits; word: alphanumeric or _ with a letter; \
               punctuation: all in .,;:!?'\"()[]{}-; symbol: other ASCII punctuation; other: anything else"
            .to_string(),
        all_counts: all,
        removed_counts: removed,
        all_freq,
        removed_freq,
        tv_distance,
    })
}

/// Re-scores a pair's pruned prompt.
pub fn rescore_pair(pair: &PromptPair, f: &dyn PerformanceFn) -> Result<f64> {
    let tok = tokenizer_by_name(&pair.tokenizer)?;
    let seq = pair.token_seq(tok.as_ref())?;
    Ok(f.evaluate(&apply_mask(&seq, &pair.mask, MaskMode::Delete)?)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize, WordTokenizer};

    #[test]
    fn compose_identity_and_hand_example() {
        let shot = RetentionMask::new((0..20).map(|i| i >= 10).collect()).unwrap();
        let ones = RetentionMask::ones(10);
        assert_eq!(compose_masks(20, &shot, &ones).unwrap(), shot);
        let mut tok = RetentionMask::ones(10);
        tok.set(0, false);
        let out = compose_masks(20, &shot, &tok).unwrap();
        assert_eq!(out.retained_indices().collect::<Vec<_>>(), (11..20).collect::<Vec<_>>());
        assert_eq!(compose_masks(4, &RetentionMask::ones(4), &RetentionMask::ones(4)).unwrap(), RetentionMask::ones(4));
        assert!(matches!(compose_masks(20, &shot, &RetentionMask::ones(9)), Err(Error::Shape { .. })));
    }

    #[test]
    fn filter_needs_a_requirement() {
        let f = FilterRule { require_beats_full: false, require_beats_fewer: false, margin: 0.0 };
        assert!(matches!(f.validate(), Err(Error::Config(_))));
        let f = FilterRule::default();
        assert!(!f.accepts(0.5, 0.5, 0.1));
        assert!(f.accepts(0.6, 0.5, 0.1));
    }

    fn pair(text: &str, bits: &[u8]) -> PromptPair {
        let seq = tokenize(text, &WordTokenizer::default()).unwrap();
        let meta = PairMeta { stage: Stage::Full, score: None, source: "x".into() };
        PromptPair::new("x".into(), &seq, "word", RetentionMask::from_bits(bits).unwrap(), meta).unwrap()
    }

    #[test]
    fn categories_hand_example() {
        let r = analyze_token_categories(&[pair("a 1 , b", &[1, 1, 1, 1, 0, 1, 1])]).unwrap();
        assert_eq!(r.removed_freq["punctuation"], 1.0);
        assert_eq!(r.all_counts["whitespace"], 3);
        assert_eq!(r.all_counts["numeral"], 1);
        let tv = r.tv_distance.unwrap();
        assert!((tv - (1.0 - 1.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn nothing_removed_gives_null_tv() {
        let r = analyze_token_categories(&[pair("a b", &[1, 1, 1])]).unwrap();
        assert_eq!(r.tv_distance, None);
    }

    #[test]
    fn classification_rules() {
        assert_eq!(classify_token("Fact"), TokenCategory::Word);
        assert_eq!(classify_token("x2"), TokenCategory::Word);
        assert_eq!(classify_token("42"), TokenCategory::Numeral);
        assert_eq!(classify_token("?"), TokenCategory::Punctuation);
        assert_eq!(classify_token("$"), TokenCategory::Symbol);
        assert_eq!(classify_token("\n\n"), TokenCategory::Whitespace);
        assert_eq!(classify_token("é"), TokenCategory::Word);
        assert_eq!(classify_token("€"), TokenCategory::Other);
    }
}
