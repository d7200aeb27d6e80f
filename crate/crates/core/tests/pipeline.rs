use std::collections::HashSet;

use maskpress_core::oracle::synth::{generate_synth_corpus, read_corpus, write_corpus, SynthCorpusSpec, SynthOracle, SynthPrompt};
use maskpress_core::pipeline::{analyze_token_categories, build_dataset, rescore_pair, write_dataset, Dataset, FilterRule, PipelineConfig, PipelineItem, ShotStrategy};
use maskpress_core::record::{read_jsonl, Stage};
use maskpress_core::{segment_shots, Error, WordTokenizer};

fn corpus(n: usize, seed: u64) -> Vec<SynthPrompt> {
    let spec = SynthCorpusSpec { n_prompts: n, n_exemplars: 6, seed, ..Default::default() };
    generate_synth_corpus(&spec).unwrap()
}

fn run(corpus: &[SynthPrompt], cfg: &PipelineConfig) -> maskpress_core::Result<Dataset> {
    let oracles: Vec<SynthOracle> = corpus.iter().map(|p| p.oracle()).collect();
    let items: Vec<PipelineItem> = corpus
        .iter()
        .zip(&oracles)
        .map(|(p, o)| PipelineItem { id: p.id.clone(), prompt: &p.prompt, oracle: o })
        .collect();
    build_dataset(&items, cfg)
}

fn cfg() -> PipelineConfig {
    PipelineConfig { shots: ShotStrategy::FixedK { k: 4 }, seed: 3, validation_fraction: 0.25, ..Default::default() }
}

#[test]
fn every_emitted_pair_beats_its_baselines() {
    let c = corpus(20, 1);
    let ds = run(&c, &cfg()).unwrap();
    assert!(!ds.train.is_empty());
    for pair in ds.train.iter().chain(&ds.validation) {
        let sp = c.iter().find(|p| p.id == pair.meta.source).unwrap();
        let f = sp.oracle();
        let outcome = ds.report.prompts.iter().find(|o| o.id == sp.id).unwrap();
        let score = rescore_pair(pair, &f).unwrap();
        assert_eq!(Some(score), pair.meta.score);
        assert!(score > outcome.full_score && score > outcome.fewer_score, "{}", pair.id);
    }
}

#[test]
fn splits_are_disjoint_and_counts_add_up() {
    let c = corpus(20, 2);
    let ds = run(&c, &cfg()).unwrap();
    let src = |ids: &[String]| ids.iter().map(|i| i.split('/').next().unwrap().to_string()).collect::<HashSet<_>>();
    let (tr, va, te) = (src(&ds.splits.train), src(&ds.splits.validation), src(&ds.splits.test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(ds.report.stage_counts["improved"] + ds.report.stage_counts["not_improved"], 20);
    assert_eq!(ds.report.stage_counts["prompts"], 20);
    assert!(ds.test.iter().all(|p| matches!(p.meta.stage, Stage::Full | Stage::FewerShot)));
    assert_eq!(ds.test.len(), 2 * ds.report.stage_counts["not_improved"]);
}

#[test]
fn unbeatable_prompts_go_to_test() {
    // Without hedges nothing can beat the full prompt.
    let spec = SynthCorpusSpec { n_prompts: 5, n_exemplars: 4, spoiler_rate: 0.0, spoil_final_shot: false, seed: 4, ..Default::default() };
    let c = generate_synth_corpus(&spec).unwrap();
    let ds = run(&c, &cfg()).unwrap();
    assert!(ds.train.is_empty() && ds.validation.is_empty());
    assert_eq!(ds.test.len(), 10);
    assert_eq!(ds.report.improved, 0);
}

#[test]
fn disabled_filter_is_config_error() {
    let c = corpus(2, 1);
    let mut cfg = cfg();
    cfg.filter = FilterRule { require_beats_full: false, require_beats_fewer: false, margin: 0.0 };
    assert!(matches!(run(&c, &cfg), Err(Error::Config(_))));
}

#[test]
fn output_is_deterministic_and_parallel_safe() {
    let c = corpus(12, 5);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    write_dataset(&a, &run(&c, &cfg()).unwrap()).unwrap();
    let par = PipelineConfig { jobs: 4, ..cfg() };
    write_dataset(&b, &run(&c, &par).unwrap()).unwrap();
    for f in ["train.jsonl", "validation.jsonl", "test.jsonl", "report.json", "splits.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let back = read_jsonl(&a.join("train.jsonl")).unwrap();
    assert_eq!(back, run(&c, &cfg()).unwrap().train);
}

#[test]
fn intermediates_are_harvested_and_filtered() {
    let c = corpus(10, 6);
    // Keeping every shot makes each improving state beat the full prompt.
    let ds = run(&c, &PipelineConfig { harvest_stride: 1, shots: ShotStrategy::FixedK { k: 6 }, ..cfg() }).unwrap();
    let inter: Vec<_> = ds.train.iter().chain(&ds.validation).filter(|p| p.meta.stage == Stage::TaIntermediate).collect();
    assert!(!inter.is_empty());
    assert_eq!(ds.report.trajectory_pairs, inter.len());
}

#[test]
fn category_report_on_corpus() {
    let c = corpus(6, 7);
    let ds = run(&c, &cfg()).unwrap();
    let r = analyze_token_categories(&ds.train).unwrap();
    let tv = r.tv_distance.unwrap();
    assert!((0.0..=1.0).contains(&tv));
}

#[test]
fn corpus_file_segments_back_into_exemplars() {
    let spec = SynthCorpusSpec { n_prompts: 3, n_exemplars: 5, seed: 9, ..Default::default() };
    let c = generate_synth_corpus(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_corpus(&path, &c).unwrap();
    for (sp, back) in c.iter().zip(read_corpus(&path).unwrap()) {
        let text = sp.prompt.base.source_text();
        let expected: Vec<&str> = text.split("\n\n").collect();
        let seg = segment_shots(text, "\n\n", &WordTokenizer::default()).unwrap();
        assert_eq!(seg.shot_count(), 5);
        for i in 0..5 {
            assert_eq!(seg.shot_text(i), expected[i]);
        }
        assert_eq!(back, *sp);
    }
}
