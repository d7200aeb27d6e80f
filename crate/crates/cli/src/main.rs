//! `maskpress`: build compression datasets, train the mask model, compress prompts.

mod config;
mod error;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicUsize;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maskpress_core::oracle::llm::{EndpointConfig, EvalItem, LlmOracle};
use maskpress_core::oracle::synth::{generate_synth_corpus, read_corpus, write_corpus, SynthPrompt};
use maskpress_core::oracle::EvalBudget;
use maskpress_core::pipeline::{analyze_token_categories, build_dataset, write_dataset, PipelineItem, ShotStrategy};
use maskpress_core::record::read_jsonl;
use maskpress_core::{apply_mask, tokenize, tokenizer_by_name, MaskMode, PerformanceFn, PromptPair, Tokenizer, WordTokenizer};
use maskpress_diffumask::{checkpoint, grid_search, infer_mask, train, MaskModel, TrainExample, ValidationItem};

use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "maskpress", version, about = "Prompt compression by learned retention masks")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic few-shot corpus.
    SynthCorpus(SynthArgs),
    /// Prune every corpus prompt and write training pairs, splits and a report.
    BuildDataset(DatasetArgs),
    /// Train the mask model on a dataset directory.
    Train(TrainArgs),
    /// Compress one prompt with a trained model.
    Compress(CompressArgs),
    /// Grid-search top-k and tau on the validation split.
    GridSearch(GridArgs),
    /// Token category distribution of removed versus all tokens.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output corpus file (JSON Lines).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_prompts: Option<usize>,
    #[arg(long)]
    n_exemplars: Option<usize>,
    #[arg(long)]
    spoiler_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum OracleKind {
    /// Deterministic answerer built from the corpus labels.
    Synth,
    /// OpenAI-compatible endpoint from MASKPRESS_API_BASE / MASKPRESS_API_KEY.
    Llm,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, value_enum, default_value = "synth")]
    oracle: OracleKind,
    /// Questions with gold answers (JSON Lines of {"question", "gold"}); llm oracle only.
    #[arg(long)]
    eval_set: Option<PathBuf>,
    /// Model name sent to the endpoint; llm oracle only.
    #[arg(long, default_value = "default")]
    llm_model: String,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Corpus file from `synth-corpus`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-prompt search checkpoints; existing ones are resumed.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep exactly this many exemplars per prompt.
    #[arg(long, conflicts_with = "mean_k")]
    k: Option<usize>,
    /// Keep a random number of exemplars with this mean.
    #[arg(long)]
    mean_k: Option<f64>,
    /// Threshold acceptance factor.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    harvest_stride: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Stop after this many oracle evaluations (exit 4); rerun to resume.
    #[arg(long)]
    abort_after_evals: Option<usize>,
    #[command(flatten)]
    oracle: OracleArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with train.jsonl and optionally validation.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step loss log (JSON Lines).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    per_step_cap: Option<usize>,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// File holding the prompt.
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
    /// The prompt itself.
    #[arg(long)]
    text: Option<String>,
    /// Where to write the pruned prompt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the mask and ratio as JSON.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long, default_value = "word")]
    tokenizer: String,
    #[command(flatten)]
    infer: InferArgs,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory; its validation.jsonl supplies the prompts.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Corpus the dataset was built from (synth oracle).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Result table (CSV); an existing partial table is resumed.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    top_k: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    oracle: OracleArgs,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Pair files (JSON Lines).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("maskpress: {e}");
            e.code()
        }
    };
    std::process::exit(code);
}

fn init_logging(level: u8) {
    let filter = match level {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(filter)).try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref());
    let verbosity = cli.verbose.max(cfg.as_ref().ok().and_then(|c| c.global.verbosity).unwrap_or(0));
    init_logging(verbosity);
    let mut cfg = cfg?;
    match cli.command {
        Command::SynthCorpus(a) => cmd_synth(&mut cfg, a),
        Command::BuildDataset(a) => cmd_build(&mut cfg, a),
        Command::Train(a) => cmd_train(&mut cfg, a),
        Command::Compress(a) => cmd_compress(&mut cfg, a),
        Command::GridSearch(a) => cmd_grid(&mut cfg, a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn existing(p: &Path, what: &str) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} {} does not exist", p.display())))
    }
}

fn log_resolved<T: Serialize>(section: &str, value: &T) {
    log::info!("resolved [{section}] {}", serde_json::to_string(value).unwrap_or_default());
}

fn cmd_synth(cfg: &mut RunConfig, a: SynthArgs) -> Result<(), CliError> {
    let out = required(a.out, "out")?;
    let spec = &mut cfg.synth;
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.n_prompts {
        spec.n_prompts = v;
    }
    if let Some(v) = a.n_exemplars {
        spec.n_exemplars = v;
    }
    if let Some(v) = a.spoiler_rate {
        spec.spoiler_rate = v;
    }
    log_resolved("synth", spec);
    let corpus = generate_synth_corpus(spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_corpus(&out, &corpus)?;
    println!("wrote {} prompts to {}", corpus.len(), out.display());
    Ok(())
}

/// One oracle per corpus prompt, in corpus order.
fn make_oracles(corpus: &[SynthPrompt], o: &OracleArgs) -> Result<Vec<Box<dyn PerformanceFn + Sync>>, CliError> {
    match o.oracle {
        OracleKind::Synth => Ok(corpus.iter().map(|p| Box::new(p.oracle()) as Box<dyn PerformanceFn + Sync>).collect()),
        OracleKind::Llm => {
            let path = required(o.eval_set.clone(), "eval-set")?;
            existing(&path, "eval set")?;
            let items: Vec<EvalItem> = std::fs::read_to_string(&path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Config(format!("eval set {}: {e}", path.display())))?;
            let endpoint = EndpointConfig::from_env(o.llm_model.clone())?;
            log_resolved("oracle", &endpoint);
            Ok(corpus
                .iter()
                .map(|_| {
                    Box::new(LlmOracle { endpoint: endpoint.clone(), eval_set: items.clone() }) as Box<dyn PerformanceFn + Sync>
                })
                .collect())
        }
    }
}

fn load_corpus(path: Option<PathBuf>) -> Result<Vec<SynthPrompt>, CliError> {
    let path = required(path, "corpus")?;
    existing(&path, "corpus")?;
    Ok(read_corpus(&path)?)
}

fn cmd_build(cfg: &mut RunConfig, a: DatasetArgs) -> Result<(), CliError> {
    let corpus = load_corpus(a.corpus)?;
    let out = required(a.out, "out")?;
    let d = &mut cfg.dataset;
    if let Some(v) = a.checkpoint_dir {
        d.checkpoint_dir = Some(v);
    }
    if let Some(v) = a.jobs {
        d.jobs = v;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if let Some(k) = a.k {
        d.shots = ShotStrategy::FixedK { k };
    }
    if let Some(mean_target) = a.mean_k {
        d.shots = ShotStrategy::VariableK { mean_target };
    }
    if let Some(v) = a.delta {
        d.ta.delta = v;
    }
    if let Some(v) = a.harvest_stride {
        d.harvest_stride = v;
    }
    if let Some(v) = a.validation_fraction {
        d.validation_fraction = v;
    }
    log_resolved("dataset", d);
    let oracles = make_oracles(&corpus, &a.oracle)?;
    let remaining = Arc::new(AtomicUsize::new(a.abort_after_evals.unwrap_or(usize::MAX)));
    let budgets: Vec<EvalBudget<&(dyn PerformanceFn + Sync)>> =
        oracles.iter().map(|o| EvalBudget::shared(o.as_ref(), remaining.clone())).collect();
    let items: Vec<PipelineItem> = corpus
        .iter()
        .zip(&budgets)
        .map(|(p, o)| PipelineItem { id: p.id.clone(), prompt: &p.prompt, oracle: o })
        .collect();
    println!("building dataset from {} prompts", items.len());
    let ds = build_dataset(&items, d)?;
    write_dataset(&out, &ds)?;
    let r = &ds.report;
    println!(
        "improved {} of {} prompts; {} train, {} validation, {} test records in {}",
        r.improved,
        corpus.len(),
        ds.train.len(),
        ds.validation.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<PromptPair>, CliError> {
    if path.exists() {
        Ok(read_jsonl(path)?)
    } else {
        Ok(Vec::new())
    }
}

fn check_vocab(model: &MaskModel, pairs: &[PromptPair]) -> Result<(), CliError> {
    let a = model.arch();
    for p in pairs {
        if let Some(&t) = p.tokens.iter().find(|&&t| t as usize >= a.vocab_size || t == a.mask_id) {
            return Err(CliError::Config(format!(
                "pair {} has token id {t}, outside the model vocabulary of {} with mask id {}",
                p.id, a.vocab_size, a.mask_id
            )));
        }
    }
    Ok(())
}

fn cmd_train(cfg: &mut RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let data = required(a.data, "data")?;
    let out = required(a.out, "out")?;
    let train_path = data.join("train.jsonl");
    existing(&train_path, "training pairs")?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    log_resolved("model", &cfg.model);
    log_resolved("train", &cfg.train);
    let pairs = read_pairs(&train_path)?;
    let held = read_pairs(&data.join("validation.jsonl"))?;
    if pairs.is_empty() {
        return Err(CliError::Config(format!("{} holds no pairs", train_path.display())));
    }
    let model = MaskModel::new(cfg.model, cfg.train.seed, 0.02)?;
    check_vocab(&model, &pairs)?;
    check_vocab(&model, &held)?;
    println!("training {} parameters on {} pairs ({} held out)", model.n_params(), pairs.len(), held.len());
    let ex: Vec<TrainExample> = pairs.iter().map(TrainExample::from_pair).collect();
    let hx: Vec<TrainExample> = held.iter().map(TrainExample::from_pair).collect();
    let mut metrics = match &a.metrics {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let outcome = train(model, &ex, &hx, &cfg.train, metrics.as_mut().map(|w| w as &mut dyn std::io::Write))?;
    for e in &outcome.epochs {
        match (e.mean_loss, e.heldout) {
            (Some(l), Some(h)) => println!("epoch {:>3}  loss {l:.5}  held-out F1 {:.4}", e.epoch, h.f1),
            (Some(l), None) => println!("epoch {:>3}  loss {l:.5}", e.epoch),
            (None, Some(h)) => println!("epoch {:>3}  held-out F1 {:.4}", e.epoch, h.f1),
            (None, None) => {}
        }
    }
    checkpoint::save(&outcome.model, &out)?;
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn load_model(path: Option<PathBuf>) -> Result<MaskModel, CliError> {
    let path = required(path, "checkpoint")?;
    existing(&path, "checkpoint")?;
    Ok(checkpoint::load(&path)?)
}

fn apply_infer_args(cfg: &mut RunConfig, a: &InferArgs) {
    let i = &mut cfg.inference;
    if let Some(v) = a.steps {
        i.steps = v;
    }
    if let Some(v) = a.top_k {
        i.top_k = v;
    }
    if let Some(v) = a.tau {
        i.tau = v;
    }
    if let Some(v) = a.per_step_cap {
        i.per_step_cap = Some(v);
    }
}

/// The tokenizer matching the model's vocabulary.
fn tokenizer_for(name: &str, model: &MaskModel) -> Result<Arc<dyn Tokenizer>, CliError> {
    let a = model.arch();
    let tok: Arc<dyn Tokenizer> = if name == "word" {
        Arc::new(WordTokenizer::new(a.vocab_size as u32)?)
    } else {
        tokenizer_by_name(name)?
    };
    if tok.vocab_size() as usize != a.vocab_size || tok.mask_id() != a.mask_id {
        return Err(CliError::Config(format!("tokenizer {name:?} does not match the model vocabulary")));
    }
    Ok(tok)
}

#[derive(Serialize)]
struct MaskReport<'a> {
    tokens: &'a [u32],
    mask: Vec<u8>,
    retained: usize,
    total: usize,
    compression_ratio: f64,
}

fn cmd_compress(cfg: &mut RunConfig, a: CompressArgs) -> Result<(), CliError> {
    let model = load_model(a.checkpoint)?;
    let text = match (a.text, a.input) {
        (Some(t), _) => t,
        (None, Some(p)) => {
            existing(&p, "input")?;
            std::fs::read_to_string(&p)?
        }
        (None, None) => return Err(CliError::Config("one of --text or --input is required".into())),
    };
    apply_infer_args(cfg, &a.infer);
    log_resolved("inference", &cfg.inference);
    let tok = tokenizer_for(&a.tokenizer, &model)?;
    let seq = tokenize(&text, tok.as_ref())?;
    if seq.is_empty() {
        return Err(CliError::Config("prompt is empty".into()));
    }
    let inf = infer_mask(&model, seq.tokens(), &cfg.inference)?;
    let pruned = apply_mask(&seq, &inf.mask, MaskMode::Delete)?;
    let ratio = inf.compression_ratio();
    if let Some(p) = &a.out {
        std::fs::write(p, pruned.source_text())?;
    }
    if let Some(p) = &a.mask_out {
        let rep = MaskReport {
            tokens: seq.tokens(),
            mask: inf.mask.to_u8(),
            retained: inf.mask.retained_count(),
            total: seq.len(),
            compression_ratio: ratio,
        };
        let mut body = serde_json::to_string_pretty(&rep)?;
        body.push('\n');
        std::fs::write(p, body)?;
    }
    println!("compression ratio: {ratio:.6} (kept {} of {} tokens, {} steps)", inf.mask.retained_count(), seq.len(), inf.trace.len());
    Ok(())
}

fn cmd_grid(cfg: &mut RunConfig, a: GridArgs) -> Result<(), CliError> {
    let model = load_model(a.checkpoint)?;
    let data = required(a.data, "data")?;
    let val_path = data.join("validation.jsonl");
    existing(&val_path, "validation pairs")?;
    let corpus = load_corpus(a.corpus)?;
    if let Some(v) = a.top_k {
        cfg.grid.top_k_values = v;
    }
    if let Some(v) = a.tau {
        cfg.grid.tau_values = v;
    }
    if let Some(v) = a.steps {
        cfg.inference.steps = v;
    }
    log_resolved("inference", &cfg.inference);
    log_resolved("grid", &cfg.grid);

    let pairs = read_pairs(&val_path)?;
    // One full prompt per validation source.
    let mut sources: BTreeMap<String, &PromptPair> = BTreeMap::new();
    for p in &pairs {
        sources.entry(p.meta.source.clone()).or_insert(p);
    }
    if sources.is_empty() {
        return Err(CliError::Config(format!("{} holds no pairs", val_path.display())));
    }
    let oracles = make_oracles(&corpus, &a.oracle)?;
    let mut items = Vec::with_capacity(sources.len());
    for (id, pair) in &sources {
        let idx = corpus
            .iter()
            .position(|c| &c.id == id)
            .ok_or_else(|| CliError::Config(format!("validation source {id} is not in the corpus")))?;
        let tok = tokenizer_by_name(&pair.tokenizer)?;
        let seq = pair.token_seq(tok.as_ref())?;
        items.push(ValidationItem { id: id.clone(), seq, oracle: oracles[idx].as_ref() as &dyn PerformanceFn });
    }
    let out = a.out.as_deref();
    let r = grid_search(&model, &items, &cfg.grid, &cfg.inference, out)?;
    for row in &r.rows {
        println!("top_k {:>3}  tau {:<8}  accuracy {:.6}  mean tokens {:.2}", row.top_k, row.tau, row.accuracy, row.mean_tokens);
    }
    println!("selected top_k={} tau={}", r.selected.top_k, r.selected.tau);
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let mut pairs = Vec::new();
    for p in &a.data {
        existing(p, "pair file")?;
        pairs.extend(read_jsonl(p)?);
    }
    let report = analyze_token_categories(&pairs)?;
    if let Some(out) = &a.out {
        let mut body = serde_json::to_string_pretty(&report)?;
        body.push('\n');
        std::fs::write(out, body)?;
    }
    for (cat, freq) in &report.all_freq {
        println!("{cat:<12} all {:>7.4}  removed {:>7.4}", freq, report.removed_freq[cat]);
    }
    match report.tv_distance {
        Some(tv) => println!("total variation distance: {tv:.6}"),
        None => println!("total variation distance: undefined (nothing removed)"),
    }
    Ok(())
}
