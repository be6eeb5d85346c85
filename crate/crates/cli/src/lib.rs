//! The `fair-embed` command line: augmentation, polarity checks, adapter
//! training, fairness reports and the review service.

pub mod interactive;
pub mod llm;
pub mod service;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::Serialize;
use serde_json::{json, Value};

use fair_embed::augment::{
    run_rounds, AugmentConfig, AugmentationResult, CorrectionSource, LlmClient, PromptStore,
    RoundStats, ScriptedCorrections, ScriptedLlm,
};
use fair_embed::io::{self, CheckpointMeta, EmbeddingStore, GroupsFile};
use fair_embed::lexicon::group_is_correct;
use fair_embed::metrics::{build_report, cced_gap, Similarity};
use fair_embed::synthetic::ShiftScenario;
use fair_embed::trainer::gradcheck::random_gradcheck;
use fair_embed::trainer::DEFAULT_LEARNING_RATE;
use fair_embed::{GroupEmbeddings, RhoMode, SensitiveLexicon, TrainConfig};

use crate::interactive::TerminalCorrections;
use crate::llm::HttpLlmClient;
use crate::service::{AppState, Persistence, Review};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_TRANSPORT: u8 = 3;

const LLM_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Parser)]
#[command(name = "fair-embed", version, about = "Debias frozen embeddings and audit them")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rewrite texts into every group plus neutral, with correction rounds.
    Augment(AugmentArgs),
    /// Label the texts of a groups file and report union accuracy.
    Polarity(PolarityArgs),
    /// Train a debiasing adapter on group embeddings.
    Train(TrainArgs),
    /// Write a fairness report.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on random problems.
    Gradcheck(GradcheckArgs),
    /// Generate the shifted-offset scenario as a groups file plus embeddings.
    Synth(SynthArgs),
    /// Run the augmentation loop behind the HTTP review API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    /// Source texts, one `{"id", "text"}` object per line.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Sensitive word lists; the built-in gender lexicon when absent.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Prompt store. Loaded when it exists (seeded defaults otherwise) and
    /// written back with the accepted corrections.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub rounds: u32,
    /// Scripted replies instead of the HTTP model.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub common: LoopArgs,
    /// Output groups file.
    #[arg(long)]
    pub out: PathBuf,
    /// Scripted corrections, one `{"content_id", "neutral", "groups"}` per
    /// line. Without it corrections are asked for on the terminal, or
    /// skipped when stdin is not one.
    #[arg(long)]
    pub corrections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: LoopArgs,
    /// Loop state, resumed from when it exists.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Groups file rewritten after every round.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct PolarityArgs {
    /// Groups file to check.
    #[arg(long = "in", required_unless_present = "text")]
    pub input: Option<PathBuf>,
    /// Label a single text instead.
    #[arg(long, conflicts_with = "input")]
    pub text: Option<String>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Groups held out for checkpoint selection, looked up in the same
    /// embedding file. The training groups are used when absent.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Output checkpoint; metadata goes next to it as `<out>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 500)]
    pub validate_every: usize,
    /// Train a bias vector as well as the matrix.
    #[arg(long)]
    pub bias: bool,
    /// Use the variance of the distances as kernel width.
    #[arg(long, conflicts_with = "rho")]
    pub rho_variance: bool,
    /// Fixed kernel width.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl From<Metric> for Similarity {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Cosine => Similarity::Cosine,
            Metric::Euclidean => Similarity::Euclidean,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Checkpoint to apply; raw embeddings when absent.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Retrieval queries, one `{"category", "query", "male", "female"}`
    /// line of embedding ids each.
    #[arg(long)]
    pub retrieval: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-category ratios as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random batches to check, three groups each.
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub groups: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Offset of each attribute along the shared direction.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub offsets: Vec<f64>,
    #[arg(long)]
    pub out_groups: PathBuf,
    #[arg(long)]
    pub out_embeddings: PathBuf,
}

/// A failed self-check, reported with the data exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fair_embed::Error>() {
            return match e {
                fair_embed::Error::Transport(_) => EXIT_TRANSPORT,
                fair_embed::Error::InvalidParameter(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

/// Runs a command and returns what it prints on stdout.
pub fn run(cli: Cli) -> anyhow::Result<Value> {
    match cli.command {
        Command::Augment(a) => augment(a),
        Command::Polarity(a) => polarity(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("summaries serialize")
}

fn lexicon(path: Option<&Path>) -> anyhow::Result<SensitiveLexicon> {
    Ok(match path {
        Some(p) => io::load_lexicon(p).with_context(|| format!("loading lexicon {}", p.display()))?,
        None => SensitiveLexicon::default_english(),
    })
}

fn prompt_store(path: Option<&Path>) -> anyhow::Result<PromptStore> {
    Ok(match path.filter(|p| p.exists()) {
        Some(p) => io::load_prompt_store(p)?,
        None => PromptStore::seeded(),
    })
}

fn client(mock: Option<&Path>) -> anyhow::Result<Arc<dyn LlmClient>> {
    Ok(match mock {
        Some(p) => Arc::new(
            ScriptedLlm::from_path(p).with_context(|| format!("loading replies {}", p.display()))?,
        ),
        None => Arc::new(HttpLlmClient::from_env(LLM_TIMEOUT)?),
    })
}

fn augment_config(common: &LoopArgs) -> AugmentConfig {
    AugmentConfig {
        concurrency: common.concurrency,
        ..AugmentConfig::default()
    }
}

fn round_summary(stats: &[RoundStats], store: &PromptStore) -> Value {
    json!({
        "rounds": stats,
        "store_size": store.len(),
        "store_digest": store.digest(),
    })
}

pub fn augment(args: AugmentArgs) -> anyhow::Result<Value> {
    let c = &args.common;
    let dataset = io::load_text_records(&c.input)?;
    let lex = lexicon(c.lexicon.as_deref())?;
    let mut store = prompt_store(c.prompts.as_deref())?;
    let llm = client(c.mock.as_deref())?;
    let mut corrections: Box<dyn CorrectionSource> = match &args.corrections {
        Some(p) => Box::new(ScriptedCorrections::from_path(p)?),
        None if std::io::stdin().is_terminal() => Box::new(TerminalCorrections::new(
            std::io::stdin().lock(),
            std::io::stderr(),
            lex.clone(),
        )),
        None => Box::new(|_: &AugmentationResult, _: u32| None),
    };
    let outcome = run_rounds(
        &dataset,
        &mut store,
        llm.as_ref(),
        &lex,
        c.rounds,
        corrections.as_mut(),
        &augment_config(c),
    )?;
    for s in &outcome.stats {
        log::info!(
            "round {}: {} flagged, union accuracy {:.4}",
            s.round,
            s.flagged,
            s.union_accuracy
        );
    }
    io::write_groups(
        &args.out,
        &GroupsFile::new(lex.attributes().to_vec(), outcome.results),
    )?;
    if let Some(p) = &c.prompts {
        io::save_prompt_store(p, &store)?;
    }
    Ok(round_summary(&outcome.stats, &store))
}

pub fn polarity(args: PolarityArgs) -> anyhow::Result<Value> {
    let lex = lexicon(args.lexicon.as_deref())?;
    if let Some(text) = &args.text {
        return Ok(json!({
            "label": lex.polarity(text),
            "counts": lex.attributes().iter().zip(lex.counts(text)).collect::<IndexMap<_, _>>(),
            "matches": lex.find_matches(text),
        }));
    }
    let path = args.input.as_deref().expect("clap requires --in without --text");
    let mut groups = io::load_groups(path)?;
    if groups.attributes != lex.attributes() {
        return Err(fair_embed::Error::HeaderMismatch {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "groups declare {:?}, the lexicon has {:?}",
                groups.attributes,
                lex.attributes()
            ),
        }
        .into());
    }
    let accuracy = fair_embed::lexicon::union_accuracy(&groups.records, &lex)?;
    fair_embed::augment::flag_wrong(&mut groups.records, &lex);
    let mut records = Vec::with_capacity(groups.records.len());
    for r in &groups.records {
        records.push(json!({
            "content_id": r.content_id,
            "ok": group_is_correct(r, &lex)?,
            "polarity": r.polarity,
        }));
    }
    Ok(json!({
        "union_accuracy": accuracy,
        "flagged": groups.records.iter().filter(|r| r.is_flagged()).map(|r| &r.content_id).collect::<Vec<_>>(),
        "records": records,
    }))
}

fn load_group_embeddings(groups: &Path, store: &EmbeddingStore) -> anyhow::Result<Vec<GroupEmbeddings>> {
    let file = io::load_groups(groups)?;
    io::assemble_group_embeddings(&file, store)
        .with_context(|| format!("looking up embeddings for {}", groups.display()))
}

pub fn train(args: TrainArgs) -> anyhow::Result<Value> {
    let store = io::read_embeddings(&args.embeddings)?;
    let train_set = load_group_embeddings(&args.groups, &store)?;
    let validation = match &args.validation {
        Some(p) => load_group_embeddings(p, &store)?,
        None => Vec::new(),
    };
    let cfg = TrainConfig {
        beta: args.beta,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        validate_every: args.validate_every,
        seed: args.seed,
        rho_mode: match (args.rho, args.rho_variance) {
            (Some(r), _) => RhoMode::Fixed(r),
            (None, true) => RhoMode::Variance,
            (None, false) => RhoMode::Std,
        },
        use_bias: args.bias,
        ..TrainConfig::default()
    };
    let outcome = fair_embed::train(&train_set, &validation, &cfg)?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        beta: cfg.beta,
        rho: outcome.kernel.rho(),
        step: outcome.history.best_step,
        validation_loss: outcome.validation_loss,
        learning_rate: Some(cfg.learning_rate),
    };
    io::write_checkpoint(&args.out, &outcome.adapter, &meta)?;
    let eval_set = if validation.is_empty() { &train_set } else { &validation };
    Ok(json!({
        "checkpoint": args.out,
        "meta": meta,
        "steps": outcome.history.steps.len(),
        "gap_before": cced_gap(eval_set, None)?,
        "gap_after": cced_gap(eval_set, Some(&outcome.adapter))?,
    }))
}

pub fn eval(args: EvalArgs) -> anyhow::Result<Value> {
    let store = io::read_embeddings(&args.embeddings)?;
    let groups = load_group_embeddings(&args.groups, &store)?;
    let adapter = match &args.adapter {
        Some(p) => Some(io::read_checkpoint(p)?.0),
        None => None,
    };
    let retrieval = match &args.retrieval {
        Some(p) => io::resolve_retrieval(&io::load_retrieval(p)?, &store)?,
        None => IndexMap::new(),
    };
    let report = build_report(&groups, &retrieval, adapter.as_ref(), args.metric.into())?;
    if let Some(p) = &args.out {
        let text = serde_json::to_string_pretty(&report)? + "\n";
        io::write_locked(p, text.as_bytes())?;
    }
    if let Some(p) = &args.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "ratio", "male_wins", "female_wins", "ties"])?;
        for (name, ratio, c) in report.ratio_rows() {
            w.write_record([
                name.to_string(),
                ratio.to_string(),
                c.male_wins.to_string(),
                c.female_wins.to_string(),
                c.ties.to_string(),
            ])?;
        }
        io::write_locked(p, &w.into_inner()?)?;
    }
    Ok(to_value(&report))
}

pub fn gradcheck(args: GradcheckArgs) -> anyhow::Result<Value> {
    if args.dim == 0 || args.instances == 0 {
        return Err(fair_embed::Error::InvalidParameter("dim and instances must be positive".into()).into());
    }
    let report = random_gradcheck(args.dim, args.seed, args.instances)?;
    if report.max_relative_error >= args.tolerance {
        return Err(CheckFailed(format!(
            "max relative error {:.3e} is not below {:.1e}",
            report.max_relative_error, args.tolerance
        ))
        .into());
    }
    Ok(to_value(&report))
}

pub fn synth(args: SynthArgs) -> anyhow::Result<Value> {
    let scenario = ShiftScenario {
        groups: args.groups,
        dim: args.dim,
        offsets: args.offsets.clone(),
        content_scale: 1.0,
        seed: args.seed,
    };
    let data = scenario.generate()?;
    let attributes: Vec<String> = match args.offsets.len() {
        2 => vec!["male".into(), "female".into()],
        n => (0..n).map(|i| format!("group{i}")).collect(),
    };
    let records = data
        .groups
        .iter()
        .map(|g| AugmentationResult {
            content_id: g.content_id.clone(),
            source_text: None,
            group_texts: attributes
                .iter()
                .map(|a| (a.clone(), format!("{} ({a})", g.content_id)))
                .collect(),
            neutral_text: g.content_id.clone(),
            confidence: 1.0,
            round: 1,
            polarity: None,
            confidence_defaulted: false,
        })
        .collect();
    io::write_groups(&args.out_groups, &GroupsFile::new(attributes.clone(), records))?;
    let store = io::store_group_embeddings(&data.groups, &attributes)?;
    io::write_embeddings(&store, &args.out_embeddings)?;
    Ok(json!({
        "groups": data.groups.len(),
        "dim": args.dim,
        "attributes": attributes,
        "cced_gap": cced_gap(&data.groups, None)?,
        "mean_content_norm": data.mean_content_norm(),
    }))
}

pub fn serve(args: ServeArgs) -> anyhow::Result<Value> {
    let c = &args.common;
    let dataset = io::load_text_records(&c.input)?;
    let lex = lexicon(c.lexicon.as_deref())?;
    let store = prompt_store(c.prompts.as_deref())?;
    let llm = client(c.mock.as_deref())?;
    let persist = Persistence {
        state: args.state.clone(),
        prompts: c.prompts.clone(),
        groups: args.out.clone(),
    };
    let review = Review::open(dataset, store, c.rounds, lex, persist)?;
    let state = AppState::new(review, llm, augment_config(c));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime
        .block_on(service::serve(state, &args.bind))
        .with_context(|| format!("serving on {}", args.bind))?;
    Ok(Value::Null)
}
