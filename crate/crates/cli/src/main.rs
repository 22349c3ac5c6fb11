//! Command-line front end for the recall-lens workbench.
//!
//! Exit codes: 0 success, 2 configuration error, 3 empty analysis cohort,
//! 4 numeric failure, 1 anything else (I/O, malformed files).

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tracing::info;

use config::{ConfigError, ConfigFile};
use recall_lens::eval::{run_queries, summarize};
use recall_lens::heads::StatsMode;
use recall_lens::model::{ModelConfig, WeightSet};
use recall_lens::suite::{run_suite, Aggregation, Analysis, RunConfig, SuiteSummary, HEADS_HEADER, SERIES_HEADER, TRACING_HEADER};
use recall_lens::train::{train, write_log, TrainConfig};
use recall_lens::world::{build_world, save_instances, SynthWorld, WorldParams};

#[derive(Parser)]
#[command(name = "recall-lens", version, about = "Interpretability workbench for one-to-many factual recall")]
struct Cli {
    /// TOML file whose values override command-line flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel sections (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log debug output
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its vocabulary
    GenWorld(GenWorldArgs),
    /// Train the toy model on a world
    Train(TrainArgs),
    /// Greedy-decode every query and grade the answers
    Eval(EvalArgs),
    /// Run analyses over the correctly answered queries
    Analyze(AnalyzeArgs),
    /// Check and summarize an analysis directory
    Report(ReportArgs),
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct GenWorldArgs {
    /// Output directory for world.jsonl and vocab.txt
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    relations: usize,
    #[arg(long, default_value_t = 3)]
    objects_per_fact: usize,
    #[arg(long, default_value_t = 96)]
    objects_per_relation: usize,
    #[arg(long, default_value_t = 3)]
    answers: usize,
    #[arg(long, default_value_t = 0.5)]
    two_token_fraction: f64,
    #[arg(long, default_value_t = 512)]
    max_vocab: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainArgs {
    /// World directory written by gen-world
    #[arg(long)]
    world: PathBuf,
    /// Output directory for weights.bin, optimizer.bin and train_log.csv
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Exact-match evaluation cadence in steps (0 disables)
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    #[arg(long, default_value_t = 16)]
    docs_per_fact: usize,
    #[arg(long, default_value_t = 0.02)]
    init_std: f64,
    /// Stop once an evaluation reaches this accuracy
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    d_head: usize,
    #[arg(long, default_value_t = 256)]
    d_mlp: usize,
    #[arg(long, default_value_t = 64)]
    ctx: usize,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Write graded instances as JSON lines
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct AnalyzeArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Output directory for CSVs and summary.json
    #[arg(long)]
    out: PathBuf,
    /// logit-lens, token-lens, knockout, trace, heads or all; repeatable
    #[arg(long, default_value = "all")]
    suite: Vec<String>,
    /// Series aggregation across instances: mean or median
    #[arg(long, default_value = "mean")]
    aggregation: String,
    /// Pool head-logit statistics across tracked tokens
    #[arg(long)]
    pooled_stats: bool,
    /// Tracked token roles (subject, answer_1, ...); default all
    #[arg(long, value_delimiter = ',')]
    tokens: Vec<String>,
    /// Corruption noise scale (default: 3 × embedding std)
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 17)]
    trace_seed: u64,
    #[arg(long, default_value_t = 3)]
    trace_seeds: usize,
    /// Number of consecutive layers restored per tracing cell
    #[arg(long, default_value_t = 1)]
    trace_window: usize,
    /// Renormalize attention rows after knockout
    #[arg(long)]
    renormalize: bool,
    #[arg(long)]
    max_instances: Option<usize>,
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ReportArgs {
    /// Directory written by analyze
    #[arg(long)]
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| level.into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use recall_lens::Error as E;
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<E>() {
        Some(E::Config(_) | E::VocabularyTooSmall(_) | E::OverLength { .. }) => 2,
        Some(E::EmptyCohort { .. }) => 3,
        Some(E::NumericDomain(_) | E::DegenerateMask | E::Divergence { .. }) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Some(n) = file.workers.or(cli.workers) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    match cli.command {
        Command::GenWorld(a) => gen_world(config::apply(a, file.gen_world.as_ref(), "gen-world")?),
        Command::Train(a) => train_cmd(config::apply(a, file.train.as_ref(), "train")?),
        Command::Eval(a) => eval_cmd(config::apply(a, file.eval.as_ref(), "eval")?),
        Command::Analyze(a) => analyze(config::apply(a, file.analyze.as_ref(), "analyze")?),
        Command::Report(a) => report(config::apply(a, file.report.as_ref(), "report")?),
    }
}

fn gen_world(a: GenWorldArgs) -> Result<()> {
    let params = WorldParams {
        n_subjects: a.subjects,
        n_relations: a.relations,
        objects_per_fact: a.objects_per_fact,
        objects_per_relation: a.objects_per_relation,
        n_answers: a.answers,
        two_token_fraction: a.two_token_fraction,
        max_vocab: a.max_vocab,
        seed: a.seed,
    };
    let world = build_world(&params)?;
    world.save(&a.out)?;
    info!(facts = world.facts.len(), vocab = world.vocab.len(), out = %a.out.display(), "world written");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let world = SynthWorld::load(&a.world)?;
    let model = ModelConfig {
        n_layers: a.layers,
        n_heads: a.heads,
        d_model: a.heads * a.d_head,
        d_head: a.d_head,
        d_mlp: a.d_mlp,
        vocab: world.vocab.len(),
        ctx: a.ctx,
        ..ModelConfig::toy(world.vocab.len())
    };
    model.validate()?;
    if world.max_doc_len() > model.ctx {
        return Err(recall_lens::Error::Config(format!(
            "documents of up to {} tokens do not fit context {}",
            world.max_doc_len(),
            model.ctx
        ))
        .into());
    }
    let config = TrainConfig {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.adam_eps,
        batch_size: a.batch_size,
        steps: a.steps,
        seed: a.seed,
        eval_every: a.eval_every,
        docs_per_fact: a.docs_per_fact,
        init_std: a.init_std,
        target_accuracy: a.target_accuracy,
    };
    fs::create_dir_all(&a.out)?;
    let (weights, optimizer, log) = match train(&config, &model, &world) {
        Ok(x) => x,
        Err(recall_lens::Error::Divergence { step, loss, last_good }) => {
            if let Some(w) = last_good {
                w.save(&a.out.join("last_good.bin"))?;
            }
            return Err(recall_lens::Error::Divergence { step, loss, last_good: None }.into());
        }
        Err(e) => return Err(e.into()),
    };
    weights.save(&a.out.join("weights.bin"))?;
    optimizer.save(&a.out.join("optimizer.bin"))?;
    write_log(&a.out.join("train_log.csv"), &log)?;
    if let Some(last) = log.last() {
        info!(step = last.step, loss = last.loss, accuracy = ?last.accuracy, "training finished");
    }
    Ok(())
}

fn load_pair(world: &Path, weights: &Path) -> Result<(SynthWorld, WeightSet<f32>)> {
    let world = SynthWorld::load(world).with_context(|| format!("loading world from {}", world.display()))?;
    let weights = WeightSet::load(weights).with_context(|| format!("loading weights from {}", weights.display()))?;
    if weights.config.vocab != world.vocab.len() {
        bail!(recall_lens::Error::Incompatible(format!(
            "model vocabulary {} does not match world vocabulary {}",
            weights.config.vocab,
            world.vocab.len()
        )));
    }
    Ok((world, weights))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (world, weights) = load_pair(&a.world, &a.weights)?;
    let instances = run_queries(&weights, &world)?;
    if let Some(out) = &a.out {
        save_instances(out, &instances)?;
    }
    println!("{}", serde_json::to_string_pretty(&summarize(&instances))?);
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (world, weights) = load_pair(&a.world, &a.weights)?;
    let mut analyses = BTreeSet::new();
    for s in &a.suite {
        analyses.extend(Analysis::parse_selection(s)?);
    }
    let config = RunConfig {
        analyses,
        aggregation: a.aggregation.parse::<Aggregation>()?,
        stats_mode: if a.pooled_stats { StatsMode::Pooled } else { StatsMode::PerToken },
        tracked_roles: a.tokens,
        noise: a.noise,
        trace_seed: a.trace_seed,
        trace_seeds: a.trace_seeds,
        trace_window: a.trace_window,
        renormalize: a.renormalize,
        max_instances: a.max_instances,
    };
    let report = run_suite(&weights, &world, &config, Some(&a.out))?;
    info!(
        cohort = report.summary.cohort,
        files = report.csv_paths.len(),
        out = %a.out.display(),
        "analysis written"
    );
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let path = a.dir.join("summary.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary: SuiteSummary = serde_json::from_str(&text)?;
    println!(
        "queries {}  correct {}  accuracy {:.4}  cohort {}",
        summary.total_queries, summary.correct_instances, summary.accuracy, summary.cohort
    );
    println!("step correct: {:?}", summary.step_correct);
    println!("aggregation {}  head stats {}  noise {:.6}", summary.aggregation, summary.stats_mode, summary.noise);
    for name in &summary.files {
        let csv = a.dir.join(name);
        let body = fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        let expected = if name.starts_with("tracing_") {
            TRACING_HEADER
        } else if name == "heads.csv" {
            HEADS_HEADER
        } else {
            SERIES_HEADER
        };
        if header != expected {
            bail!(recall_lens::Error::Format(format!("{name}: unexpected header `{header}`")));
        }
        let width = expected.split(',').count();
        let rows = lines.count();
        if let Some((i, _)) = body.lines().enumerate().skip(1).find(|(_, l)| l.split(',').count() != width) {
            bail!(recall_lens::Error::Format(format!("{name}: line {} has the wrong column count", i + 1)));
        }
        println!("{name}: {rows} rows");
    }
    Ok(())
}
