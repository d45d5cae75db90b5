use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use simbench_core::data::Domain;
use simbench_core::explain::{render, Method};
use simbench_core::par::Parallelism;
use simbench_core::stats::{analyze, AnalysisConfig, ResponseTable, DEFAULT_REPLICATES};
use simbench_core::testbench::{ResponseRecord, TestKind, TestSession, DEFAULT_LEARNING_ITEMS, DEFAULT_PREDICTION_ITEMS};
use simbench_core::workbench::{
    self, read_json, record_metrics, train_prototype, train_task, write_json, DataSource, Dataset, TaskCheckpoint,
    Workbench, DEFAULT_SEED, PROTOTYPE_FILE, PROTOTYPE_FROZEN_FILE, TASK_FILE,
};
use simbench_service::ServiceConfig;
use tracing::info;

/// Simulation tests for explanation methods.
#[derive(Parser)]
#[command(name = "simbench", version)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task model, or a prototype model on top of one.
    Train(TrainArgs),
    /// Explain one model decision.
    Explain(ExplainArgs),
    /// Generate a test session.
    GenSession(GenSessionArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Analyze exported responses.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Tabular schema JSON (defaults to the bundled dataset).
    #[arg(long, requires = "data")]
    schema: Option<PathBuf>,
    /// Tabular CSV.
    #[arg(long, requires = "schema")]
    data: Option<PathBuf>,
    /// Word embeddings, one `token v1 v2 ...` per line.
    #[arg(long, requires = "reviews")]
    embeddings: Option<PathBuf>,
    /// Labeled reviews, `label<TAB>sentence` per line.
    #[arg(long, requires = "embeddings")]
    reviews: Option<PathBuf>,
    /// `token<TAB>0|1` overrides of which tokens may be edited.
    #[arg(long, requires = "embeddings")]
    tags: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    domain: Domain,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Train a prototype model from the task checkpoint already in `--out`.
    #[arg(long, conflicts_with = "all")]
    prototype: bool,
    /// Keep the feature extractor fixed while training prototypes.
    #[arg(long, requires = "prototype")]
    freeze_extractor: bool,
    /// Train the task model and both prototype variants.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    source: DataArgs,
}

#[derive(Args)]
struct ExplainArgs {
    /// Checkpoint directory with all three models.
    #[arg(long)]
    model: PathBuf,
    /// lime, anchor, prototype, boundary or composite.
    #[arg(long)]
    method: Method,
    /// Dataset index, or an item id such as `tabular-test-17`.
    #[arg(long)]
    instance: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Where to write the explanation JSON.
    #[arg(long, default_value = "explanation.json")]
    out: PathBuf,
}

#[derive(Args)]
struct GenSessionArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    method: Method,
    /// forward or counterfactual.
    #[arg(long)]
    kind: TestKind,
    /// Prediction items; a multiple of 4.
    #[arg(long, default_value_t = DEFAULT_PREDICTION_ITEMS)]
    n: usize,
    /// Learning items of a forward test; a multiple of 4.
    #[arg(long, default_value_t = DEFAULT_LEARNING_ITEMS)]
    learn: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Session id (default: kind-method-domain-seed).
    #[arg(long)]
    id: Option<String>,
    /// Write the session JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Responses as exported by the service, one JSON record per line.
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory of session JSON files, or a service data directory.
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Writes to stdout; a reader that went away early is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn source(domain: Domain, a: DataArgs) -> Result<DataSource> {
    Ok(match domain {
        Domain::Tabular => {
            if a.embeddings.is_some() {
                bail!("--embeddings and --reviews describe text data, not tabular");
            }
            match (a.schema, a.data) {
                (Some(schema), Some(data)) => DataSource::Tabular { schema, data },
                _ => DataSource::fixture(domain),
            }
        }
        Domain::Text => {
            if a.schema.is_some() {
                bail!("--schema and --data describe tabular data, not text");
            }
            match (a.embeddings, a.reviews) {
                (Some(embeddings), Some(reviews)) => DataSource::Text {
                    embeddings,
                    reviews,
                    tags: a.tags,
                },
                _ => DataSource::fixture(domain),
            }
        }
    })
}

fn train(a: TrainArgs, mode: Parallelism) -> Result<()> {
    let metrics = if a.all {
        let src = source(a.domain, a.source)?;
        Workbench::train_all(src, &a.out, a.seed, mode)?.1
    } else if a.prototype {
        let path = a.out.join(TASK_FILE);
        let task: TaskCheckpoint =
            read_json(&path).with_context(|| format!("train the task model into {} first", a.out.display()))?;
        if task.source.domain() != a.domain {
            bail!("{} holds a {} task model, not {}", path.display(), task.source.domain(), a.domain);
        }
        if task.seed != a.seed {
            bail!("{} was trained with --seed {}; pass the same seed", path.display(), task.seed);
        }
        let data = Dataset::load(task.source.clone(), task.seed)?;
        info!("training prototype model (frozen extractor: {})", a.freeze_extractor);
        let (model, m) = train_prototype(&data, &task.model, a.freeze_extractor, a.seed)?;
        let (file, name) = if a.freeze_extractor {
            (PROTOTYPE_FROZEN_FILE, "prototype_frozen")
        } else {
            (PROTOTYPE_FILE, "prototype")
        };
        write_json(&a.out.join(file), &model)?;
        record_metrics(&a.out, a.domain, a.seed, name, m)?
    } else {
        let data = Dataset::load(source(a.domain, a.source)?, a.seed)?;
        info!("training {} task model on {} instances", a.domain, data.instances.len());
        let (task, m) = train_task(&data, a.seed, mode)?;
        write_json(&a.out.join(TASK_FILE), &task)?;
        record_metrics(&a.out, a.domain, a.seed, "task", m)?
    };
    emit(&format!("{}\n", serde_json::to_string_pretty(&metrics)?))?;
    Ok(())
}

fn explain(a: ExplainArgs, mode: Parallelism) -> Result<()> {
    let wb = Workbench::open(&a.model, mode)?;
    let index = wb.data.resolve(&a.instance)?;
    let x = &wb.data.instances[index].features;
    let ex = wb.explainers();
    let explanation = ex
        .explain(a.method, x, a.seed)
        .with_context(|| format!("{} explanation failed", a.method))?;
    let predicted = ex.model_for(a.method).predict(x);
    emit(&format!(
        "instance {index}: {}\npredicted class {predicted}\n\n{}",
        wb.data.space.render(x),
        render(&explanation)
    ))?;
    write_json(&a.out, &explanation)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn gen_session(a: GenSessionArgs, mode: Parallelism) -> Result<()> {
    let wb = Workbench::open(&a.model, mode)?;
    let id = a
        .id
        .unwrap_or_else(|| format!("{}-{}-{}-{}", a.kind, a.method, wb.domain(), a.seed));
    let bench = wb.bench();
    let session = match a.kind {
        TestKind::Forward => bench.make_forward_session(&id, a.method, a.learn, a.n, a.seed)?,
        TestKind::Counterfactual => bench.make_counterfactual_session(&id, a.method, a.n, a.seed)?,
    };
    if session.retries > 0 {
        info!("{} items were replaced during generation", session.retries);
    }
    match a.out {
        Some(path) => write_json(&path, &session)?,
        None => emit(&format!("{}\n", serde_json::to_string_pretty(&session)?))?,
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig::load(&a.config)?;
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(simbench_service::serve(config))?;
    Ok(())
}

/// Session JSON files in `dir`, or in its `sessions` subdirectory when `dir`
/// is a service data directory.
fn read_sessions(dir: &Path) -> Result<Vec<TestSession>> {
    let nested = dir.join("sessions");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let sessions: Vec<TestSession> = paths.iter().map(|p| read_json(p)).collect::<Result<_, _>>()?;
    if sessions.is_empty() {
        bail!("no session files in {}", dir.display());
    }
    Ok(sessions)
}

fn read_responses(path: &Path) -> Result<Vec<ResponseRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn analyze_cmd(a: AnalyzeArgs, mode: Parallelism) -> Result<()> {
    let sessions = read_sessions(&a.sessions)?;
    let responses = read_responses(&a.input)?;
    let table = ResponseTable::build(&sessions, &responses)?;
    info!("{} responses across {} sessions", table.rows.len(), sessions.len());
    let report = analyze(
        &table,
        &AnalysisConfig {
            replicates: a.replicates,
            seed: a.seed,
            mode,
        },
    );
    emit(&report.render())?;
    if let Some(path) = a.json {
        workbench::write_json(&path, &report)?;
    }
    Ok(())
}

/// The error chain joined by `: `, skipping causes whose text the message
/// above them already ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .init();
    let mode = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let result = match cli.command {
        Command::Train(a) => train(a, mode),
        Command::Explain(a) => explain(a, mode),
        Command::GenSession(a) => gen_session(a, mode),
        Command::Serve(a) => serve(a),
        Command::Analyze(a) => analyze_cmd(a, mode),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
