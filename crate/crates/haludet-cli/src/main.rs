//! Operator surface for the detection pipeline.
//!
//! Subcommands cover the whole workflow: checking a single response,
//! batch detection over a dataset, trajectory synthesis and filtering,
//! fine-tune export, evaluation at both granularities, and tool-catalog
//! inspection. Data goes to stdout (or `--out` files); logs go to stderr.
//! Exit codes: 0 success, 1 per-item failures, 2 configuration errors.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use haludet::backend::{self, BackendConfig, ModelBackend};
use haludet::engine::{prompt, Engine, EngineConfig, SegmentationMode};
use haludet::eval::{
    evaluate_response, evaluate_sentence, load_claim_dataset, load_qa_dataset, load_reports,
    EvalLevel,
};
use haludet::forge::{
    self, export_finetune, save_rejected, save_trajectories, validate_trajectory, FallbackDriver,
    RejectedTrajectory, RejectionReason, StoredTrajectory, YieldReport, YieldRow, SCHEMA_VERSION,
};
use haludet::toolbox::{
    FixtureSearchProvider, HeuristicJudge, SandboxConfig, ToolError, ToolSpec, Toolbox, ToolboxDeps,
};
use haludet::types::{DetectionInput, DetectionReport, Label, Language, TaskType};

#[derive(Parser)]
#[command(
    name = "haludet",
    version,
    about = "Tool-augmented hallucination detection for model responses",
    propagate_version = true
)]
struct Cli {
    /// Flat KEY=VALUE config file. Precedence: flags > environment
    /// variables > config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check one response for hallucinations.
    Detect(DetectArgs),
    /// Run detection over every input of a dataset.
    Batch(BatchArgs),
    /// Generate, filter, and store trajectories over a labeled dataset.
    Synthesize(SynthesizeArgs),
    /// Split stored trajectories into accepted and quarantined sets.
    Filter(FilterArgs),
    /// Export accepted trajectories as fine-tune examples.
    Export(ExportArgs),
    /// Score stored predictions against a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Inspect or extend the tool catalog.
    Tools(ToolsArgs),
}

/// Options shared by every command that runs detection sessions.
#[derive(Args, Clone)]
struct SessionArgs {
    /// Backend: "fallback", "scripted:FILE", "replay:FILE", "http:URL",
    /// or "http" (URL from MODEL_API_BASE).
    #[arg(long, default_value = "fallback", value_name = "SPEC")]
    backend: String,

    /// Force the deterministic rule-based policy regardless of --backend.
    #[arg(long)]
    fallback: bool,

    /// JSON file of keyword-matched search results backing web_search.
    #[arg(long, value_name = "FILE")]
    search_corpus: Option<PathBuf>,

    /// Directory overriding the built-in instruction templates.
    #[arg(long, value_name = "DIR")]
    template_dir: Option<PathBuf>,

    /// Model name sent to an http backend.
    #[arg(long, default_value = "default", value_name = "NAME")]
    model: String,

    /// Turn budget per session.
    #[arg(long, default_value_t = 25, value_name = "N")]
    max_turns: usize,

    /// Sentence segmentation: "rule" (engine splits) or "model" (the
    /// model calls split_text).
    #[arg(long, default_value = "rule", value_name = "MODE")]
    segmentation: String,
}

#[derive(Args)]
struct DetectArgs {
    /// Response text to check.
    #[arg(long, conflicts_with = "input", value_name = "TEXT")]
    text: Option<String>,

    /// JSON file holding one detection input.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,

    /// Question the response answers (with --text).
    #[arg(long, default_value = "Check the response for factual errors.")]
    query: String,

    /// Task type: knowledge_qa, conditional_generation,
    /// semantic_consistency, math_solving, or code_generation.
    #[arg(long, value_name = "TYPE")]
    task: Option<TaskType>,

    /// Session language: en or zh (default: detected from the text).
    #[arg(long, value_name = "LANG")]
    language: Option<Language>,

    /// Identifier for the input (with --text).
    #[arg(long, default_value = "input-1")]
    id: String,

    /// Print the report as JSON instead of text.
    #[arg(long)]
    json: bool,

    #[command(flatten)]
    session: SessionArgs,
}

#[derive(Args)]
struct BatchArgs {
    /// JSONL dataset of detection inputs.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,

    /// Output file for JSONL reports (default: stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, default_value_t = 4, value_name = "N")]
    workers: usize,

    #[command(flatten)]
    session: SessionArgs,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// JSONL dataset of gold-labeled detection inputs.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,

    /// Output file for accepted trajectories (JSONL).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Output file for rejected trajectories (JSONL).
    #[arg(long, value_name = "FILE")]
    quarantine: Option<PathBuf>,

    /// Teacher backend spec; same grammar as --backend.
    #[arg(long, value_name = "SPEC")]
    teacher: Option<String>,

    /// Worker threads.
    #[arg(long, default_value_t = 4, value_name = "N")]
    workers: usize,

    #[command(flatten)]
    session: SessionArgs,
}

#[derive(Args)]
struct FilterArgs {
    /// Stored trajectories to filter (JSONL).
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,

    /// Output file for accepted trajectories (default: <in>.accepted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Output file for rejected trajectories (default: <in>.quarantine).
    #[arg(long, value_name = "FILE")]
    quarantine: Option<PathBuf>,

    /// JSON file of keyword-matched search results backing web_search.
    #[arg(long, value_name = "FILE")]
    search_corpus: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Accepted trajectories to export (JSONL).
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,

    /// Output file for fine-tune examples (default: stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Directory overriding the built-in instruction templates.
    #[arg(long, value_name = "DIR")]
    template_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Granularity: response or sentence.
    #[arg(long, value_name = "LEVEL")]
    level: EvalLevel,

    /// Gold dataset: JSONL of detection inputs (response level) or of
    /// labeled claims (sentence level).
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,

    /// JSONL of detection reports from a batch run.
    #[arg(long, value_name = "FILE")]
    predictions: PathBuf,

    /// Print the scores as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ToolsArgs {
    #[command(subcommand)]
    action: ToolsAction,
}

#[derive(Subcommand)]
enum ToolsAction {
    /// Print the tool catalog as the agent prompt renders it.
    List,
    /// Validate a tool spec file and print the catalog extended with it.
    Register {
        /// JSON tool spec: name, description, kind, args, examples.
        #[arg(value_name = "FILE")]
        spec_file: PathBuf,
    },
}

fn main() {
    // Die quietly when a pipe closes (e.g. `haludet tools list | head`)
    // instead of panicking on EPIPE.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    apply_config_file(cli.config.as_deref())?;
    match cli.command {
        Command::Detect(args) => run_detect(args),
        Command::Batch(args) => run_batch(args),
        Command::Synthesize(args) => run_synthesize(args),
        Command::Filter(args) => run_filter(args),
        Command::Export(args) => run_export(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Tools(args) => run_tools(args),
    }
}

/// Load a flat KEY=VALUE file and export keys that are not already set in
/// the environment, giving the precedence flags > env > file.
fn apply_config_file(path: Option<&Path>) -> Result<()> {
    let Some(path) = path else {
        return Ok(());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected KEY=VALUE, got {line:?}", i + 1))?;
        let key = key.trim();
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        if std::env::var_os(key).is_none() {
            std::env::set_var(key, value.trim());
        }
    }
    Ok(())
}

/// How sessions get their model turns.
enum BackendChoice {
    Fallback,
    Config(BackendConfig),
}

fn parse_backend_spec(session: &SessionArgs, spec_override: Option<&str>) -> Result<BackendChoice> {
    let spec = spec_override.unwrap_or(&session.backend);
    if session.fallback || spec == "fallback" {
        if session.fallback && spec != "fallback" {
            log::info!("--fallback overrides --backend {spec}");
        }
        return Ok(BackendChoice::Fallback);
    }
    let config = if let Some(path) = spec.strip_prefix("scripted:") {
        BackendConfig::scripted(path)
    } else if let Some(path) = spec.strip_prefix("replay:") {
        BackendConfig::replay(path)
    } else if let Some(url) = spec.strip_prefix("http:") {
        // Accept both "http:https://host" and a bare "http://host" URL.
        let url = if url.starts_with("//") {
            spec.to_string()
        } else {
            url.to_string()
        };
        BackendConfig::http(url, &session.model)
    } else if spec == "http" {
        let mut config = BackendConfig::http("", &session.model);
        config.endpoint_url = None;
        config
    } else {
        bail!(
            "unknown backend spec {spec:?}; expected fallback, scripted:FILE, replay:FILE, or http[:URL]"
        );
    };
    if let Some(path) = &config.fixture_path {
        if !path.exists() {
            bail!("backend fixture {} does not exist", path.display());
        }
    }
    Ok(BackendChoice::Config(config))
}

fn build_toolbox(search_corpus: Option<&Path>) -> Result<Toolbox> {
    let search = match search_corpus {
        Some(path) => Arc::new(
            FixtureSearchProvider::from_path(path).map_err(|e| anyhow!("search corpus: {e}"))?,
        ),
        None => Arc::new(FixtureSearchProvider::empty()),
    };
    Ok(Toolbox::standard(ToolboxDeps {
        search,
        judge: Arc::new(HeuristicJudge::new()),
        sandbox: SandboxConfig::default(),
    }))
}

fn build_engine(session: &SessionArgs) -> Result<Engine> {
    let segmentation = match session.segmentation.as_str() {
        "rule" => SegmentationMode::RuleBased,
        "model" => SegmentationMode::ModelDriven,
        other => bail!("unknown segmentation mode {other:?}; expected rule or model"),
    };
    let toolbox = build_toolbox(session.search_corpus.as_deref())?;
    if let Some(dir) = &session.template_dir {
        if !dir.is_dir() {
            bail!("template directory {} does not exist", dir.display());
        }
    }
    let config = EngineConfig {
        max_turns: session.max_turns,
        segmentation,
        template_dir: session.template_dir.clone(),
        ..EngineConfig::default()
    };
    Ok(Engine::new(toolbox, config))
}

fn render_report(report: &DetectionReport) -> String {
    let label_text = |label: Label| match label {
        Label::Clean => "clean",
        Label::Hallucinated => "hallucinated",
    };
    let mut out = format!(
        "input: {}\nresponse label: {} ({})\nturns used: {}\nsentences:\n",
        report.input_id,
        report.response_label.as_u8(),
        label_text(report.response_label),
        report.turns_used
    );
    for (i, verdict) in report.verdicts.iter().enumerate() {
        out.push_str(&format!(
            "  [{}] label={} tool={}{} {}\n      evidence: {}\n",
            i + 1,
            verdict.label.as_u8(),
            verdict.tool_used,
            if verdict.low_confidence {
                " (low confidence)"
            } else {
                ""
            },
            verdict.sentence.replace('\n', " "),
            verdict.evidence.replace('\n', " ")
        ));
    }
    out
}

fn run_detect(args: DetectArgs) -> Result<i32> {
    let mut input = match (&args.input, &args.text) {
        (Some(path), None) => {
            let raw = fs::read_to_string(path)
                .with_context(|| format!("cannot read input file {}", path.display()))?;
            serde_json::from_str::<DetectionInput>(&raw)
                .with_context(|| format!("bad detection input in {}", path.display()))?
        }
        (None, Some(text)) => DetectionInput::new(&args.id, &args.query, text),
        (None, None) => bail!("one of --text or --input is required"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(task) = args.task {
        input.task_type = Some(task);
    }
    if let Some(language) = args.language {
        input.language = Some(language);
    }
    input
        .validate()
        .map_err(|e| anyhow!("invalid input: {e}"))?;

    let choice = parse_backend_spec(&args.session, None)?;
    let engine = build_engine(&args.session)?;
    let outcome = match choice {
        BackendChoice::Fallback => engine.run_fallback(&input),
        BackendChoice::Config(config) => {
            let backend = backend::build_backend(&config).map_err(|e| anyhow!("{e}"))?;
            engine.run(&input, backend.as_ref())
        }
    };
    match outcome {
        Ok(outcome) => {
            if args.json {
                println!("{}", serde_json::to_string_pretty(&outcome.report)?);
            } else {
                print!("{}", render_report(&outcome.report));
            }
            Ok(0)
        }
        Err(failure) => {
            eprintln!("detection failed: {failure}");
            Ok(1)
        }
    }
}

/// Run `f` over `items` on a fixed-size thread pool, preserving order.
fn run_pool<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                slots.lock().expect("pool slots poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("pool slots poisoned")
        .into_iter()
        .map(|slot| slot.expect("pool covered every item"))
        .collect()
}

fn run_batch(args: BatchArgs) -> Result<i32> {
    let inputs = load_qa_dataset(&args.dataset, false).map_err(|e| anyhow!("dataset: {e}"))?;
    let choice = parse_backend_spec(&args.session, None)?;
    let engine = build_engine(&args.session)?;
    // An http backend is stateless and shared; scripted and replay
    // fixtures hold per-session cursors, so each input gets a fresh one.
    let shared: Option<Arc<dyn ModelBackend>> = match &choice {
        BackendChoice::Config(config) if config.kind == backend::BackendKind::HttpEndpoint => Some(
            Arc::from(backend::build_backend(config).map_err(|e| anyhow!("{e}"))?),
        ),
        _ => None,
    };

    let results = run_pool(&inputs, args.workers, |input| {
        let outcome = match (&choice, &shared) {
            (BackendChoice::Fallback, _) => engine.run_fallback(input),
            (BackendChoice::Config(_), Some(backend)) => engine.run(input, backend.as_ref()),
            (BackendChoice::Config(config), None) => match backend::build_backend(config) {
                Ok(backend) => engine.run(input, backend.as_ref()),
                Err(e) => {
                    return (input.id.clone(), Err(e.to_string()));
                }
            },
        };
        (
            input.id.clone(),
            outcome.map(|o| o.report).map_err(|e| e.to_string()),
        )
    });

    // Output ordered by input id, independent of completion order.
    let mut results: Vec<(String, Result<DetectionReport, String>)> = results;
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut lines = Vec::new();
    let mut failures = 0usize;
    for (id, result) in &results {
        match result {
            Ok(report) => lines.push(serde_json::to_string(report)?),
            Err(e) => {
                failures += 1;
                eprintln!("item {id}: {e}");
            }
        }
    }
    write_lines(args.out.as_deref(), &lines)?;
    eprintln!(
        "batch: {} of {} inputs detected",
        results.len() - failures,
        results.len()
    );
    Ok(if failures > 0 { 1 } else { 0 })
}

fn write_lines(out: Option<&Path>, lines: &[String]) -> Result<()> {
    match out {
        Some(path) => {
            let mut body = lines.join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut handle = stdout.lock();
            for line in lines {
                writeln!(handle, "{line}")?;
            }
        }
    }
    Ok(())
}

fn run_synthesize(args: SynthesizeArgs) -> Result<i32> {
    let inputs = load_qa_dataset(&args.dataset, true).map_err(|e| anyhow!("dataset: {e}"))?;
    let choice = parse_backend_spec(&args.session, args.teacher.as_deref())?;
    let engine = build_engine(&args.session)?;
    let result = match choice {
        BackendChoice::Fallback => {
            forge::synthesize(&inputs, &engine, &FallbackDriver, args.workers)
        }
        BackendChoice::Config(config) => {
            let driver = move |_: &DetectionInput| backend::build_backend(&config);
            forge::synthesize(&inputs, &engine, &driver, args.workers)
        }
    }
    .map_err(|e| anyhow!("synthesis: {e}"))?;

    save_trajectories(&args.out, &result.accepted).map_err(|e| anyhow!("{e}"))?;
    if let Some(quarantine) = &args.quarantine {
        save_rejected(quarantine, &result.rejected).map_err(|e| anyhow!("{e}"))?;
    }
    print!("{}", result.report.render());
    eprintln!(
        "synthesize: {} accepted -> {}, {} rejected{}",
        result.accepted.len(),
        args.out.display(),
        result.rejected.len(),
        args.quarantine
            .as_ref()
            .map(|p| format!(" -> {}", p.display()))
            .unwrap_or_default()
    );
    Ok(0)
}

fn sibling_path(input: &Path, suffix: &str) -> PathBuf {
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("trajectories");
    input.with_file_name(format!("{stem}.{suffix}.jsonl"))
}

fn run_filter(args: FilterArgs) -> Result<i32> {
    let stored = forge::load_trajectories(&args.input).map_err(|e| anyhow!("{e}"))?;
    let toolbox = build_toolbox(args.search_corpus.as_deref())?;

    let mut accepted: Vec<StoredTrajectory> = Vec::new();
    let mut rejected: Vec<RejectedTrajectory> = Vec::new();
    let mut row = YieldRow {
        dataset: "stored".to_string(),
        attempted: 0,
        accepted: 0,
        rejected: Default::default(),
    };
    for record in stored {
        row.attempted += 1;
        match validate_trajectory(&record.trajectory, record.gold_label, &toolbox) {
            Ok(()) => {
                row.accepted += 1;
                accepted.push(record);
            }
            Err(reasons) => {
                let primary = reasons
                    .first()
                    .copied()
                    .unwrap_or(RejectionReason::NoTerminalAnswer);
                *row.rejected.entry(primary).or_insert(0) += 1;
                rejected.push(RejectedTrajectory {
                    schema_version: SCHEMA_VERSION,
                    input_id: record.trajectory.input_id.clone(),
                    dataset: None,
                    reasons,
                    error: None,
                    trajectory: Some(record.trajectory),
                });
            }
        }
    }

    let out = args
        .out
        .unwrap_or_else(|| sibling_path(&args.input, "accepted"));
    let quarantine = args
        .quarantine
        .unwrap_or_else(|| sibling_path(&args.input, "quarantine"));
    save_trajectories(&out, &accepted).map_err(|e| anyhow!("{e}"))?;
    save_rejected(&quarantine, &rejected).map_err(|e| anyhow!("{e}"))?;

    let any_rejected = !rejected.is_empty();
    print!("{}", YieldReport { rows: vec![row] }.render());
    eprintln!(
        "filter: {} accepted -> {}, {} rejected -> {}",
        accepted.len(),
        out.display(),
        rejected.len(),
        quarantine.display()
    );
    Ok(if any_rejected { 1 } else { 0 })
}

fn run_export(args: ExportArgs) -> Result<i32> {
    let stored = forge::load_trajectories(&args.input).map_err(|e| anyhow!("{e}"))?;
    let toolbox = build_toolbox(None)?;
    if let Some(dir) = &args.template_dir {
        if !dir.is_dir() {
            bail!("template directory {} does not exist", dir.display());
        }
    }

    let mut lines = Vec::new();
    let mut failures = 0usize;
    for record in &stored {
        let system = prompt::system_prompt(
            record.trajectory.language,
            &toolbox,
            args.template_dir.as_deref(),
        )
        .map_err(|e| anyhow!("{e}"))?;
        match export_finetune(&record.trajectory, &system) {
            Ok(example) => lines.push(serde_json::to_string(&example)?),
            Err(e) => {
                failures += 1;
                eprintln!("item {}: {e}", record.trajectory.input_id);
            }
        }
    }
    write_lines(args.out.as_deref(), &lines)?;
    eprintln!(
        "export: {} of {} trajectories exported",
        stored.len() - failures,
        stored.len()
    );
    Ok(if failures > 0 { 1 } else { 0 })
}

fn run_evaluate(args: EvaluateArgs) -> Result<i32> {
    let reports = load_reports(&args.predictions).map_err(|e| anyhow!("predictions: {e}"))?;
    let eval = match args.level {
        EvalLevel::Response => {
            let inputs =
                load_qa_dataset(&args.dataset, true).map_err(|e| anyhow!("dataset: {e}"))?;
            evaluate_response(&inputs, &reports).map_err(|e| anyhow!("{e}"))?
        }
        EvalLevel::Sentence => {
            let groups = load_claim_dataset(&args.dataset).map_err(|e| anyhow!("dataset: {e}"))?;
            evaluate_sentence(&groups, &reports).map_err(|e| anyhow!("{e}"))?
        }
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&eval.to_json())?);
    } else {
        print!("{}", eval.render());
    }
    Ok(0)
}

fn run_tools(args: ToolsArgs) -> Result<i32> {
    let mut toolbox = build_toolbox(None)?;
    match args.action {
        ToolsAction::List => {
            println!("{}", toolbox.render_catalog());
        }
        ToolsAction::Register { spec_file } => {
            let raw = fs::read_to_string(&spec_file)
                .with_context(|| format!("cannot read tool spec {}", spec_file.display()))?;
            let spec: ToolSpec = serde_json::from_str(&raw)
                .with_context(|| format!("bad tool spec in {}", spec_file.display()))?;
            let name = spec.name.clone();
            toolbox
                .register(spec, |_: &haludet::ToolCall| -> Result<String, ToolError> {
                    Err(ToolError::ExecutionFailed(
                        "tool was registered from a spec file without an executable backend"
                            .to_string(),
                    ))
                })
                .map_err(|e| anyhow!("register: {e}"))?;
            eprintln!("registered tool {name}; catalog with it:");
            println!("{}", toolbox.render_catalog());
        }
    }
    Ok(0)
}
