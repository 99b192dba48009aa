//! Trajectory records, rejection filtering, and fine-tune export.
//!
//! A trajectory is the executed interaction sequence of one detection
//! session: the initial observation followed by strictly alternating
//! (thought, action) steps and their observations, ending in exactly one
//! `get_answer`. Synthesis runs sessions over a labeled dataset, filters
//! out defective trajectories with an explicit reason each, and reports
//! the per-dataset yield. Accepted trajectories export to chat-format
//! examples where only the agent turns carry the training flag.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_step, serialize_step, AgentStep, Observation, ObservationSource};
use crate::backend::{BackendError, ModelBackend, Role};
use crate::engine::fallback::FallbackPolicy;
use crate::engine::Engine;
use crate::toolbox::{Toolbox, TOOL_GET_ANSWER};
use crate::types::{DetectionInput, Label, Language, TaskType};

/// Version stamped into every stored record; bumped on layout changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("io error on {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("trajectory {0} is not an accepted trajectory")]
    NotAccepted(String),
    #[error("input {0} lacks a gold label")]
    MissingGoldLabel(String),
    #[error("transcript is not a valid trajectory: {0}")]
    BadTranscript(String),
}

/// One executed step: the agent's thought and action plus the observation
/// the environment returned for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: AgentStep,
    pub observation: Observation,
}

/// The executed interaction sequence of one session. Rejected or malformed
/// agent turns never appear here; they live only in the raw transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub input_id: String,
    pub query: String,
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task_type: Option<TaskType>,
    pub language: Language,
    pub initial_observation: Observation,
    pub steps: Vec<TrajectoryStep>,
    /// Response-level label from the terminal answer; `None` while the
    /// session is unfinished.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_label: Option<Label>,
}

impl Trajectory {
    pub fn id_for(input: &DetectionInput) -> String {
        format!("traj-{}", input.id)
    }

    /// Shell for a session that produced its initial observation.
    pub fn started(input: &DetectionInput, language: Language, initial: Observation) -> Self {
        Trajectory {
            id: Self::id_for(input),
            input_id: input.id.clone(),
            query: input.query.clone(),
            response: input.response.clone(),
            task_type: input.task_type,
            language,
            initial_observation: initial,
            steps: Vec::new(),
            final_label: None,
        }
    }

    /// Shell for a session that failed before any observation existed.
    pub fn unstarted(input: &DetectionInput) -> Self {
        Self::started(
            input,
            input.resolved_language(),
            Observation::initial(String::new()),
        )
    }

    pub fn last_action(&self) -> Option<&str> {
        self.steps.last().map(|s| s.step.action.tool_name.as_str())
    }
}

/// Why a trajectory was rejected during filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    /// A step calls a tool that is not registered or violates its schema.
    WrongToolInvocation,
    /// A step does not survive a serialize/parse round trip.
    FormattingError,
    /// The final label disagrees with the gold label.
    LabelInconsistent,
    /// The session did not end with exactly one terminal get_answer.
    NoTerminalAnswer,
}

impl RejectionReason {
    pub const ALL: [RejectionReason; 4] = [
        RejectionReason::WrongToolInvocation,
        RejectionReason::FormattingError,
        RejectionReason::LabelInconsistent,
        RejectionReason::NoTerminalAnswer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectionReason::WrongToolInvocation => "wrong_tool_invocation",
            RejectionReason::FormattingError => "formatting_error",
            RejectionReason::LabelInconsistent => "label_inconsistent",
            RejectionReason::NoTerminalAnswer => "no_terminal_answer",
        }
    }
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Check a finished trajectory against the gold label and the toolbox.
/// Returns every applicable rejection reason, deduplicated, in the order
/// of [`RejectionReason::ALL`].
pub fn validate_trajectory(
    trajectory: &Trajectory,
    gold: Label,
    toolbox: &Toolbox,
) -> Result<(), Vec<RejectionReason>> {
    let mut reasons = Vec::new();

    if trajectory
        .steps
        .iter()
        .any(|s| toolbox.validate_call(&s.step.action).is_err())
    {
        reasons.push(RejectionReason::WrongToolInvocation);
    }

    let round_trips = |step: &AgentStep| match parse_step(&serialize_step(step)) {
        Ok(parsed) => parsed == *step,
        Err(_) => false,
    };
    if !trajectory.steps.iter().all(|s| round_trips(&s.step)) {
        reasons.push(RejectionReason::FormattingError);
    }

    if let Some(label) = trajectory.final_label {
        if label != gold {
            reasons.push(RejectionReason::LabelInconsistent);
        }
    }

    let terminal_answers = trajectory
        .steps
        .iter()
        .filter(|s| s.step.action.tool_name == TOOL_GET_ANSWER)
        .count();
    let ends_properly = trajectory.last_action() == Some(TOOL_GET_ANSWER);
    if trajectory.final_label.is_none() || terminal_answers != 1 || !ends_properly {
        reasons.push(RejectionReason::NoTerminalAnswer);
    }

    if reasons.is_empty() {
        Ok(())
    } else {
        Err(reasons)
    }
}

/// Stored form of an accepted trajectory: one JSONL line per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTrajectory {
    pub schema_version: u32,
    pub gold_label: Label,
    pub trajectory: Trajectory,
}

/// A trajectory that failed filtering, kept for quarantine rather than
/// silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectedTrajectory {
    pub schema_version: u32,
    pub input_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset: Option<String>,
    pub reasons: Vec<RejectionReason>,
    /// Session error text when the session itself failed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trajectory: Option<Trajectory>,
}

fn io_err(path: &Path, e: impl fmt::Display) -> ForgeError {
    ForgeError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), ForgeError> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(|e| io_err(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ForgeError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| ForgeError::Schema {
            line: i + 1,
            detail: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_trajectories(path: &Path, records: &[StoredTrajectory]) -> Result<(), ForgeError> {
    save_jsonl(path, records)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<StoredTrajectory>, ForgeError> {
    let records: Vec<StoredTrajectory> = load_jsonl(path)?;
    for (i, record) in records.iter().enumerate() {
        if record.schema_version != SCHEMA_VERSION {
            return Err(ForgeError::Schema {
                line: i + 1,
                detail: format!(
                    "schema version {} is not supported (expected {})",
                    record.schema_version, SCHEMA_VERSION
                ),
            });
        }
    }
    Ok(records)
}

pub fn save_rejected(path: &Path, records: &[RejectedTrajectory]) -> Result<(), ForgeError> {
    save_jsonl(path, records)
}

pub fn load_rejected(path: &Path) -> Result<Vec<RejectedTrajectory>, ForgeError> {
    load_jsonl(path)
}

/// Provides the backend a synthesis worker uses for one input.
pub trait SessionDriver: Sync {
    fn backend_for(&self, input: &DetectionInput) -> Result<Box<dyn ModelBackend>, BackendError>;
}

impl<F> SessionDriver for F
where
    F: Fn(&DetectionInput) -> Result<Box<dyn ModelBackend>, BackendError> + Sync,
{
    fn backend_for(&self, input: &DetectionInput) -> Result<Box<dyn ModelBackend>, BackendError> {
        self(input)
    }
}

/// Drives every session with the deterministic rule-based policy.
pub struct FallbackDriver;

impl SessionDriver for FallbackDriver {
    fn backend_for(&self, input: &DetectionInput) -> Result<Box<dyn ModelBackend>, BackendError> {
        Ok(Box::new(FallbackPolicy::new(input.clone())))
    }
}

/// Per-dataset synthesis accounting; `attempted == accepted + rejected`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YieldRow {
    pub dataset: String,
    pub attempted: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<RejectionReason, usize>,
}

impl YieldRow {
    fn new(dataset: String) -> Self {
        YieldRow {
            dataset,
            attempted: 0,
            accepted: 0,
            rejected: BTreeMap::new(),
        }
    }

    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YieldReport {
    /// One row per dataset, sorted by dataset name.
    pub rows: Vec<YieldRow>,
}

impl YieldReport {
    pub fn totals(&self) -> YieldRow {
        let mut total = YieldRow::new("total".to_string());
        for row in &self.rows {
            total.attempted += row.attempted;
            total.accepted += row.accepted;
            for (reason, count) in &row.rejected {
                *total.rejected.entry(*reason).or_insert(0) += count;
            }
        }
        total
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>9} {:>8} {:>8}",
            "dataset", "attempted", "accepted", "rejected"
        ));
        for reason in RejectionReason::ALL {
            out.push_str(&format!(" {:>21}", reason.as_str()));
        }
        out.push('\n');
        let mut rows: Vec<&YieldRow> = self.rows.iter().collect();
        let total = self.totals();
        rows.push(&total);
        for row in rows {
            out.push_str(&format!(
                "{:<24} {:>9} {:>8} {:>8}",
                row.dataset,
                row.attempted,
                row.accepted,
                row.rejected_total()
            ));
            for reason in RejectionReason::ALL {
                out.push_str(&format!(
                    " {:>21}",
                    row.rejected.get(&reason).copied().unwrap_or(0)
                ));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug)]
pub struct SynthesisResult {
    pub accepted: Vec<StoredTrajectory>,
    pub rejected: Vec<RejectedTrajectory>,
    pub report: YieldReport,
}

enum PerInput {
    Accepted(StoredTrajectory),
    Rejected(RejectedTrajectory),
}

fn synthesize_one(engine: &Engine, driver: &dyn SessionDriver, input: &DetectionInput) -> PerInput {
    let gold = input.gold_label.expect("checked before dispatch");
    let rejected =
        |reasons: Vec<RejectionReason>, error: Option<String>, trajectory: Option<Trajectory>| {
            PerInput::Rejected(RejectedTrajectory {
                schema_version: SCHEMA_VERSION,
                input_id: input.id.clone(),
                dataset: input.dataset.clone(),
                reasons,
                error,
                trajectory,
            })
        };
    let backend = match driver.backend_for(input) {
        Ok(backend) => backend,
        Err(e) => {
            return rejected(
                vec![RejectionReason::NoTerminalAnswer],
                Some(e.to_string()),
                None,
            )
        }
    };
    match engine.run(input, backend.as_ref()) {
        Ok(outcome) => match validate_trajectory(&outcome.trajectory, gold, engine.toolbox()) {
            Ok(()) => PerInput::Accepted(StoredTrajectory {
                schema_version: SCHEMA_VERSION,
                gold_label: gold,
                trajectory: outcome.trajectory,
            }),
            Err(reasons) => rejected(reasons, None, Some(outcome.trajectory)),
        },
        Err(failure) => rejected(
            vec![RejectionReason::NoTerminalAnswer],
            Some(failure.error.to_string()),
            Some(failure.partial),
        ),
    }
}

/// Run sessions over a labeled dataset and filter the results. Inputs are
/// processed across `workers` threads; outputs keep the input order and
/// the yield report rows are sorted by dataset name, so the result is
/// deterministic for deterministic backends.
pub fn synthesize(
    inputs: &[DetectionInput],
    engine: &Engine,
    driver: &dyn SessionDriver,
    workers: usize,
) -> Result<SynthesisResult, ForgeError> {
    for input in inputs {
        if input.gold_label.is_none() {
            return Err(ForgeError::MissingGoldLabel(input.id.clone()));
        }
    }

    let slots: Mutex<Vec<Option<PerInput>>> = Mutex::new((0..inputs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, inputs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= inputs.len() {
                    break;
                }
                let per = synthesize_one(engine, driver, &inputs[i]);
                slots.lock().expect("synthesis slots poisoned")[i] = Some(per);
            });
        }
    });

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut rows: BTreeMap<String, YieldRow> = BTreeMap::new();
    let outcomes = slots.into_inner().expect("synthesis slots poisoned");
    for (input, outcome) in inputs.iter().zip(outcomes) {
        let dataset = input
            .dataset
            .clone()
            .unwrap_or_else(|| "default".to_string());
        let row = rows
            .entry(dataset.clone())
            .or_insert_with(|| YieldRow::new(dataset));
        row.attempted += 1;
        match outcome.expect("worker pool covered every input") {
            PerInput::Accepted(stored) => {
                row.accepted += 1;
                accepted.push(stored);
            }
            PerInput::Rejected(record) => {
                // The first reason is the primary one for accounting.
                let reason = record
                    .reasons
                    .first()
                    .copied()
                    .unwrap_or(RejectionReason::NoTerminalAnswer);
                *row.rejected.entry(reason).or_insert(0) += 1;
                rejected.push(record);
            }
        }
    }
    Ok(SynthesisResult {
        accepted,
        rejected,
        report: YieldReport {
            rows: rows.into_values().collect(),
        },
    })
}

/// One chat turn of a fine-tune example. Only agent turns train; system
/// and environment turns are context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneMessage {
    pub role: Role,
    pub content: String,
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub trajectory_id: String,
    pub messages: Vec<FinetuneMessage>,
}

/// Convert an accepted trajectory into a chat-format training example.
/// The message sequence reproduces the session transcript exactly:
/// system prompt, initial observation, then each step's serialized text
/// followed by its observation.
pub fn export_finetune(
    trajectory: &Trajectory,
    system_prompt: &str,
) -> Result<FinetuneExample, ForgeError> {
    if trajectory.final_label.is_none() || trajectory.last_action() != Some(TOOL_GET_ANSWER) {
        return Err(ForgeError::NotAccepted(trajectory.id.clone()));
    }
    let mut messages = vec![
        FinetuneMessage {
            role: Role::System,
            content: system_prompt.to_string(),
            train: false,
        },
        FinetuneMessage {
            role: Role::Environment,
            content: trajectory.initial_observation.content.clone(),
            train: false,
        },
    ];
    for step in &trajectory.steps {
        messages.push(FinetuneMessage {
            role: Role::Agent,
            content: serialize_step(&step.step),
            train: true,
        });
        messages.push(FinetuneMessage {
            role: Role::Environment,
            content: step.observation.content.clone(),
            train: false,
        });
    }
    Ok(FinetuneExample {
        trajectory_id: trajectory.id.clone(),
        messages,
    })
}

pub fn save_examples(path: &Path, examples: &[FinetuneExample]) -> Result<(), ForgeError> {
    save_jsonl(path, examples)
}

/// Rebuild the interaction sequence from an exported example; inverse of
/// [`export_finetune`] up to the session metadata.
pub fn parse_transcript(
    example: &FinetuneExample,
) -> Result<(Observation, Vec<TrajectoryStep>), ForgeError> {
    let mut messages = example.messages.iter();
    match messages.next() {
        Some(m) if m.role == Role::System && !m.train => {}
        _ => {
            return Err(ForgeError::BadTranscript(
                "first message must be an untrained system prompt".to_string(),
            ))
        }
    }
    let initial = match messages.next() {
        Some(m) if m.role == Role::Environment && !m.train => Observation::initial(&m.content),
        _ => {
            return Err(ForgeError::BadTranscript(
                "second message must be the initial observation".to_string(),
            ))
        }
    };
    let mut steps = Vec::new();
    loop {
        let agent = match messages.next() {
            None => break,
            Some(m) if m.role == Role::Agent && m.train => m,
            Some(m) => {
                return Err(ForgeError::BadTranscript(format!(
                    "expected a trained agent turn, found {:?}",
                    m.role
                )))
            }
        };
        let step = parse_step(&agent.content)
            .map_err(|e| ForgeError::BadTranscript(format!("unparseable agent turn: {e}")))?;
        let observation = match messages.next() {
            Some(m) if m.role == Role::Environment && !m.train => {
                observation_from_content(&m.content)
            }
            _ => {
                return Err(ForgeError::BadTranscript(
                    "every agent turn must be followed by an observation".to_string(),
                ))
            }
        };
        steps.push(TrajectoryStep { step, observation });
    }
    Ok((initial, steps))
}

/// Recover the observation provenance from its rendered content. Error
/// feedback never appears in trajectories, but the prefix is still
/// recognized for robustness.
fn observation_from_content(content: &str) -> Observation {
    if content.starts_with("Observation: error: ") {
        Observation {
            content: content.to_string(),
            source: ObservationSource::ErrorFeedback,
        }
    } else {
        Observation::tool_result(content)
    }
}

/// Write examples as JSONL to any sink; used by the CLI for stdout.
pub fn write_examples(mut sink: impl Write, examples: &[FinetuneExample]) -> std::io::Result<()> {
    for example in examples {
        serde_json::to_writer(&mut sink, example)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}
