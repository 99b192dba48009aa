//! The detection session loop.
//!
//! A session moves through three phases: segmentation (the response is
//! split into sentences), verification (each sentence gets evidence from a
//! tool and a recorded verdict), and reflection (the verdict table is
//! re-checked for errors that propagate between sentences, then the final
//! answer is emitted). The model drives the loop through the three-line
//! action grammar; the engine executes tools, maintains the verdict
//! memory, and enforces the protocol.

pub mod fallback;
pub mod prompt;

use std::path::PathBuf;

use thiserror::Error;

use crate::action::{parse_step, ActionParseError, Observation, ToolCall};
use crate::backend::{BackendError, ChatMessage, ModelBackend};
use crate::forge::{Trajectory, TrajectoryStep};
use crate::toolbox::{
    self, observation_for, text, ToolError, ToolKind, Toolbox, TOOL_GET_ANSWER,
    TOOL_RECORD_VERDICT, TOOL_SPLIT_TEXT, TOOL_UPDATE_MEMORY,
};
use crate::types::{
    aggregate_response_label, DetectionInput, DetectionReport, Label, SentenceVerdict, TaskType,
};

/// Smallest viable session: split, one verification, reflect, answer.
pub const MIN_TURNS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentationMode {
    /// The engine splits the response itself and lists the sentences in
    /// the initial observation.
    RuleBased,
    /// The model must call split_text before verifying.
    ModelDriven,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub max_turns: usize,
    /// Consecutive malformed turns tolerated before the session fails.
    pub max_parse_retries: usize,
    /// Tool calls allowed per sentence before it is marked unverifiable.
    pub max_tool_calls_per_sentence: usize,
    pub segmentation: SegmentationMode,
    /// Override directory for instruction templates.
    pub template_dir: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_turns: 25,
            max_parse_retries: 3,
            max_tool_calls_per_sentence: 3,
            segmentation: SegmentationMode::RuleBased,
            template_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("turn budget of {max_turns} exhausted before get_answer")]
    TurnBudgetExceeded { max_turns: usize },
    #[error("session failed after {count} consecutive malformed turns")]
    SessionFailed { count: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing template: {0}")]
    MissingTemplate(String),
}

/// A failed session still carries whatever trajectory accumulated, so
/// synthesis can quarantine it instead of losing it.
#[derive(Debug)]
pub struct SessionFailure {
    pub error: SessionError,
    pub partial: Trajectory,
}

impl std::fmt::Display for SessionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for SessionFailure {}

#[derive(Debug)]
pub struct SessionOutcome {
    pub report: DetectionReport,
    pub trajectory: Trajectory,
    /// Full message history including the system prompt and any malformed
    /// turns that were kept out of the trajectory.
    pub transcript: Vec<ChatMessage>,
}

/// Sentence units a detection input is verified over. Code and
/// length-constrained tasks are judged as one unit because their claims
/// concern the response as a whole.
pub fn plan_segments(input: &DetectionInput) -> Vec<String> {
    match input.task_type {
        Some(TaskType::CodeGeneration) | Some(TaskType::ConditionalGeneration) => {
            vec![input.response.trim().to_string()]
        }
        _ => text::segment_sentences(&input.response),
    }
}

const WHOLE_RESPONSE_CUE: &str = "(the complete response shown above)";

fn cue_text(sentence: &str) -> String {
    if sentence.contains('\n') {
        WHOLE_RESPONSE_CUE.to_string()
    } else {
        sentence.to_string()
    }
}

fn flat(sentence: &str) -> String {
    sentence.replace('\n', " ")
}

fn verify_cue(index: usize, sentence: &str) -> String {
    format!("Verify sentence {}: {}", index + 1, cue_text(sentence))
}

fn memory_table(memory: &[SentenceVerdict]) -> String {
    let mut out = String::from("Memory:");
    for (i, v) in memory.iter().enumerate() {
        out.push_str(&format!(
            "\n[{}] label={} tool={} sentence: {}",
            i + 1,
            v.label.as_u8(),
            v.tool_used,
            flat(&v.sentence)
        ));
    }
    out
}

const REFLECT_CUE: &str = "Reflect: a sentence that builds on a hallucinated result is also wrong \
even if it is locally consistent. Apply any fixes with update_memory, then finish with get_answer.";

fn initial_observation(input: &DetectionInput, sentences: Option<&[String]>) -> Observation {
    let task = input.task_type.map(TaskType::as_str).unwrap_or("general");
    let mut content = format!(
        "Observation: Query: {}\nResponse to check:\n{}\nTask type: {}",
        input.query, input.response, task
    );
    match sentences {
        Some(list) => {
            content.push_str("\nSentences to verify:");
            for (i, s) in list.iter().enumerate() {
                content.push_str(&format!("\n[{}] {}", i + 1, cue_text(s)));
            }
            if let Some(first) = list.first() {
                content.push_str(&format!("\n{}", verify_cue(0, first)));
            }
        }
        None => {
            content
                .push_str("\nSplit the response into sentences with split_text before verifying.");
        }
    }
    Observation::initial(content)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Segmentation,
    Verification,
    Reflection,
}

/// How a structurally valid turn was handled.
enum TurnOutcome {
    /// Step executed; record it in the trajectory.
    Executed(Observation),
    /// Step rejected (protocol or argument error); feedback goes into the
    /// history only.
    Feedback(Observation),
    /// Terminal get_answer; record and stop.
    Finished(Observation),
}

pub struct Engine {
    toolbox: Toolbox,
    config: EngineConfig,
}

struct SessionState {
    sentences: Option<Vec<String>>,
    memory: Vec<SentenceVerdict>,
    phase: Phase,
    attempts_on_sentence: usize,
    tool_used_on_sentence: Option<String>,
}

impl SessionState {
    fn current_sentence(&self) -> Option<(usize, &str)> {
        let sentences = self.sentences.as_ref()?;
        let k = self.memory.len();
        sentences.get(k).map(|s| (k, s.as_str()))
    }

    /// Append a verdict and move on; returns the observation tail (next
    /// cue or the reflection entry).
    fn advance(&mut self, verdict: SentenceVerdict) -> String {
        self.memory.push(verdict);
        self.attempts_on_sentence = 0;
        self.tool_used_on_sentence = None;
        let sentences = self
            .sentences
            .as_ref()
            .expect("verifying without sentences");
        if self.memory.len() == sentences.len() {
            self.phase = Phase::Reflection;
            format!(
                "All {} sentence(s) verified.\n{}\n{}",
                sentences.len(),
                memory_table(&self.memory),
                REFLECT_CUE
            )
        } else {
            let k = self.memory.len();
            verify_cue(k, &sentences[k])
        }
    }
}

impl Engine {
    pub fn new(toolbox: Toolbox, config: EngineConfig) -> Self {
        Engine { toolbox, config }
    }

    pub fn toolbox(&self) -> &Toolbox {
        &self.toolbox
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Run a detection session against a model backend.
    // The Err variant carries the partial trajectory on purpose: synthesis
    // quarantines failed sessions instead of discarding them.
    #[allow(clippy::result_large_err)]
    pub fn run(
        &self,
        input: &DetectionInput,
        backend: &dyn ModelBackend,
    ) -> Result<SessionOutcome, SessionFailure> {
        let empty_failure = |error: SessionError| SessionFailure {
            error,
            partial: Trajectory::unstarted(input),
        };
        if let Err(reason) = input.validate() {
            return Err(empty_failure(SessionError::InvalidInput(reason)));
        }
        let language = input.resolved_language();
        let system =
            prompt::system_prompt(language, &self.toolbox, self.config.template_dir.as_deref())
                .map_err(empty_failure)?;
        let max_turns = self.config.max_turns.max(MIN_TURNS);

        let mut state = SessionState {
            sentences: match self.config.segmentation {
                SegmentationMode::RuleBased => Some(plan_segments(input)),
                SegmentationMode::ModelDriven => None,
            },
            memory: Vec::new(),
            phase: match self.config.segmentation {
                SegmentationMode::RuleBased => Phase::Verification,
                SegmentationMode::ModelDriven => Phase::Segmentation,
            },
            attempts_on_sentence: 0,
            tool_used_on_sentence: None,
        };

        let initial = initial_observation(input, state.sentences.as_deref());
        let mut history = vec![
            ChatMessage::system(system),
            ChatMessage::environment(initial.content.clone()),
        ];
        let mut steps: Vec<TrajectoryStep> = Vec::new();
        let mut turns = 0usize;
        let mut parse_streak = 0usize;

        let partial = |steps: &[TrajectoryStep]| Trajectory {
            steps: steps.to_vec(),
            ..Trajectory::started(input, language, initial.clone())
        };

        loop {
            if turns >= max_turns {
                return Err(SessionFailure {
                    error: SessionError::TurnBudgetExceeded { max_turns },
                    partial: partial(&steps),
                });
            }
            let raw = match backend.complete(&history) {
                Ok(raw) => raw,
                Err(e) => {
                    return Err(SessionFailure {
                        error: e.into(),
                        partial: partial(&steps),
                    })
                }
            };
            turns += 1;
            history.push(ChatMessage::agent(&raw));

            let step = match parse_step(&raw) {
                Ok(step) => step,
                Err(e) => {
                    parse_streak += 1;
                    if parse_streak > self.config.max_parse_retries {
                        return Err(SessionFailure {
                            error: SessionError::SessionFailed {
                                count: parse_streak,
                            },
                            partial: partial(&steps),
                        });
                    }
                    let obs = observation_for_parse_error(&e);
                    history.push(ChatMessage::environment(obs.content));
                    continue;
                }
            };
            parse_streak = 0;

            match self.dispatch(&step.action, &mut state) {
                TurnOutcome::Feedback(obs) => {
                    history.push(ChatMessage::environment(obs.content));
                }
                TurnOutcome::Executed(obs) => {
                    history.push(ChatMessage::environment(obs.content.clone()));
                    steps.push(TrajectoryStep {
                        step,
                        observation: obs,
                    });
                }
                TurnOutcome::Finished(obs) => {
                    history.push(ChatMessage::environment(obs.content.clone()));
                    steps.push(TrajectoryStep {
                        step,
                        observation: obs,
                    });
                    let label = aggregate_response_label(&state.memory);
                    let trajectory = Trajectory {
                        final_label: Some(label),
                        steps,
                        ..Trajectory::started(input, language, initial)
                    };
                    let report = DetectionReport {
                        input_id: input.id.clone(),
                        response_label: label,
                        verdicts: state.memory,
                        trajectory_id: trajectory.id.clone(),
                        turns_used: turns,
                    };
                    debug_assert!(report.label_consistent());
                    return Ok(SessionOutcome {
                        report,
                        trajectory,
                        transcript: history,
                    });
                }
            }
        }
    }

    /// Run with the deterministic rule-based policy instead of a model.
    #[allow(clippy::result_large_err)]
    pub fn run_fallback(&self, input: &DetectionInput) -> Result<SessionOutcome, SessionFailure> {
        let policy = fallback::FallbackPolicy::new(input.clone());
        self.run(input, &policy)
    }

    fn dispatch(&self, action: &ToolCall, state: &mut SessionState) -> TurnOutcome {
        match action.tool_name.as_str() {
            TOOL_GET_ANSWER => self.handle_get_answer(action, state),
            TOOL_RECORD_VERDICT => self.handle_record_verdict(action, state),
            TOOL_UPDATE_MEMORY => self.handle_update_memory(action, state),
            TOOL_SPLIT_TEXT if state.phase == Phase::Segmentation => {
                self.handle_segmentation(action, state)
            }
            _ => self.handle_tool(action, state),
        }
    }

    fn handle_get_answer(&self, action: &ToolCall, state: &mut SessionState) -> TurnOutcome {
        if let Err(e) = self.toolbox.validate_call(action) {
            return TurnOutcome::Feedback(Observation::error_feedback(e));
        }
        match state.phase {
            Phase::Reflection => {
                let label = aggregate_response_label(&state.memory);
                let verdicts: Vec<String> = state
                    .memory
                    .iter()
                    .enumerate()
                    .map(|(i, v)| format!("[{}]={}", i + 1, v.label.as_u8()))
                    .collect();
                TurnOutcome::Finished(Observation::tool_result(format!(
                    "Observation: session complete. Response label: {}. Sentence labels: {}.",
                    label.as_u8(),
                    verdicts.join(", ")
                )))
            }
            Phase::Verification => {
                let total = state.sentences.as_ref().map(Vec::len).unwrap_or(0);
                TurnOutcome::Feedback(Observation::error_feedback(format!(
                    "get_answer before verification finished: {} of {} sentence(s) verified",
                    state.memory.len(),
                    total
                )))
            }
            Phase::Segmentation => TurnOutcome::Feedback(Observation::error_feedback(
                "get_answer before any sentence was verified; split the response first",
            )),
        }
    }

    fn handle_record_verdict(&self, action: &ToolCall, state: &mut SessionState) -> TurnOutcome {
        if let Err(e) = self.toolbox.validate_call(action) {
            return TurnOutcome::Feedback(Observation::error_feedback(e));
        }
        match state.phase {
            Phase::Segmentation => TurnOutcome::Feedback(Observation::error_feedback(
                "record_verdict before segmentation; split the response first",
            )),
            Phase::Reflection => TurnOutcome::Feedback(Observation::error_feedback(
                "verification already finished; use update_memory or get_answer",
            )),
            Phase::Verification => {
                let (label, evidence) = match parse_verdict_args(action) {
                    Ok(pair) => pair,
                    Err(e) => return TurnOutcome::Feedback(Observation::error_feedback(e)),
                };
                let Some((index, sentence)) = state.current_sentence() else {
                    return TurnOutcome::Feedback(Observation::error_feedback(
                        "no sentence is pending verification",
                    ));
                };
                let tool_used = state
                    .tool_used_on_sentence
                    .clone()
                    .unwrap_or_else(|| "none".to_string());
                let verdict = SentenceVerdict::new(sentence, label, evidence, tool_used);
                let tail = state.advance(verdict);
                TurnOutcome::Executed(Observation::tool_result(format!(
                    "Observation: verdict for sentence {} recorded. {}",
                    index + 1,
                    tail
                )))
            }
        }
    }

    fn handle_update_memory(&self, action: &ToolCall, state: &mut SessionState) -> TurnOutcome {
        if let Err(e) = self.toolbox.validate_call(action) {
            return TurnOutcome::Feedback(Observation::error_feedback(e));
        }
        if state.phase != Phase::Reflection {
            return TurnOutcome::Feedback(Observation::error_feedback(
                "update_memory is only valid during reflection",
            ));
        }
        let index = match toolbox::int_arg(action, "index") {
            Ok(i) => i,
            Err(e) => return TurnOutcome::Feedback(Observation::error_feedback(e)),
        };
        let (label, evidence) = match parse_verdict_args(action) {
            Ok(pair) => pair,
            Err(e) => return TurnOutcome::Feedback(Observation::error_feedback(e)),
        };
        if index < 1 || index as usize > state.memory.len() {
            log::warn!(
                "update_memory index {index} out of range (memory holds {})",
                state.memory.len()
            );
            return TurnOutcome::Feedback(Observation::error_feedback(format!(
                "update_memory index {index} is out of range (memory holds {})",
                state.memory.len()
            )));
        }
        let entry = &mut state.memory[index as usize - 1];
        entry.label = label;
        entry.evidence = evidence;
        entry.low_confidence = false;
        TurnOutcome::Executed(Observation::tool_result(format!(
            "Observation: memory updated for sentence {index}: label={}.",
            label.as_u8()
        )))
    }

    fn handle_segmentation(&self, action: &ToolCall, state: &mut SessionState) -> TurnOutcome {
        let outcome = self.toolbox.invoke(action);
        match outcome {
            Err(e @ (ToolError::UnknownTool(_) | ToolError::BadArguments(_))) => {
                TurnOutcome::Feedback(Observation::error_feedback(e))
            }
            Err(e) => TurnOutcome::Feedback(Observation::error_feedback(e)),
            Ok(rendered) => {
                let input_text = toolbox::text_arg(action, "text").expect("validated by invoke");
                let segments = text::segment_sentences(&input_text);
                if segments.is_empty() {
                    return TurnOutcome::Feedback(Observation::error_feedback(
                        "split produced no segments; pass the response text",
                    ));
                }
                let cue = verify_cue(0, &segments[0]);
                state.sentences = Some(segments);
                state.phase = Phase::Verification;
                TurnOutcome::Executed(Observation::tool_result(format!(
                    "Observation: {rendered}\n{cue}"
                )))
            }
        }
    }

    fn handle_tool(&self, action: &ToolCall, state: &mut SessionState) -> TurnOutcome {
        if !self.toolbox.contains(&action.tool_name) {
            return TurnOutcome::Feedback(Observation::error_feedback(ToolError::UnknownTool(
                action.tool_name.clone(),
            )));
        }
        if self
            .toolbox
            .spec(&action.tool_name)
            .is_some_and(|s| s.kind == ToolKind::System)
        {
            // A system tool reaching here means a phase mismatch already
            // reported by the dedicated handlers; treat as protocol error.
            return TurnOutcome::Feedback(Observation::error_feedback(format!(
                "{} is not valid now",
                action.tool_name
            )));
        }
        match state.phase {
            Phase::Segmentation => TurnOutcome::Feedback(Observation::error_feedback(
                "split the response with split_text before using other tools",
            )),
            Phase::Reflection => match self.toolbox.invoke(action) {
                Err(e @ (ToolError::UnknownTool(_) | ToolError::BadArguments(_))) => {
                    TurnOutcome::Feedback(Observation::error_feedback(e))
                }
                outcome => TurnOutcome::Executed(observation_for(outcome)),
            },
            Phase::Verification => {
                let Some((index, sentence)) = state.current_sentence() else {
                    return TurnOutcome::Feedback(Observation::error_feedback(
                        "no sentence is pending verification",
                    ));
                };
                if state.attempts_on_sentence >= self.config.max_tool_calls_per_sentence {
                    let sentence = sentence.to_string();
                    let tail = state.advance(SentenceVerdict::unverifiable(sentence));
                    return TurnOutcome::Executed(Observation::tool_result(format!(
                        "Observation: tool budget for sentence {} exhausted; it is recorded \
                         as unverified (label 0, low confidence). {}",
                        index + 1,
                        tail
                    )));
                }
                match self.toolbox.invoke(action) {
                    Err(e @ (ToolError::UnknownTool(_) | ToolError::BadArguments(_))) => {
                        TurnOutcome::Feedback(Observation::error_feedback(e))
                    }
                    Ok(text) => {
                        state.attempts_on_sentence += 1;
                        state.tool_used_on_sentence = Some(action.tool_name.clone());
                        TurnOutcome::Executed(observation_for(Ok(text)))
                    }
                    Err(e) => {
                        state.attempts_on_sentence += 1;
                        TurnOutcome::Executed(observation_for(Err(e)))
                    }
                }
            }
        }
    }
}

fn observation_for_parse_error(e: &ActionParseError) -> Observation {
    Observation::error_feedback(format!(
        "{e}. Reply with exactly:\nThought: <reasoning>\nAction: <tool name>\nAction Input: <single-line JSON object>"
    ))
}

fn parse_verdict_args(action: &ToolCall) -> Result<(Label, String), String> {
    let label = toolbox::int_arg(action, "label").map_err(|e| e.to_string())?;
    let label = match label {
        0 => Label::Clean,
        1 => Label::Hallucinated,
        other => return Err(format!("label must be 0 or 1, got {other}")),
    };
    let evidence = toolbox::text_arg(action, "evidence").map_err(|e| e.to_string())?;
    if evidence.trim().is_empty() {
        return Err("evidence must not be empty".to_string());
    }
    Ok((label, evidence))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::toolbox::{
        CorpusEntry, FixtureSearchProvider, HeuristicJudge, SandboxConfig, SearchDoc, ToolboxDeps,
    };
    use std::sync::Arc;

    fn toolbox() -> Toolbox {
        Toolbox::standard(ToolboxDeps {
            search: Arc::new(FixtureSearchProvider::new(vec![CorpusEntry {
                keywords: vec!["tower".into()],
                docs: vec![SearchDoc {
                    title: "Tower facts".into(),
                    snippet: "The tower is 330 metres tall.".into(),
                }],
            }])),
            judge: Arc::new(HeuristicJudge::new()),
            sandbox: SandboxConfig::default(),
        })
    }

    fn engine() -> Engine {
        Engine::new(toolbox(), EngineConfig::default())
    }

    fn math_input() -> DetectionInput {
        DetectionInput::new("m1", "What is 2 + 2?", "The sum 2 + 2 = 5.")
            .with_task_type(TaskType::MathSolving)
    }

    const VERIFY: &str = "Thought: check the sum with the calculator.\nAction: check_equation\nAction Input: {\"equation\": \"2 + 2 = 5\"}";
    const RECORD_BAD: &str = "Thought: the check failed, so the sentence is hallucinated.\nAction: record_verdict\nAction Input: {\"label\": 1, \"evidence\": \"2 + 2 is 4, not 5\"}";
    const ANSWER: &str = "Thought: the table is consistent.\nAction: get_answer\nAction Input: {}";

    #[test]
    fn scripted_session_flags_a_wrong_sum() {
        let backend = ScriptedBackend::new(vec![
            VERIFY.to_string(),
            RECORD_BAD.to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine().run(&math_input(), &backend).unwrap();
        assert_eq!(outcome.report.response_label, Label::Hallucinated);
        assert_eq!(outcome.report.verdicts.len(), 1);
        assert_eq!(outcome.report.verdicts[0].tool_used, "check_equation");
        assert_eq!(outcome.report.turns_used, 3);
        assert!(outcome.report.label_consistent());
        let traj = &outcome.trajectory;
        assert_eq!(traj.steps.len(), 3);
        assert_eq!(traj.final_label, Some(Label::Hallucinated));
        assert_eq!(
            traj.steps.last().unwrap().step.action.tool_name,
            "get_answer"
        );
        // Tool evidence flows into the observation stream.
        assert!(traj.steps[0]
            .observation
            .content
            .contains("the equation does not hold"));
    }

    #[test]
    fn clean_sentence_with_supporting_evidence_reports_zero() {
        let input = DetectionInput::new(
            "q1",
            "How tall is the tower?",
            "The tower is 330 metres tall.",
        )
        .with_task_type(TaskType::KnowledgeQa);
        let backend = ScriptedBackend::new(vec![
            "Thought: factual claim; search for evidence.\nAction: web_search\nAction Input: {\"query\": \"tower height\"}".to_string(),
            "Thought: the snippet confirms 330 metres.\nAction: record_verdict\nAction Input: {\"label\": 0, \"evidence\": \"search confirms 330 metres\"}".to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine().run(&input, &backend).unwrap();
        assert_eq!(outcome.report.response_label, Label::Clean);
        assert_eq!(outcome.report.verdicts[0].tool_used, "web_search");
    }

    #[test]
    fn session_without_get_answer_exhausts_the_turn_budget() {
        let turns: Vec<String> = (0..30).map(|_| VERIFY.to_string()).collect();
        let backend = ScriptedBackend::new(turns);
        let err = engine().run(&math_input(), &backend).unwrap_err();
        assert!(matches!(
            err.error,
            SessionError::TurnBudgetExceeded { max_turns: 25 }
        ));
        assert!(err.partial.final_label.is_none());
        assert!(!err.partial.steps.is_empty());
    }

    #[test]
    fn consecutive_malformed_turns_fail_the_session() {
        let backend = ScriptedBackend::new(vec![
            "gibberish without an action".to_string(),
            "more gibberish".to_string(),
            "Action: ".to_string(),
            "still not a step".to_string(),
        ]);
        let err = engine().run(&math_input(), &backend).unwrap_err();
        assert!(matches!(
            err.error,
            SessionError::SessionFailed { count: 4 }
        ));
        assert!(err.partial.steps.is_empty());
    }

    #[test]
    fn malformed_turn_followed_by_recovery_succeeds() {
        let backend = ScriptedBackend::new(vec![
            "oops no grammar".to_string(),
            VERIFY.to_string(),
            RECORD_BAD.to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine().run(&math_input(), &backend).unwrap();
        assert_eq!(outcome.report.turns_used, 4);
        // The malformed turn stays in the transcript but not the trajectory.
        assert_eq!(outcome.trajectory.steps.len(), 3);
        assert!(outcome
            .transcript
            .iter()
            .any(|m| m.content.contains("malformed step")));
    }

    #[test]
    fn premature_get_answer_gets_feedback_and_session_recovers() {
        let backend = ScriptedBackend::new(vec![
            ANSWER.to_string(),
            VERIFY.to_string(),
            RECORD_BAD.to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine().run(&math_input(), &backend).unwrap();
        assert_eq!(outcome.report.response_label, Label::Hallucinated);
        // Exactly one get_answer in the trajectory, and it is last.
        let answers = outcome
            .trajectory
            .steps
            .iter()
            .filter(|s| s.step.action.tool_name == "get_answer")
            .count();
        assert_eq!(answers, 1);
    }

    #[test]
    fn tool_budget_marks_sentence_unverifiable() {
        let config = EngineConfig {
            max_tool_calls_per_sentence: 2,
            ..EngineConfig::default()
        };
        let engine = Engine::new(toolbox(), config);
        let searches = "Thought: search.\nAction: web_search\nAction Input: {\"query\": \"nothing known here\"}";
        let backend = ScriptedBackend::new(vec![
            searches.to_string(),
            searches.to_string(),
            searches.to_string(),
            ANSWER.to_string(),
        ]);
        let input = DetectionInput::new("u1", "q", "An unverifiable claim.")
            .with_task_type(TaskType::KnowledgeQa);
        let outcome = engine.run(&input, &backend).unwrap();
        assert_eq!(outcome.report.response_label, Label::Clean);
        let verdict = &outcome.report.verdicts[0];
        assert!(verdict.low_confidence);
        assert_eq!(verdict.evidence, "unverifiable");
        assert_eq!(outcome.report.turns_used, 4);
    }

    #[test]
    fn reflection_updates_relabel_earlier_sentences() {
        let input = DetectionInput::new(
            "r1",
            "Average speed for 140 km?",
            "Total time is 3 + 0.5 + 1.5 = 4 hours. The speed is 140 / 4 = 35 km/h.",
        )
        .with_task_type(TaskType::MathSolving);
        let backend = ScriptedBackend::new(vec![
            "Thought: check the sum.\nAction: check_equation\nAction Input: {\"equation\": \"3 + 0.5 + 1.5 = 4\"}".to_string(),
            "Thought: wrong sum.\nAction: record_verdict\nAction Input: {\"label\": 1, \"evidence\": \"3 + 0.5 + 1.5 = 5, not 4\"}".to_string(),
            "Thought: check the division.\nAction: check_equation\nAction Input: {\"equation\": \"140 / 4 = 35\"}".to_string(),
            "Thought: locally fine.\nAction: record_verdict\nAction Input: {\"label\": 0, \"evidence\": \"140 / 4 is 35\"}".to_string(),
            "Thought: sentence 2 uses the wrong total of 4 hours from sentence 1.\nAction: update_memory\nAction Input: {\"index\": 2, \"label\": 1, \"evidence\": \"depends on the incorrect result of sentence 1\"}".to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine().run(&input, &backend).unwrap();
        assert_eq!(outcome.report.verdicts.len(), 2);
        assert_eq!(outcome.report.verdicts[1].label, Label::Hallucinated);
        assert!(outcome.report.verdicts[1]
            .evidence
            .contains("depends on the incorrect result"));
        assert_eq!(outcome.report.response_label, Label::Hallucinated);
    }

    #[test]
    fn out_of_range_memory_update_is_rejected_and_session_continues() {
        let backend = ScriptedBackend::new(vec![
            VERIFY.to_string(),
            RECORD_BAD.to_string(),
            "Thought: fix entry seven.\nAction: update_memory\nAction Input: {\"index\": 7, \"label\": 0, \"evidence\": \"x\"}".to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine().run(&math_input(), &backend).unwrap();
        // The bad update left memory untouched and out of the trajectory.
        assert_eq!(outcome.report.verdicts.len(), 1);
        assert_eq!(outcome.report.verdicts[0].label, Label::Hallucinated);
        assert_eq!(outcome.trajectory.steps.len(), 3);
        assert!(outcome
            .transcript
            .iter()
            .any(|m| m.content.contains("out of range")));
    }

    #[test]
    fn model_driven_segmentation_goes_through_split_text() {
        let config = EngineConfig {
            segmentation: SegmentationMode::ModelDriven,
            ..EngineConfig::default()
        };
        let engine = Engine::new(toolbox(), config);
        let input = DetectionInput::new("s1", "q", "One claim. Another claim.");
        let backend = ScriptedBackend::new(vec![
            "Thought: split first.\nAction: split_text\nAction Input: {\"text\": \"One claim. Another claim.\"}".to_string(),
            "Thought: no checkable content.\nAction: record_verdict\nAction Input: {\"label\": 0, \"evidence\": \"no factual claim\"}".to_string(),
            "Thought: same.\nAction: record_verdict\nAction Input: {\"label\": 0, \"evidence\": \"no factual claim\"}".to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine.run(&input, &backend).unwrap();
        assert_eq!(outcome.report.verdicts.len(), 2);
        assert_eq!(outcome.report.verdicts[0].sentence, "One claim.");
        assert_eq!(outcome.trajectory.steps.len(), 4);
        assert!(outcome.trajectory.steps[0]
            .observation
            .content
            .contains("Verify sentence 1: One claim."));
    }

    #[test]
    fn verifying_before_split_in_model_driven_mode_is_rejected() {
        let config = EngineConfig {
            segmentation: SegmentationMode::ModelDriven,
            ..EngineConfig::default()
        };
        let engine = Engine::new(toolbox(), config);
        let input = DetectionInput::new("s2", "q", "A claim.");
        let backend = ScriptedBackend::new(vec![
            VERIFY.to_string(),
            "Thought: split.\nAction: split_text\nAction Input: {\"text\": \"A claim.\"}".to_string(),
            "Thought: record.\nAction: record_verdict\nAction Input: {\"label\": 0, \"evidence\": \"fine\"}".to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine.run(&input, &backend).unwrap();
        assert!(outcome
            .transcript
            .iter()
            .any(|m| m.content.contains("split the response")));
        assert_eq!(outcome.report.verdicts.len(), 1);
    }

    #[test]
    fn empty_response_is_rejected_up_front() {
        let input = DetectionInput::new("e1", "q", "   ");
        let backend = ScriptedBackend::new(vec![]);
        let err = engine().run(&input, &backend).unwrap_err();
        assert!(matches!(err.error, SessionError::InvalidInput(_)));
        assert!(err.partial.steps.is_empty());
    }

    #[test]
    fn whole_response_units_for_code_and_length_tasks() {
        let code_input = DetectionInput::new("c1", "q", "```python\nprint(1)\n```")
            .with_task_type(TaskType::CodeGeneration);
        assert_eq!(plan_segments(&code_input).len(), 1);
        let cond_input =
            DetectionInput::new("g1", "Write exactly 5 words.", "One two three four five.")
                .with_task_type(TaskType::ConditionalGeneration);
        assert_eq!(plan_segments(&cond_input).len(), 1);
        let qa_input = DetectionInput::new("k1", "q", "First fact. Second fact.")
            .with_task_type(TaskType::KnowledgeQa);
        assert_eq!(plan_segments(&qa_input).len(), 2);
    }

    #[test]
    fn trajectory_alternation_and_turn_bound_hold() {
        let backend = ScriptedBackend::new(vec![
            VERIFY.to_string(),
            RECORD_BAD.to_string(),
            ANSWER.to_string(),
        ]);
        let outcome = engine().run(&math_input(), &backend).unwrap();
        assert!(outcome.trajectory.steps.len() <= EngineConfig::default().max_turns);
        // Transcript: system, o0, then agent/env pairs.
        assert_eq!(outcome.transcript.len(), 2 + 2 * outcome.report.turns_used);
    }
}
