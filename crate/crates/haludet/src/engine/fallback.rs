//! Deterministic rule-based session policy.
//!
//! The policy implements [`ModelBackend`], so it drives the regular
//! session loop without a model: it reads the engine's cues from the
//! latest observation, routes each sentence to a tool by task type, turns
//! tool results into verdicts, and applies the dependency rule during
//! reflection. Every decision is a pure function of the input and the
//! observations, which makes sessions bit-reproducible.

use std::collections::VecDeque;
use std::sync::Mutex;

use indexmap::IndexMap;
use num_rational::BigRational;

use crate::action::{serialize_step, AgentStep, ArgValue, ToolCall};
use crate::backend::{BackendError, ChatMessage, ModelBackend, Role};
use crate::toolbox::calculator::{self, CalcValue};
use crate::toolbox::text::{token_coverage, DEFAULT_COVERAGE_THRESHOLD};
use crate::toolbox::{
    TOOL_CHECK_EQUATION, TOOL_CODE_INTERPRETER, TOOL_GET_ANSWER, TOOL_MATCH, TOOL_RECORD_VERDICT,
    TOOL_SPLIT_TEXT, TOOL_UPDATE_MEMORY, TOOL_WEB_SEARCH, TOOL_WORD_COUNT,
};
use crate::types::{DetectionInput, Label, TaskType};

use super::plan_segments;

pub struct FallbackPolicy {
    input: DetectionInput,
    sentences: Vec<String>,
    state: Mutex<PolicyState>,
}

#[derive(Default)]
struct PolicyState {
    pending: Option<Pending>,
    /// One entry per verified sentence, in order; equation facts feed the
    /// reflection dependency rule.
    facts: Vec<Fact>,
    /// Reflection updates still to emit; `Some` once reflection started.
    updates: Option<VecDeque<Update>>,
}

struct Pending {
    index: usize,
    route: Route,
}

enum Route {
    Equation { equation: String },
    Search,
    Code,
    WordCount { expected: i64 },
    Match,
}

struct Fact {
    label: Label,
    equation: Option<EquationFact>,
}

struct EquationFact {
    lhs_literals: Vec<BigRational>,
    claimed: Option<BigRational>,
}

struct Update {
    index: usize,
    source: usize,
    value: BigRational,
}

impl FallbackPolicy {
    pub fn new(input: DetectionInput) -> Self {
        let sentences = plan_segments(&input);
        FallbackPolicy {
            input,
            sentences,
            state: Mutex::new(PolicyState::default()),
        }
    }

    fn step(&self, thought: String, tool: &str, args: Vec<(&str, ArgValue)>) -> String {
        let mut arguments = IndexMap::new();
        for (name, value) in args {
            arguments.insert(name.to_string(), value);
        }
        serialize_step(&AgentStep::new(thought, ToolCall::new(tool, arguments)))
    }

    fn text(value: impl Into<String>) -> ArgValue {
        ArgValue::Text(value.into())
    }

    /// Decide how to verify a sentence; either a tool call or an immediate
    /// verdict when there is nothing to execute.
    fn open_sentence(&self, index: usize, state: &mut PolicyState) -> String {
        let sentence = &self.sentences[index];
        let task = self.input.task_type;
        let position = index + 1;

        let equationish = matches!(task, Some(TaskType::MathSolving))
            || (task.is_none() && sentence.contains('='));
        if equationish {
            return match extract_equation(sentence) {
                Some(equation) => {
                    let thought = format!(
                        "Sentence {position} states the calculation {equation}; I will check it."
                    );
                    state.pending = Some(Pending {
                        index,
                        route: Route::Equation {
                            equation: equation.clone(),
                        },
                    });
                    self.step(
                        thought,
                        TOOL_CHECK_EQUATION,
                        vec![("equation", Self::text(equation))],
                    )
                }
                None => self.record(
                    state,
                    index,
                    Label::Clean,
                    "no checkable numeric claim".to_string(),
                    format!("Sentence {position} contains no calculation to check."),
                    None,
                ),
            };
        }

        match task {
            Some(TaskType::CodeGeneration) => match extract_code(&self.input.response) {
                Some(code) => {
                    state.pending = Some(Pending {
                        index,
                        route: Route::Code,
                    });
                    self.step(
                        "The response contains code; I will run it and inspect the output."
                            .to_string(),
                        TOOL_CODE_INTERPRETER,
                        vec![("code", Self::text(code))],
                    )
                }
                None => self.record(
                    state,
                    index,
                    Label::Clean,
                    "no code block to execute".to_string(),
                    "The response contains no code block to run.".to_string(),
                    None,
                ),
            },
            Some(TaskType::ConditionalGeneration) => match first_integer(&self.input.query) {
                Some(expected) => {
                    state.pending = Some(Pending {
                        index,
                        route: Route::WordCount { expected },
                    });
                    self.step(
                        format!(
                            "The instruction asks for exactly {expected} words; I will count the response."
                        ),
                        TOOL_WORD_COUNT,
                        vec![("text", Self::text(self.input.response.trim()))],
                    )
                }
                None => self.record(
                    state,
                    index,
                    Label::Clean,
                    "no length constraint found in the instruction".to_string(),
                    "The instruction states no length constraint.".to_string(),
                    None,
                ),
            },
            Some(TaskType::SemanticConsistency) => {
                state.pending = Some(Pending {
                    index,
                    route: Route::Match,
                });
                self.step(
                    format!("I will compare sentence {position} against the source text."),
                    TOOL_MATCH,
                    vec![
                        ("text_a", Self::text(&self.input.query)),
                        ("text_b", Self::text(sentence)),
                    ],
                )
            }
            _ => {
                state.pending = Some(Pending {
                    index,
                    route: Route::Search,
                });
                self.step(
                    format!("Sentence {position} makes a factual claim; I will look for evidence."),
                    TOOL_WEB_SEARCH,
                    vec![("query", Self::text(sentence))],
                )
            }
        }
    }

    /// Emit a record_verdict step and remember the fact for reflection.
    fn record(
        &self,
        state: &mut PolicyState,
        index: usize,
        label: Label,
        evidence: String,
        thought: String,
        equation: Option<EquationFact>,
    ) -> String {
        debug_assert_eq!(state.facts.len(), index);
        state.facts.push(Fact { label, equation });
        state.pending = None;
        self.step(
            thought,
            TOOL_RECORD_VERDICT,
            vec![
                ("label", ArgValue::Int(label.as_u8() as i64)),
                ("evidence", Self::text(evidence)),
            ],
        )
    }

    /// Turn the observation for a pending tool call into a verdict.
    fn close_sentence(&self, observation: &str, state: &mut PolicyState) -> String {
        let pending = state.pending.take().expect("pending sentence");
        let index = pending.index;
        let sentence = &self.sentences[index];
        let failed = observation.starts_with("Observation: error:");
        let detail = observation.trim_start_matches("Observation: ").trim();

        let (label, evidence, thought, equation) = match pending.route {
            Route::Equation { equation } => {
                if failed {
                    (
                        Label::Clean,
                        format!("could not check {equation}: {detail}"),
                        "The check failed to run; I cannot refute the sentence.".to_string(),
                        None,
                    )
                } else {
                    let holds = observation.contains("the equation holds");
                    let fact = equation_fact(&equation);
                    if holds {
                        (
                            Label::Clean,
                            format!("{equation}: {detail}"),
                            "The calculation checks out, so the sentence is supported.".to_string(),
                            Some(fact),
                        )
                    } else {
                        (
                            Label::Hallucinated,
                            format!("{equation}: {detail}"),
                            "The check shows the calculation is wrong, so the sentence is hallucinated."
                                .to_string(),
                            Some(fact),
                        )
                    }
                }
            }
            Route::Search => {
                if failed {
                    (
                        Label::Clean,
                        format!("no supporting evidence found ({detail})"),
                        "Nothing was found either way; I cannot refute the sentence.".to_string(),
                        None,
                    )
                } else if token_coverage(observation, sentence) >= DEFAULT_COVERAGE_THRESHOLD {
                    (
                        Label::Clean,
                        "the search results support the sentence".to_string(),
                        "The evidence covers the claim, so the sentence is supported.".to_string(),
                        None,
                    )
                } else {
                    (
                        Label::Hallucinated,
                        "the search results do not support the sentence".to_string(),
                        "The evidence does not back the claim, so the sentence is hallucinated."
                            .to_string(),
                        None,
                    )
                }
            }
            Route::Code => {
                if failed {
                    (
                        Label::Clean,
                        format!("could not execute the code ({detail})"),
                        "The sandbox was unavailable; I cannot refute the code.".to_string(),
                        None,
                    )
                } else {
                    let exit_zero = observation.contains("exit status: 0");
                    let stdout = stdout_section(observation);
                    let expected = expected_output(&self.input.query);
                    if !exit_zero {
                        (
                            Label::Hallucinated,
                            format!("the code does not run: {detail}"),
                            "The code fails to execute, so the response is wrong.".to_string(),
                            None,
                        )
                    } else if let Some(expected) = expected {
                        if stdout.trim() == expected {
                            (
                                Label::Clean,
                                format!("the code prints {expected:?} as required"),
                                "The output matches the requirement.".to_string(),
                                None,
                            )
                        } else {
                            (
                                Label::Hallucinated,
                                format!(
                                    "the code prints {:?} but the task asks for {expected:?}",
                                    stdout.trim()
                                ),
                                "The output does not match the requirement.".to_string(),
                                None,
                            )
                        }
                    } else {
                        (
                            Label::Clean,
                            "the code runs without errors".to_string(),
                            "The code executes cleanly and no expected output is stated."
                                .to_string(),
                            None,
                        )
                    }
                }
            }
            Route::WordCount { expected } => {
                let counted = first_integer(detail);
                match counted {
                    Some(count) if !failed => {
                        if count == expected {
                            (
                                Label::Clean,
                                format!("the response has exactly {count} words as required"),
                                "The length matches the instruction.".to_string(),
                                None,
                            )
                        } else {
                            (
                                Label::Hallucinated,
                                format!(
                                    "the response has {count} words but the instruction asks for exactly {expected}"
                                ),
                                "The length breaks the instruction.".to_string(),
                                None,
                            )
                        }
                    }
                    _ => (
                        Label::Clean,
                        format!("could not count words ({detail})"),
                        "Counting failed; I cannot refute the sentence.".to_string(),
                        None,
                    ),
                }
            }
            Route::Match => {
                if observation.contains("match = no") {
                    (
                        Label::Hallucinated,
                        "the sentence conflicts with the source text".to_string(),
                        "The judge finds the sentence inconsistent with the source.".to_string(),
                        None,
                    )
                } else if observation.contains("match = yes") {
                    (
                        Label::Clean,
                        "the sentence is consistent with the source text".to_string(),
                        "The judge confirms the sentence against the source.".to_string(),
                        None,
                    )
                } else {
                    (
                        Label::Clean,
                        format!("could not judge the sentence ({detail})"),
                        "The judge failed; I cannot refute the sentence.".to_string(),
                        None,
                    )
                }
            }
        };
        self.record(state, index, label, evidence, thought, equation)
    }

    /// Dependency rule: a clean equation whose left side consumes the
    /// claimed result of an earlier wrong equation is wrong as well.
    fn compute_updates(&self, state: &mut PolicyState) -> VecDeque<Update> {
        let mut updates = VecDeque::new();
        let mut labels: Vec<Label> = state.facts.iter().map(|f| f.label).collect();
        for source in 0..state.facts.len() {
            if labels[source] != Label::Hallucinated {
                continue;
            }
            let Some(equation) = &state.facts[source].equation else {
                continue;
            };
            let Some(claimed) = &equation.claimed else {
                continue;
            };
            for (later, fact) in state.facts.iter().enumerate().skip(source + 1) {
                if labels[later] == Label::Hallucinated {
                    continue;
                }
                let Some(dependent) = &fact.equation else {
                    continue;
                };
                if dependent.lhs_literals.contains(claimed) {
                    labels[later] = Label::Hallucinated;
                    updates.push_back(Update {
                        index: later,
                        source,
                        value: claimed.clone(),
                    });
                }
            }
        }
        updates
    }
}

impl ModelBackend for FallbackPolicy {
    fn complete(&self, history: &[ChatMessage]) -> Result<String, BackendError> {
        let last = history
            .iter()
            .rev()
            .find(|m| m.role == Role::Environment)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let mut state = self.state.lock().expect("policy state poisoned");

        // Reflection: drain the computed updates, then finish.
        if last.lines().any(|l| l.starts_with("Reflect:")) && state.updates.is_none() {
            let updates = self.compute_updates(&mut state);
            state.updates = Some(updates);
        }
        if let Some(updates) = &mut state.updates {
            return Ok(match updates.pop_front() {
                Some(update) => {
                    let thought = format!(
                        "Sentence {} builds on the wrong result of sentence {}, so it is also incorrect.",
                        update.index + 1,
                        update.source + 1
                    );
                    let evidence = format!(
                        "depends on the incorrect result of sentence {}: the value {} comes from a wrong calculation",
                        update.source + 1,
                        calculator::format_value(&CalcValue::Exact(update.value.clone()))
                    );
                    self.step(
                        thought,
                        TOOL_UPDATE_MEMORY,
                        vec![
                            ("index", ArgValue::Int(update.index as i64 + 1)),
                            ("label", ArgValue::Int(1)),
                            ("evidence", Self::text(evidence)),
                        ],
                    )
                }
                None => self.step(
                    "All sentences are verified and the verdict table is consistent; I will report the result."
                        .to_string(),
                    TOOL_GET_ANSWER,
                    vec![],
                ),
            });
        }

        // A new sentence cue supersedes any stale pending route.
        if let Some(index) = last_verify_cue(last) {
            state.pending = None;
            if index < self.sentences.len() {
                return Ok(self.open_sentence(index, &mut state));
            }
        }

        if state.pending.is_some() {
            return Ok(self.close_sentence(last, &mut state));
        }

        if last.contains("Split the response into sentences") {
            return Ok(self.step(
                "I will split the response into sentences first.".to_string(),
                TOOL_SPLIT_TEXT,
                vec![("text", Self::text(&self.input.response))],
            ));
        }

        // Unexpected state; attempt to finish rather than loop on tools.
        Ok(self.step(
            "Nothing is pending; I will report the result.".to_string(),
            TOOL_GET_ANSWER,
            vec![],
        ))
    }
}

/// Index (0-based) of the sentence named by the last "Verify sentence k:"
/// cue in the observation. The cue may sit mid-line after a recording
/// acknowledgement.
fn last_verify_cue(observation: &str) -> Option<usize> {
    let marker = "Verify sentence ";
    let at = observation.rfind(marker)?;
    let rest = &observation[at + marker.len()..];
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    match digits.parse::<usize>() {
        Ok(k) if k > 0 => Some(k - 1),
        _ => None,
    }
}

/// Longest run of arithmetic characters containing both '=' and a digit,
/// with a sentence-final period stripped.
pub fn extract_equation(sentence: &str) -> Option<String> {
    let allowed = |c: char| c.is_ascii_digit() || " +-*/^%().=".contains(c);
    let mut best: Option<String> = None;
    let mut current = String::new();
    for c in sentence.chars().chain(std::iter::once('\u{0}')) {
        if allowed(c) && c != '\u{0}' {
            current.push(c);
            continue;
        }
        let candidate = current.trim();
        if candidate.contains('=') && candidate.chars().any(|ch| ch.is_ascii_digit()) {
            let candidate = candidate.trim_end_matches('.').trim();
            if best.as_ref().is_none_or(|b| candidate.len() > b.len()) {
                best = Some(candidate.to_string());
            }
        }
        current.clear();
    }
    best
}

fn equation_fact(equation: &str) -> EquationFact {
    let mut segments: Vec<&str> = equation.split('=').collect();
    let claimed = segments
        .pop()
        .and_then(|last| calculator::evaluate(last).ok())
        .and_then(|v| v.as_exact().cloned());
    let lhs_literals = segments
        .iter()
        .flat_map(|s| calculator::scan_numbers(s))
        .collect();
    EquationFact {
        lhs_literals,
        claimed,
    }
}

/// Body of the first fenced code block, if any.
pub fn extract_code(response: &str) -> Option<String> {
    let open = response.find("```")?;
    let after_fence = &response[open + 3..];
    let body_start = after_fence.find('\n')? + 1;
    let body = &after_fence[body_start..];
    let close = body.find("```")?;
    Some(body[..close].trim_end().to_string())
}

/// First integer appearing in the text.
pub fn first_integer(text: &str) -> Option<i64> {
    let mut digits = String::new();
    for c in text.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else if !digits.is_empty() {
            break;
        }
    }
    if digits.is_empty() {
        None
    } else {
        digits.parse().ok()
    }
}

/// Quoted literal after "prints" or "outputs" in a task description.
pub fn expected_output(query: &str) -> Option<String> {
    for marker in ["prints \"", "outputs \""] {
        if let Some(at) = query.find(marker) {
            let rest = &query[at + marker.len()..];
            if let Some(end) = rest.find('"') {
                return Some(rest[..end].to_string());
            }
        }
    }
    None
}

fn stdout_section(observation: &str) -> &str {
    let Some(start) = observation.find("stdout:\n") else {
        return "";
    };
    let rest = &observation[start + "stdout:\n".len()..];
    match rest.find("\nstderr:") {
        Some(end) => &rest[..end],
        None => rest,
    }
}
