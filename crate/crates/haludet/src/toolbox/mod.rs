//! The tool registry and the standard verification tools.
//!
//! Every tool is declared by a [`ToolSpec`] (name, argument schema, usage
//! examples) and backed by an executor. Calls are validated against the
//! schema before execution, so executors can assume well-typed arguments.
//! Deployments can register additional tools at runtime; the prompt
//! catalog picks them up automatically.

pub mod calculator;
pub mod equation;
pub mod extensions;
pub mod sandbox;
pub mod search;
pub mod text;

use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ArgValue, Observation, ToolCall};

pub use sandbox::SandboxConfig;
pub use search::{CorpusEntry, FixtureSearchProvider, SearchDoc, SearchProvider, TOP_DOCUMENTS};
pub use text::{HeuristicJudge, MatchJudge};

pub const TOOL_WEB_SEARCH: &str = "web_search";
pub const TOOL_CALCULATOR: &str = "calculator";
pub const TOOL_CHECK_EQUATION: &str = "check_equation";
pub const TOOL_CODE_INTERPRETER: &str = "code_interpreter";
pub const TOOL_WORD_COUNT: &str = "word_count";
pub const TOOL_MATCH: &str = "match";
pub const TOOL_SPLIT_TEXT: &str = "split_text";
pub const TOOL_RECORD_VERDICT: &str = "record_verdict";
pub const TOOL_UPDATE_MEMORY: &str = "update_memory";
pub const TOOL_GET_ANSWER: &str = "get_answer";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("bad arguments: {0}")]
    BadArguments(String),
    #[error("tool execution failed: {0}")]
    ExecutionFailed(String),
    #[error("no evidence found for the query")]
    NoEvidence,
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("tool timed out after {seconds}s")]
    Timeout { seconds: u64 },
    #[error("a tool named {0:?} is already registered")]
    DuplicateName(String),
    #[error("invalid tool schema: {0}")]
    InvalidSchema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgKind {
    Text,
    Int,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub kind: ArgKind,
    pub required: bool,
    pub description: String,
}

impl ArgSpec {
    pub fn required(name: &str, kind: ArgKind, description: &str) -> Self {
        ArgSpec {
            name: name.to_string(),
            kind,
            required: true,
            description: description.to_string(),
        }
    }

    pub fn optional(name: &str, kind: ArgKind, description: &str) -> Self {
        ArgSpec {
            required: false,
            ..ArgSpec::required(name, kind, description)
        }
    }
}

/// How a tool participates in a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    /// Gathers evidence about a sentence.
    Verification,
    /// Splits the response into checkable units.
    Segmentation,
    /// Protocol action interpreted by the session loop, not executed here.
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub kind: ToolKind,
    pub args: Vec<ArgSpec>,
    /// Verbatim usage examples spliced into the agent prompt; essential
    /// for tools registered at runtime that the model has never seen.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<String>,
}

impl ToolSpec {
    fn arg(&self, name: &str) -> Option<&ArgSpec> {
        self.args.iter().find(|a| a.name == name)
    }
}

pub trait ToolExecutor: Send + Sync {
    fn run(&self, call: &ToolCall) -> Result<String, ToolError>;
}

impl<F> ToolExecutor for F
where
    F: Fn(&ToolCall) -> Result<String, ToolError> + Send + Sync,
{
    fn run(&self, call: &ToolCall) -> Result<String, ToolError> {
        self(call)
    }
}

/// Fetch a text argument, accepting an integer and rendering it.
pub fn text_arg(call: &ToolCall, name: &str) -> Result<String, ToolError> {
    match call.arguments.get(name) {
        Some(ArgValue::Text(s)) => Ok(s.clone()),
        Some(ArgValue::Int(n)) => Ok(n.to_string()),
        None => Err(ToolError::BadArguments(format!(
            "missing required argument {name:?}"
        ))),
    }
}

/// Fetch an integer argument, accepting a string that parses as one.
pub fn int_arg(call: &ToolCall, name: &str) -> Result<i64, ToolError> {
    match call.arguments.get(name) {
        Some(ArgValue::Int(n)) => Ok(*n),
        Some(ArgValue::Text(s)) => s.trim().parse().map_err(|_| {
            ToolError::BadArguments(format!("argument {name:?} must be an integer, got {s:?}"))
        }),
        None => Err(ToolError::BadArguments(format!(
            "missing required argument {name:?}"
        ))),
    }
}

struct RegisteredTool {
    spec: ToolSpec,
    executor: Box<dyn ToolExecutor>,
}

/// Shared state the standard tools close over.
pub struct ToolboxDeps {
    pub search: Arc<dyn SearchProvider>,
    pub judge: Arc<dyn MatchJudge>,
    pub sandbox: SandboxConfig,
}

/// Registry of callable tools. Iteration order is registration order,
/// which is also the order tools appear in the prompt catalog.
#[derive(Default)]
pub struct Toolbox {
    tools: IndexMap<String, RegisteredTool>,
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl Toolbox {
    pub fn empty() -> Self {
        Toolbox::default()
    }

    /// The standard toolbox: search, exact arithmetic, equation checking,
    /// sandboxed code, word counting, semantic match, segmentation, and
    /// the three protocol actions.
    pub fn standard(deps: ToolboxDeps) -> Self {
        let mut toolbox = Toolbox::empty();
        let ToolboxDeps {
            search,
            judge,
            sandbox,
        } = deps;

        toolbox
            .register(
                ToolSpec {
                    name: TOOL_WEB_SEARCH.to_string(),
                    description:
                        "Search for documents about a query; returns up to five titled snippets"
                            .to_string(),
                    kind: ToolKind::Verification,
                    args: vec![ArgSpec::required("query", ArgKind::Text, "search query")],
                    examples: vec![],
                },
                move |call: &ToolCall| {
                    let query = text_arg(call, "query")?;
                    search::run_search(search.as_ref(), &query)
                },
            )
            .expect("standard tool");

        toolbox
            .register(
                ToolSpec {
                    name: TOOL_CALCULATOR.to_string(),
                    description: "Evaluate an arithmetic formula exactly; supports + - * / ^ % and parentheses".to_string(),
                    kind: ToolKind::Verification,
                    args: vec![ArgSpec::required("formula", ArgKind::Text, "expression without '='")],
                    examples: vec![],
                },
                |call: &ToolCall| {
                    let formula = text_arg(call, "formula")?;
                    let value = calculator::evaluate(&formula)
                        .map_err(|e| ToolError::ExecutionFailed(e.to_string()))?;
                    Ok(format!("result = {}", calculator::format_value(&value)))
                },
            )
            .expect("standard tool");

        toolbox
            .register(
                ToolSpec {
                    name: TOOL_CHECK_EQUATION.to_string(),
                    description: "Check whether the sides of an equation are equal, optionally within a relative tolerance".to_string(),
                    kind: ToolKind::Verification,
                    args: vec![
                        ArgSpec::required("equation", ArgKind::Text, "equation containing '='"),
                        ArgSpec::optional("tolerance", ArgKind::Text, "relative tolerance, e.g. 1e-6"),
                    ],
                    examples: vec![],
                },
                |call: &ToolCall| {
                    let formula = text_arg(call, "equation")?;
                    let tolerance = match call.arguments.get("tolerance") {
                        None => None,
                        Some(_) => {
                            let raw = text_arg(call, "tolerance")?;
                            Some(raw.trim().parse::<f64>().map_err(|_| {
                                ToolError::BadArguments(format!(
                                    "tolerance {raw:?} is not a number"
                                ))
                            })?)
                        }
                    };
                    let check = equation::check_equation(&formula, tolerance)
                        .map_err(|e| ToolError::ExecutionFailed(e.to_string()))?;
                    Ok(equation::format_check(&check))
                },
            )
            .expect("standard tool");

        toolbox
            .register(
                ToolSpec {
                    name: TOOL_CODE_INTERPRETER.to_string(),
                    description:
                        "Run a short code snippet in a sandboxed interpreter and capture its output"
                            .to_string(),
                    kind: ToolKind::Verification,
                    args: vec![ArgSpec::required(
                        "code",
                        ArgKind::Text,
                        "snippet to execute",
                    )],
                    examples: vec![],
                },
                move |call: &ToolCall| {
                    let code = text_arg(call, "code")?;
                    sandbox::run_code(&sandbox, &code)
                },
            )
            .expect("standard tool");

        toolbox
            .register(
                ToolSpec {
                    name: TOOL_WORD_COUNT.to_string(),
                    description: "Count words: non-CJK words count by token, CJK text by character"
                        .to_string(),
                    kind: ToolKind::Verification,
                    args: vec![ArgSpec::required("text", ArgKind::Text, "text to count")],
                    examples: vec![],
                },
                |call: &ToolCall| {
                    let text = text_arg(call, "text")?;
                    Ok(format!("word count = {}", text::count_words(&text)))
                },
            )
            .expect("standard tool");

        toolbox
            .register(
                ToolSpec {
                    name: TOOL_MATCH.to_string(),
                    description: "Judge whether text_b is semantically consistent with text_a"
                        .to_string(),
                    kind: ToolKind::Verification,
                    args: vec![
                        ArgSpec::required("text_a", ArgKind::Text, "source text"),
                        ArgSpec::required("text_b", ArgKind::Text, "claim to check"),
                    ],
                    examples: vec![],
                },
                move |call: &ToolCall| {
                    let a = text_arg(call, "text_a")?;
                    let b = text_arg(call, "text_b")?;
                    let verdict = judge.judge(&a, &b)?;
                    Ok(format!("match = {}", if verdict { "yes" } else { "no" }))
                },
            )
            .expect("standard tool");

        toolbox
            .register(
                ToolSpec {
                    name: TOOL_SPLIT_TEXT.to_string(),
                    description: "Split a text into sentence-sized segments".to_string(),
                    kind: ToolKind::Segmentation,
                    args: vec![ArgSpec::required("text", ArgKind::Text, "text to split")],
                    examples: vec![],
                },
                |call: &ToolCall| {
                    let input = text_arg(call, "text")?;
                    let segments = text::segment_sentences(&input);
                    let mut out = format!("{} segment(s):", segments.len());
                    for (i, segment) in segments.iter().enumerate() {
                        out.push_str(&format!("\n[{}] {}", i + 1, segment));
                    }
                    Ok(out)
                },
            )
            .expect("standard tool");

        for spec in [
            ToolSpec {
                name: TOOL_RECORD_VERDICT.to_string(),
                description: "Record the verdict for the sentence currently under verification; label 1 flags a hallucination, 0 clears it".to_string(),
                kind: ToolKind::System,
                args: vec![
                    ArgSpec::required("label", ArgKind::Int, "0 or 1"),
                    ArgSpec::required("evidence", ArgKind::Text, "why the label holds"),
                ],
                examples: vec![],
            },
            ToolSpec {
                name: TOOL_UPDATE_MEMORY.to_string(),
                description: "Replace the verdict for an earlier sentence during reflection".to_string(),
                kind: ToolKind::System,
                args: vec![
                    ArgSpec::required("index", ArgKind::Int, "1-based sentence number"),
                    ArgSpec::required("label", ArgKind::Int, "0 or 1"),
                    ArgSpec::required("evidence", ArgKind::Text, "why the label changed"),
                ],
                examples: vec![],
            },
            ToolSpec {
                name: TOOL_GET_ANSWER.to_string(),
                description: "Finish the session and report the verdicts currently in memory".to_string(),
                kind: ToolKind::System,
                args: vec![],
                examples: vec![],
            },
        ] {
            let name = spec.name.clone();
            toolbox
                .register(spec, move |_call: &ToolCall| {
                    Err(ToolError::ExecutionFailed(format!(
                        "{name} is interpreted by the session loop"
                    )))
                })
                .expect("standard tool");
        }

        toolbox
    }

    /// Register a tool at runtime. The schema is checked up front so a bad
    /// registration fails at startup rather than mid-session.
    pub fn register(
        &mut self,
        spec: ToolSpec,
        executor: impl ToolExecutor + 'static,
    ) -> Result<(), ToolError> {
        if !is_identifier(&spec.name) {
            return Err(ToolError::InvalidSchema(format!(
                "tool name {:?} must be snake_case",
                spec.name
            )));
        }
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::DuplicateName(spec.name));
        }
        let mut seen = std::collections::HashSet::new();
        for arg in &spec.args {
            if !is_identifier(&arg.name) {
                return Err(ToolError::InvalidSchema(format!(
                    "argument name {:?} must be snake_case",
                    arg.name
                )));
            }
            if !seen.insert(arg.name.as_str()) {
                return Err(ToolError::InvalidSchema(format!(
                    "duplicate argument {:?}",
                    arg.name
                )));
            }
        }
        self.tools.insert(
            spec.name.clone(),
            RegisteredTool {
                spec,
                executor: Box::new(executor),
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|t| &t.spec)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values().map(|t| &t.spec)
    }

    /// Check a call against the registered schema without executing it.
    pub fn validate_call(&self, call: &ToolCall) -> Result<(), ToolError> {
        let spec = self
            .spec(&call.tool_name)
            .ok_or_else(|| ToolError::UnknownTool(call.tool_name.clone()))?;
        for arg in &spec.args {
            match (call.arguments.get(&arg.name), arg.kind) {
                (None, _) if arg.required => {
                    return Err(ToolError::BadArguments(format!(
                        "{} is missing required argument {:?}",
                        spec.name, arg.name
                    )));
                }
                (None, _) => {}
                (Some(ArgValue::Int(_)), _) => {}
                (Some(ArgValue::Text(_)), ArgKind::Text) => {}
                (Some(ArgValue::Text(s)), ArgKind::Int) => {
                    if s.trim().parse::<i64>().is_err() {
                        return Err(ToolError::BadArguments(format!(
                            "{} argument {:?} must be an integer, got {s:?}",
                            spec.name, arg.name
                        )));
                    }
                }
            }
        }
        for name in call.arguments.keys() {
            if spec.arg(name).is_none() {
                return Err(ToolError::BadArguments(format!(
                    "{} does not take an argument named {name:?}",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    /// Validate and execute a call.
    pub fn invoke(&self, call: &ToolCall) -> Result<String, ToolError> {
        self.validate_call(call)?;
        let tool = self
            .tools
            .get(&call.tool_name)
            .expect("validated tool exists");
        tool.executor.run(call)
    }

    /// Human-readable tool list for the agent prompt.
    pub fn render_catalog(&self) -> String {
        let mut out = String::new();
        for spec in self.specs() {
            let args: Vec<String> = spec
                .args
                .iter()
                .map(|a| {
                    format!(
                        "{}{}: {}",
                        a.name,
                        if a.required { "" } else { "?" },
                        match a.kind {
                            ArgKind::Text => "text",
                            ArgKind::Int => "int",
                        }
                    )
                })
                .collect();
            out.push_str(&format!(
                "- {}({}): {}\n",
                spec.name,
                args.join(", "),
                spec.description
            ));
            for example in &spec.examples {
                out.push_str("  example:\n");
                for line in example.lines() {
                    out.push_str(&format!("    {line}\n"));
                }
            }
        }
        out
    }
}

/// Turn a tool outcome into the observation fed back to the model.
pub fn observation_for(outcome: Result<String, ToolError>) -> Observation {
    match outcome {
        Ok(text) => Observation::tool_result(format!("Observation: {text}")),
        Err(e) => Observation::error_feedback(e),
    }
}
