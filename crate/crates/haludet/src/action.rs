//! Parse and serialize the ReAct-format turns the model emits.
//!
//! The concrete turn grammar is three labeled lines:
//!
//! ```text
//! Thought: <free text>
//! Action: <tool_name>
//! Action Input: {"arg": "value", ...}
//! ```
//!
//! The argument block is a single-line JSON object whose values are text or
//! integers; nested structures are flattened to their compact JSON text.
//! This grammar is part of the prompt contract and is reproduced in the
//! instruction templates, so any change here is a protocol change.
//!
//! Parsing is total: every failure is a typed error the engine can feed
//! back to the model as an error observation. Argument values are validated
//! against the named tool's schema by the registry, not here; unknown keys
//! pass through so that tool-contract errors stay distinct from parse
//! errors.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `word_counter` appears as a prose variant of `word_count`; parsing
/// normalizes it so the registry sees one canonical name.
const TOOL_NAME_ALIASES: [(&str, &str); 1] = [("word_counter", "word_count")];

/// A single argument value: free text or an integer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Int(i64),
    Text(String),
}

impl ArgValue {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            ArgValue::Text(s) => Some(s),
            ArgValue::Int(_) => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ArgValue::Int(n) => Some(*n),
            ArgValue::Text(_) => None,
        }
    }
}

impl std::fmt::Display for ArgValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArgValue::Int(n) => write!(f, "{n}"),
            ArgValue::Text(s) => write!(f, "{s}"),
        }
    }
}

/// A tool invocation: canonical tool name plus an ordered argument map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub arguments: IndexMap<String, ArgValue>,
}

impl ToolCall {
    /// Build a call with the name normalized through the alias table.
    pub fn new(tool_name: impl Into<String>, arguments: IndexMap<String, ArgValue>) -> Self {
        ToolCall {
            tool_name: normalize_tool_name(&tool_name.into()),
            arguments,
        }
    }

    pub fn no_args(tool_name: impl Into<String>) -> Self {
        ToolCall::new(tool_name, IndexMap::new())
    }

    pub fn arg_text(&self, name: &str) -> Option<&str> {
        self.arguments.get(name).and_then(ArgValue::as_text)
    }

    pub fn arg_int(&self, name: &str) -> Option<i64> {
        self.arguments.get(name).and_then(ArgValue::as_int)
    }

    /// True iff the tool name matches the identifier grammar
    /// `[a-z_][a-z0-9_]*`.
    pub fn is_well_formed(&self) -> bool {
        is_identifier(&self.tool_name)
    }
}

/// One model turn: the thought plus the action it invokes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStep {
    /// May be empty; the action is always present in a well-formed step.
    pub thought: String,
    pub action: ToolCall,
}

impl AgentStep {
    pub fn new(thought: impl Into<String>, action: ToolCall) -> Self {
        AgentStep {
            thought: thought.into(),
            action,
        }
    }
}

/// Where an observation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    InitialInput,
    ToolResult,
    ErrorFeedback,
}

/// One environment turn: rendered text plus its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub content: String,
    pub source: ObservationSource,
}

impl Observation {
    pub fn initial(content: impl Into<String>) -> Self {
        Observation {
            content: content.into(),
            source: ObservationSource::InitialInput,
        }
    }

    pub fn tool_result(content: impl Into<String>) -> Self {
        Observation {
            content: content.into(),
            source: ObservationSource::ToolResult,
        }
    }

    pub fn error_feedback(reason: impl std::fmt::Display) -> Self {
        Observation {
            content: format!("Observation: error: {reason}"),
            source: ObservationSource::ErrorFeedback,
        }
    }
}

/// Typed parse failures; the reason text is fed back to the model verbatim
/// as an error observation.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ActionParseError {
    #[error("malformed step: {0}")]
    MalformedStep(String),
    #[error("bad argument syntax: {0}")]
    BadArgumentSyntax(String),
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Map prose-variant tool names onto their canonical registry names.
pub fn normalize_tool_name(name: &str) -> String {
    for (alias, canonical) in TOOL_NAME_ALIASES {
        if name == alias {
            return canonical.to_string();
        }
    }
    name.to_string()
}

/// Strip the label and its single separator space from a grammar line.
fn label_value<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let rest = line.strip_prefix(label)?;
    Some(rest.strip_prefix(' ').unwrap_or(rest))
}

/// Parse one raw model turn into a typed step.
///
/// The thought spans from the `Thought:` label up to the `Action:` line and
/// may be empty or missing. Everything after the `Action Input:` line is
/// ignored, since models often append trailing chatter.
pub fn parse_step(raw: &str) -> Result<AgentStep, ActionParseError> {
    let lines: Vec<&str> = raw.lines().collect();

    let action_idx = lines
        .iter()
        .position(|l| l.starts_with("Action:"))
        .ok_or_else(|| ActionParseError::MalformedStep("no Action line found".to_string()))?;

    let mut thought_lines: Vec<&str> = Vec::new();
    for (i, line) in lines[..action_idx].iter().enumerate() {
        if i == 0 || thought_lines.is_empty() {
            if let Some(rest) = label_value(line, "Thought:") {
                thought_lines.push(rest);
                continue;
            }
            // Tolerate an unlabeled leading thought.
            if !line.trim().is_empty() || !thought_lines.is_empty() {
                thought_lines.push(line);
            }
        } else {
            thought_lines.push(line);
        }
    }
    let thought = thought_lines.join("\n");

    let tool_name = label_value(lines[action_idx], "Action:")
        .map(str::trim)
        .unwrap_or_default();
    if tool_name.is_empty() {
        return Err(ActionParseError::MalformedStep(
            "Action line names no tool".to_string(),
        ));
    }
    let tool_name = normalize_tool_name(tool_name);
    if !is_identifier(&tool_name) {
        return Err(ActionParseError::MalformedStep(format!(
            "tool name {tool_name:?} violates the identifier grammar [a-z_][a-z0-9_]*"
        )));
    }

    let input_line = lines[action_idx + 1..]
        .iter()
        .find_map(|l| label_value(l, "Action Input:"));
    let arguments = match input_line {
        None => IndexMap::new(),
        Some(block) => parse_argument_block(block)?,
    };

    Ok(AgentStep {
        thought,
        action: ToolCall {
            tool_name,
            arguments,
        },
    })
}

/// Parse the single-line JSON argument block. Values other than strings and
/// integers are flattened to their compact JSON text.
fn parse_argument_block(block: &str) -> Result<IndexMap<String, ArgValue>, ActionParseError> {
    let block = block.trim();
    if block.is_empty() {
        return Ok(IndexMap::new());
    }
    let value: serde_json::Value = serde_json::from_str(block)
        .map_err(|e| ActionParseError::BadArgumentSyntax(format!("invalid JSON: {e}")))?;
    let object = value.as_object().ok_or_else(|| {
        ActionParseError::BadArgumentSyntax(format!(
            "argument block must be a JSON object, got: {block}"
        ))
    })?;

    let mut arguments = IndexMap::new();
    for (key, val) in object {
        let arg = match val {
            serde_json::Value::String(s) => ArgValue::Text(s.clone()),
            serde_json::Value::Number(n) if n.is_i64() => ArgValue::Int(n.as_i64().unwrap()),
            other => ArgValue::Text(other.to_string()),
        };
        arguments.insert(key.clone(), arg);
    }
    Ok(arguments)
}

/// Canonical three-line text form; `parse_step` inverts it exactly.
pub fn serialize_step(step: &AgentStep) -> String {
    let mut args = serde_json::Map::new();
    for (name, value) in &step.action.arguments {
        let json = match value {
            ArgValue::Text(s) => serde_json::Value::String(s.clone()),
            ArgValue::Int(n) => serde_json::Value::Number((*n).into()),
        };
        args.insert(name.clone(), json);
    }
    let block = serde_json::Value::Object(args).to_string();
    format!(
        "Thought: {}\nAction: {}\nAction Input: {}",
        step.thought, step.action.tool_name, block
    )
}
