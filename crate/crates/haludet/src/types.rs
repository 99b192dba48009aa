//! Shared domain types, label algebra, and the task taxonomy.
//!
//! Everything here is an immutable value object: cheap to clone, safe to
//! share across threads, and serializable for the corpus and trajectory
//! stores.

use serde::{Deserialize, Serialize};

/// Binary hallucination label: `1` iff the unit contains a hallucination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Clean,
    Hallucinated,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Clean => 0,
            Label::Hallucinated => 1,
        }
    }

    pub fn is_hallucinated(self) -> bool {
        matches!(self, Label::Hallucinated)
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Label::Clean),
            1 => Ok(Label::Hallucinated),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Clean => write!(f, "No hallucination"),
            Label::Hallucinated => write!(f, "Hallucination"),
        }
    }
}

/// The five task families a detection input can come from.
///
/// Task type is advisory routing metadata: the agent may still pick any
/// tool, since real responses can mix hallucination types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    KnowledgeQa,
    ConditionalGeneration,
    SemanticConsistency,
    MathSolving,
    CodeGeneration,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::KnowledgeQa,
        TaskType::ConditionalGeneration,
        TaskType::SemanticConsistency,
        TaskType::MathSolving,
        TaskType::CodeGeneration,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::KnowledgeQa => "knowledge_qa",
            TaskType::ConditionalGeneration => "conditional_generation",
            TaskType::SemanticConsistency => "semantic_consistency",
            TaskType::MathSolving => "math_solving",
            TaskType::CodeGeneration => "code_generation",
        }
    }
}

impl std::str::FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knowledge_qa" => Ok(TaskType::KnowledgeQa),
            "conditional_generation" => Ok(TaskType::ConditionalGeneration),
            "semantic_consistency" => Ok(TaskType::SemanticConsistency),
            "math_solving" => Ok(TaskType::MathSolving),
            "code_generation" => Ok(TaskType::CodeGeneration),
            other => Err(format!("unknown task type: {other}")),
        }
    }
}

/// Detection language; selects which instruction template drives the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    English,
    Chinese,
}

impl std::str::FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "english" | "en" => Ok(Language::English),
            "chinese" | "zh" => Ok(Language::Chinese),
            other => Err(format!("unknown language: {other}")),
        }
    }
}

/// One (query, response) unit to be checked for hallucinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInput {
    pub id: String,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    /// Auto-detected from the response when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<Language>,
    /// Present only in labeled corpora used for synthesis and evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
    /// Source dataset tag; groups rows in the synthesis yield report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl DetectionInput {
    pub fn new(
        id: impl Into<String>,
        query: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        DetectionInput {
            id: id.into(),
            query: query.into(),
            response: response.into(),
            task_type: None,
            language: None,
            gold_label: None,
            dataset: None,
        }
    }

    pub fn with_task_type(mut self, task_type: TaskType) -> Self {
        self.task_type = Some(task_type);
        self
    }

    pub fn with_language(mut self, language: Language) -> Self {
        self.language = Some(language);
        self
    }

    pub fn with_gold_label(mut self, label: Label) -> Self {
        self.gold_label = Some(label);
        self
    }

    pub fn with_dataset(mut self, dataset: impl Into<String>) -> Self {
        self.dataset = Some(dataset.into());
        self
    }

    /// Resolved language: explicit value if set, else auto-detected from
    /// the response text.
    pub fn resolved_language(&self) -> Language {
        self.language
            .unwrap_or_else(|| detect_language(&self.response))
    }

    /// A record is usable iff its response is non-empty.
    pub fn validate(&self) -> Result<(), String> {
        if self.response.trim().is_empty() {
            return Err(format!("input {}: response is empty", self.id));
        }
        Ok(())
    }
}

/// Per-sentence detection record: the memory triple of
/// (sentence, hallucination label, supporting evidence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceVerdict {
    pub sentence: String,
    pub label: Label,
    /// Tool output or rationale; non-empty whenever the label is 1.
    pub evidence: String,
    /// Name of the tool that produced the evidence, or "none".
    pub tool_used: String,
    /// Set when every tool attempt was inconclusive and the clean label is
    /// a default rather than a verified result.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_confidence: bool,
}

impl SentenceVerdict {
    pub fn new(
        sentence: impl Into<String>,
        label: Label,
        evidence: impl Into<String>,
        tool_used: impl Into<String>,
    ) -> Self {
        SentenceVerdict {
            sentence: sentence.into(),
            label,
            evidence: evidence.into(),
            tool_used: tool_used.into(),
            low_confidence: false,
        }
    }

    pub fn unverifiable(sentence: impl Into<String>) -> Self {
        SentenceVerdict {
            sentence: sentence.into(),
            label: Label::Clean,
            evidence: "unverifiable".to_string(),
            tool_used: "none".to_string(),
            low_confidence: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.label == Label::Hallucinated && self.evidence.trim().is_empty() {
            return Err("hallucinated verdict must carry evidence".to_string());
        }
        Ok(())
    }
}

/// Final output of one detection session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub input_id: String,
    pub response_label: Label,
    pub verdicts: Vec<SentenceVerdict>,
    pub trajectory_id: String,
    pub turns_used: usize,
}

impl DetectionReport {
    /// The report-level invariant: response label 1 iff any verdict is 1.
    pub fn label_consistent(&self) -> bool {
        self.response_label == aggregate_response_label(&self.verdicts)
    }

    /// Verdicts flagged as hallucinated, in sentence order.
    pub fn flagged(&self) -> impl Iterator<Item = &SentenceVerdict> {
        self.verdicts.iter().filter(|v| v.label.is_hallucinated())
    }
}

/// Response-level label: 1 iff any sentence verdict is 1.
///
/// An empty list aggregates to 0 (no evidence of hallucination) and logs a
/// warning, since a response with zero detectable units is unusual.
pub fn aggregate_response_label(verdicts: &[SentenceVerdict]) -> Label {
    if verdicts.is_empty() {
        log::warn!("aggregating empty verdict list; defaulting to clean");
        return Label::Clean;
    }
    if verdicts.iter().any(|v| v.label.is_hallucinated()) {
        Label::Hallucinated
    } else {
        Label::Clean
    }
}

/// True for code points in the CJK unified ideograph blocks.
pub fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'    // CJK Unified Ideographs
        | '\u{3400}'..='\u{4DBF}'  // Extension A
        | '\u{F900}'..='\u{FAFF}'  // Compatibility Ideographs
        | '\u{20000}'..='\u{2A6DF}' // Extension B
    )
}

/// Deterministic language detection: Chinese iff the fraction of CJK code
/// points among alphabetic code points exceeds 0.3.
pub fn detect_language(text: &str) -> Language {
    let mut letters = 0usize;
    let mut cjk = 0usize;
    for c in text.chars() {
        if c.is_alphabetic() {
            letters += 1;
            if is_cjk(c) {
                cjk += 1;
            }
        }
    }
    if letters > 0 && (cjk as f64) / (letters as f64) > 0.3 {
        Language::Chinese
    } else {
        Language::English
    }
}
