//! Text utilities: word counting, sentence segmentation, and the
//! semantic match judge.
//!
//! Counting follows a mixed-script rule: runs of non-CJK alphanumerics
//! count as one word each, CJK ideographs count one per character. This
//! matches how length constraints are phrased in both English ("200
//! words") and Chinese ("200 字").

use std::sync::Arc;

use crate::backend::{ChatMessage, ModelBackend};
use crate::types::is_cjk;

use super::ToolError;

/// Lowercased tokens: non-CJK alphanumeric runs plus individual CJK chars.
pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(c.to_string());
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Word count used by the `word_count` tool.
pub fn count_words(text: &str) -> usize {
    tokens(text).len()
}

/// Split a response into sentence-sized segments. Terminators stay
/// attached; an ASCII '.' splits only before whitespace so decimals like
/// `0.5` survive, and bare list markers like `1.` do not split.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        current.push(c);
        let hard = matches!(
            c,
            '\u{3002}' | '\u{ff01}' | '\u{ff1f}' | '!' | '?' | ';' | '\u{ff1b}' | '\n'
        );
        let dot = c == '.'
            && chars.get(i + 1).is_none_or(|n| n.is_whitespace())
            && !is_list_marker(&current)
            && !is_abbreviation_dot(&current);
        if hard || dot {
            push_trimmed(&mut out, &mut current);
        }
    }
    push_trimmed(&mut out, &mut current);
    out
}

fn push_trimmed(out: &mut Vec<String>, current: &mut String) {
    let trimmed = current.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
    current.clear();
}

fn is_list_marker(current: &str) -> bool {
    let body = current.trim_start();
    let Some(before_dot) = body.strip_suffix('.') else {
        return false;
    };
    !before_dot.is_empty()
        && before_dot.len() <= 3
        && before_dot.bytes().all(|b| b.is_ascii_digit())
}

/// A '.' that closes an abbreviation like `U.S.` or an initial like `J.`
/// rather than a sentence: the letter before it is either between dots or
/// a lone uppercase letter.
fn is_abbreviation_dot(current: &str) -> bool {
    let cs: Vec<char> = current.chars().collect();
    let n = cs.len();
    if n < 2 || cs[n - 1] != '.' || !cs[n - 2].is_alphabetic() {
        return false;
    }
    match if n >= 3 { Some(cs[n - 3]) } else { None } {
        Some('.') => true,
        Some(c) if c.is_whitespace() => cs[n - 2].is_uppercase(),
        None => cs[n - 2].is_uppercase(),
        _ => false,
    }
}

const STOPWORDS_LATIN: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "being", "of", "to", "in", "on",
    "at", "for", "with", "by", "from", "as", "that", "this", "these", "those", "it", "its", "and",
    "or", "but", "not", "no", "he", "she", "they", "we", "you", "i", "his", "her", "their", "our",
    "your", "my", "do", "does", "did", "have", "has", "had", "will", "would", "can", "could",
    "should", "may", "might", "must", "there", "here", "which", "who", "when", "where", "how",
    "all", "each", "some", "such", "than", "then", "so", "if", "about", "into", "over", "after",
    "before", "between", "during", "up", "down", "out", "also", "per",
];

const STOPWORDS_CJK: &[&str] = &[
    "\u{7684}", "\u{4e86}", "\u{662f}", "\u{5728}", "\u{548c}", "\u{4e0e}", "\u{6216}", "\u{4e5f}",
    "\u{90fd}", "\u{5f88}", "\u{8fd9}", "\u{90a3}", "\u{6709}", "\u{4e0d}", "\u{5c31}", "\u{800c}",
    "\u{88ab}", "\u{628a}", "\u{4e3a}", "\u{4e8e}", "\u{4ee5}", "\u{5176}", "\u{5e76}", "\u{4e2a}",
    "\u{4eec}",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS_LATIN.contains(&token) || STOPWORDS_CJK.contains(&token)
}

/// Content-bearing tokens of a text, i.e. tokens minus stopwords.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Share of the claim's content tokens that also appear in the source.
/// 1.0 for a claim with no content tokens.
pub fn token_coverage(source: &str, claim: &str) -> f64 {
    let claim_tokens = content_tokens(claim);
    if claim_tokens.is_empty() {
        return 1.0;
    }
    let source_tokens: std::collections::HashSet<String> = tokens(source).into_iter().collect();
    let hit = claim_tokens
        .iter()
        .filter(|t| source_tokens.contains(*t))
        .count();
    hit as f64 / claim_tokens.len() as f64
}

/// Yes/no consistency judgment between two texts, used by the `match`
/// tool. The judge sees only the two texts.
pub trait MatchJudge: Send + Sync {
    fn judge(&self, text_a: &str, text_b: &str) -> Result<bool, ToolError>;
}

/// Deterministic lexical judge: the claim matches when enough of its
/// content tokens appear in the source. Crude but stable, which makes it
/// the right default for scripted and offline runs.
pub struct HeuristicJudge {
    threshold: f64,
}

/// Strict enough that swapping one fact token in a five-token claim
/// (coverage 0.8) already counts as a mismatch.
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.85;

impl HeuristicJudge {
    pub fn new() -> Self {
        HeuristicJudge {
            threshold: DEFAULT_COVERAGE_THRESHOLD,
        }
    }

    pub fn with_threshold(threshold: f64) -> Self {
        HeuristicJudge { threshold }
    }
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        HeuristicJudge::new()
    }
}

impl MatchJudge for HeuristicJudge {
    fn judge(&self, text_a: &str, text_b: &str) -> Result<bool, ToolError> {
        Ok(token_coverage(text_a, text_b) >= self.threshold)
    }
}

const JUDGE_PROMPT: &str = include_str!("../../assets/match_judge_prompt.txt");

/// Judge backed by a model completion; expects a bare yes/no answer.
pub struct BackendJudge {
    backend: Arc<dyn ModelBackend>,
    template: String,
}

impl BackendJudge {
    pub fn new(backend: Arc<dyn ModelBackend>) -> Self {
        BackendJudge {
            backend,
            template: JUDGE_PROMPT.to_string(),
        }
    }

    pub fn with_template(backend: Arc<dyn ModelBackend>, template: String) -> Self {
        BackendJudge { backend, template }
    }
}

impl MatchJudge for BackendJudge {
    fn judge(&self, text_a: &str, text_b: &str) -> Result<bool, ToolError> {
        let prompt = self
            .template
            .replace("{{text_a}}", text_a)
            .replace("{{text_b}}", text_b);
        let history = vec![
            ChatMessage::system("You compare two texts and answer with a single word."),
            ChatMessage::environment(prompt),
        ];
        let answer = self
            .backend
            .complete(&history)
            .map_err(|e| ToolError::ExecutionFailed(format!("match judge: {e}")))?;
        let normalized = answer.trim().to_lowercase();
        if normalized.starts_with("yes") {
            Ok(true)
        } else if normalized.starts_with("no") {
            Ok(false)
        } else {
            Err(ToolError::ExecutionFailed(format!(
                "match judge returned neither yes nor no: {answer:?}"
            )))
        }
    }
}
