//! Evidence retrieval behind the `web_search` tool.
//!
//! Providers are pluggable; the tool itself only caps results at the top
//! five documents and renders them into an observation. An empty result
//! set is surfaced as [`ToolError::NoEvidence`] so the agent can tell
//! "nothing found" apart from "found and irrelevant".

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::tokens;
use super::ToolError;

/// Maximum number of documents a search observation may carry.
pub const TOP_DOCUMENTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchDoc {
    pub title: String,
    pub snippet: String,
}

pub trait SearchProvider: Send + Sync {
    fn search(&self, query: &str) -> Result<Vec<SearchDoc>, ToolError>;
}

impl<F> SearchProvider for F
where
    F: Fn(&str) -> Result<Vec<SearchDoc>, ToolError> + Send + Sync,
{
    fn search(&self, query: &str) -> Result<Vec<SearchDoc>, ToolError> {
        self(query)
    }
}

/// Run a search and render the capped result list, or fail with
/// `NoEvidence` when the provider comes back empty.
pub fn run_search(provider: &dyn SearchProvider, query: &str) -> Result<String, ToolError> {
    let docs = provider.search(query)?;
    if docs.is_empty() {
        return Err(ToolError::NoEvidence);
    }
    let kept = &docs[..docs.len().min(TOP_DOCUMENTS)];
    let mut out = format!("{} document(s):", kept.len());
    for (i, doc) in kept.iter().enumerate() {
        let snippet: String = doc.snippet.split_whitespace().collect::<Vec<_>>().join(" ");
        out.push_str(&format!("\n[{}] {}: {}", i + 1, doc.title, snippet));
    }
    Ok(out)
}

/// One corpus entry: documents served when every keyword appears in the
/// query (case-insensitive, token-level).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub keywords: Vec<String>,
    pub docs: Vec<SearchDoc>,
}

/// Deterministic provider over a fixed corpus, used for offline runs and
/// fixtures. Matching entries contribute documents in corpus order.
pub struct FixtureSearchProvider {
    entries: Vec<CorpusEntry>,
}

impl FixtureSearchProvider {
    pub fn new(entries: Vec<CorpusEntry>) -> Self {
        FixtureSearchProvider { entries }
    }

    pub fn from_path(path: &Path) -> Result<Self, ToolError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            ToolError::ExecutionFailed(format!("cannot read corpus {}: {e}", path.display()))
        })?;
        let entries: Vec<CorpusEntry> = serde_json::from_str(&raw)
            .map_err(|e| ToolError::ExecutionFailed(format!("bad corpus: {e}")))?;
        Ok(FixtureSearchProvider::new(entries))
    }

    pub fn empty() -> Self {
        FixtureSearchProvider::new(Vec::new())
    }
}

impl SearchProvider for FixtureSearchProvider {
    fn search(&self, query: &str) -> Result<Vec<SearchDoc>, ToolError> {
        let query_tokens: HashMap<String, ()> =
            tokens(query).into_iter().map(|t| (t, ())).collect();
        let mut docs = Vec::new();
        for entry in &self.entries {
            let all_present = !entry.keywords.is_empty()
                && entry
                    .keywords
                    .iter()
                    .all(|k| tokens(k).iter().all(|part| query_tokens.contains_key(part)));
            if all_present {
                docs.extend(entry.docs.iter().cloned());
            }
        }
        Ok(docs)
    }
}
