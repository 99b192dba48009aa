//! Dataset loading and two-granularity evaluation.
//!
//! Detection quality is scored as binary classification with the
//! hallucinated class (label 1) as the positive class, at two
//! granularities: one verdict per response, or one verdict per gold claim
//! after aligning the agent's own sentence segmentation onto the claim
//! boundaries. All metric arithmetic is exact (integer confusion counts,
//! rational division); floats appear only at the rendering edge.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolbox::text::tokens;
use crate::types::{DetectionInput, DetectionReport, Label, SentenceVerdict, TaskType};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: no pairs to evaluate")]
    EmptyInput,
    #[error("io error on {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error("no prediction for input {0}")]
    MissingPrediction(String),
    #[error("duplicate prediction for input {0}")]
    DuplicatePrediction(String),
}

/// Binary confusion counts; the positive class is hallucinated (label 1).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

fn ratio(num: usize, den: usize) -> BigRational {
    // Degenerate denominators map to 0 by convention, so all-negative
    // prediction sets still score.
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: &[(Label, Label)]) -> Self {
        let mut matrix = ConfusionMatrix::default();
        for &(predicted, gold) in pairs {
            matrix.observe(predicted, gold);
        }
        matrix
    }

    pub fn observe(&mut self, predicted: Label, gold: Label) {
        match (predicted, gold) {
            (Label::Hallucinated, Label::Hallucinated) => self.true_pos += 1,
            (Label::Hallucinated, Label::Clean) => self.false_pos += 1,
            (Label::Clean, Label::Clean) => self.true_neg += 1,
            (Label::Clean, Label::Hallucinated) => self.false_neg += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn accuracy(&self) -> BigRational {
        ratio(self.true_pos + self.true_neg, self.total())
    }

    pub fn precision(&self) -> BigRational {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> BigRational {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn f1(&self) -> BigRational {
        let p = self.precision();
        let r = self.recall();
        let sum = &p + &r;
        if sum.is_zero() {
            BigRational::zero()
        } else {
            BigRational::from(BigInt::from(2)) * p * r / sum
        }
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            accuracy: self.accuracy(),
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

/// The four derived metrics, exact.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub accuracy: BigRational,
    pub precision: BigRational,
    pub recall: BigRational,
    pub f1: BigRational,
}

impl MetricSummary {
    /// Arithmetic mean of per-row summaries; the macro-averaged view.
    pub fn mean(rows: &[MetricSummary]) -> Option<MetricSummary> {
        if rows.is_empty() {
            return None;
        }
        let n = BigRational::from(BigInt::from(rows.len() as u64));
        let mut sums = MetricSummary {
            accuracy: BigRational::zero(),
            precision: BigRational::zero(),
            recall: BigRational::zero(),
            f1: BigRational::zero(),
        };
        for row in rows {
            sums.accuracy += &row.accuracy;
            sums.precision += &row.precision;
            sums.recall += &row.recall;
            sums.f1 += &row.f1;
        }
        Some(MetricSummary {
            accuracy: sums.accuracy / &n,
            precision: sums.precision / &n,
            recall: sums.recall / &n,
            f1: sums.f1 / &n,
        })
    }
}

/// Render an exact metric in [0, 1] as a percentage with exactly two
/// fractional digits (half-up at the last digit).
pub fn percent(value: &BigRational) -> String {
    let scaled = (value * BigRational::from(BigInt::from(10_000))).round();
    let basis = scaled.to_integer();
    let hundred = BigInt::from(100);
    let whole = &basis / &hundred;
    let frac = (&basis % &hundred).abs();
    format!("{whole}.{frac:02}")
}

/// Response-level scores: accuracy and F1 over (predicted, gold) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMetrics {
    pub matrix: ConfusionMatrix,
    pub accuracy: BigRational,
    pub f1: BigRational,
}

pub fn response_metrics(pairs: &[(Label, Label)]) -> Result<ResponseMetrics, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let matrix = ConfusionMatrix::from_pairs(pairs);
    Ok(ResponseMetrics {
        accuracy: matrix.accuracy(),
        f1: matrix.f1(),
        matrix,
    })
}

/// Sentence-level scores: accuracy, precision, recall, and F1 at claim
/// granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceMetrics {
    pub matrix: ConfusionMatrix,
    pub accuracy: BigRational,
    pub precision: BigRational,
    pub recall: BigRational,
    pub f1: BigRational,
}

pub fn sentence_metrics(pairs: &[(Label, Label)]) -> Result<SentenceMetrics, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let matrix = ConfusionMatrix::from_pairs(pairs);
    let summary = matrix.summary();
    Ok(SentenceMetrics {
        matrix,
        accuracy: summary.accuracy,
        precision: summary.precision,
        recall: summary.recall,
        f1: summary.f1,
    })
}

/// One gold claim of a sentence-level source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub source_id: String,
    pub claim: String,
    #[serde(rename = "label")]
    pub gold_label: Label,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub query: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset: Option<String>,
}

/// All claims of one source plus the detection input their concatenation
/// forms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimGroup {
    pub source_id: String,
    pub dataset: Option<String>,
    pub claims: Vec<ClaimRecord>,
    pub input: DetectionInput,
}

const DEFAULT_CLAIM_QUERY: &str = "Verify the claims in the response.";

fn group_claims(records: Vec<ClaimRecord>) -> Vec<ClaimGroup> {
    let mut order: Vec<String> = Vec::new();
    let mut by_source: BTreeMap<String, Vec<ClaimRecord>> = BTreeMap::new();
    for record in records {
        if !by_source.contains_key(&record.source_id) {
            order.push(record.source_id.clone());
        }
        by_source
            .entry(record.source_id.clone())
            .or_default()
            .push(record);
    }
    order
        .into_iter()
        .map(|source_id| {
            let claims = by_source.remove(&source_id).expect("grouped above");
            let query = claims
                .iter()
                .find_map(|c| c.query.clone())
                .unwrap_or_else(|| DEFAULT_CLAIM_QUERY.to_string());
            let dataset = claims.iter().find_map(|c| c.dataset.clone());
            let response = claims
                .iter()
                .map(|c| c.claim.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let gold = if claims.iter().any(|c| c.gold_label == Label::Hallucinated) {
                Label::Hallucinated
            } else {
                Label::Clean
            };
            let mut input = DetectionInput::new(&source_id, query, response)
                .with_task_type(TaskType::KnowledgeQa)
                .with_gold_label(gold);
            input.dataset = dataset.clone();
            ClaimGroup {
                source_id,
                dataset,
                claims,
                input,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// One DetectionInput per line.
    QaLabeled,
    /// One claim per line, grouped by source_id; the concatenated claims
    /// form the detection input.
    ClaimLabeled,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qa_labeled" => Ok(DatasetFormat::QaLabeled),
            "claim_labeled" => Ok(DatasetFormat::ClaimLabeled),
            other => Err(format!("unknown dataset format: {other}")),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    mut check: impl FnMut(&T) -> Result<(), String>,
) -> Result<Vec<T>, EvalError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| EvalError::Schema {
            line: i + 1,
            detail: e.to_string(),
        })?;
        check(&record).map_err(|detail| EvalError::Schema {
            line: i + 1,
            detail,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Load a response-level dataset. With `require_gold`, records without a
/// gold label fail with their line number (evaluation and synthesis need
/// labels; plain batch detection does not).
pub fn load_qa_dataset(path: &Path, require_gold: bool) -> Result<Vec<DetectionInput>, EvalError> {
    read_jsonl(path, |input: &DetectionInput| {
        input.validate()?;
        if require_gold && input.gold_label.is_none() {
            return Err("record is missing gold_label".to_string());
        }
        Ok(())
    })
}

/// Load a sentence-level dataset of labeled claims, grouped per source in
/// first-appearance order.
pub fn load_claim_dataset(path: &Path) -> Result<Vec<ClaimGroup>, EvalError> {
    let records = read_jsonl(path, |record: &ClaimRecord| {
        if record.source_id.trim().is_empty() {
            return Err("source_id must not be empty".to_string());
        }
        if record.claim.trim().is_empty() {
            return Err("claim must not be empty".to_string());
        }
        Ok(())
    })?;
    Ok(group_claims(records))
}

/// Load detection reports produced by a batch run.
pub fn load_reports(path: &Path) -> Result<Vec<DetectionReport>, EvalError> {
    read_jsonl(path, |_: &DetectionReport| Ok(()))
}

pub const DEFAULT_ALIGN_THRESHOLD: f64 = 0.5;

struct Overlap {
    gold: usize,
    predicted: usize,
    intersection: usize,
    union: usize,
}

fn jaccard_parts(a: &[String], b: &[String]) -> (usize, usize) {
    use std::collections::BTreeSet;
    let a: BTreeSet<&str> = a.iter().map(String::as_str).collect();
    let b: BTreeSet<&str> = b.iter().map(String::as_str).collect();
    let intersection = a.intersection(&b).count();
    let union = a.union(&b).count();
    (intersection, union)
}

/// Map the agent's sentence verdicts onto gold claim boundaries.
///
/// Each gold claim is matched to the predicted sentence with maximal
/// token-set Jaccard overlap, greedily by descending overlap and
/// injectively; matches below `threshold` and leftover gold claims pair
/// with predicted label 0. The output always has one pair per gold claim,
/// in gold order.
pub fn align_claims_with(
    predicted: &[SentenceVerdict],
    gold: &[ClaimRecord],
    threshold: f64,
) -> Vec<(Label, Label)> {
    let predicted_tokens: Vec<Vec<String>> =
        predicted.iter().map(|v| tokens(&v.sentence)).collect();
    let gold_tokens: Vec<Vec<String>> = gold.iter().map(|c| tokens(&c.claim)).collect();

    let mut candidates: Vec<Overlap> = Vec::new();
    for (g, gt) in gold_tokens.iter().enumerate() {
        for (p, pt) in predicted_tokens.iter().enumerate() {
            let (intersection, union) = jaccard_parts(gt, pt);
            if union == 0 {
                continue;
            }
            if (intersection as f64) >= threshold * (union as f64) && intersection > 0 {
                candidates.push(Overlap {
                    gold: g,
                    predicted: p,
                    intersection,
                    union,
                });
            }
        }
    }
    // Descending exact overlap; index order breaks ties deterministically.
    candidates.sort_by(|a, b| {
        let lhs = (a.intersection as u128) * (b.union as u128);
        let rhs = (b.intersection as u128) * (a.union as u128);
        rhs.cmp(&lhs)
            .then(a.gold.cmp(&b.gold))
            .then(a.predicted.cmp(&b.predicted))
    });

    let mut gold_match: Vec<Option<usize>> = vec![None; gold.len()];
    let mut predicted_taken = vec![false; predicted.len()];
    for c in candidates {
        if gold_match[c.gold].is_none() && !predicted_taken[c.predicted] {
            gold_match[c.gold] = Some(c.predicted);
            predicted_taken[c.predicted] = true;
        }
    }

    gold.iter()
        .enumerate()
        .map(|(g, claim)| {
            let label = gold_match[g]
                .map(|p| predicted[p].label)
                .unwrap_or(Label::Clean);
            (label, claim.gold_label)
        })
        .collect()
}

pub fn align_claims(predicted: &[SentenceVerdict], gold: &[ClaimRecord]) -> Vec<(Label, Label)> {
    align_claims_with(predicted, gold, DEFAULT_ALIGN_THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalLevel {
    Response,
    Sentence,
}

impl EvalLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalLevel::Response => "response",
            EvalLevel::Sentence => "sentence",
        }
    }
}

impl std::str::FromStr for EvalLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "response" => Ok(EvalLevel::Response),
            "sentence" => Ok(EvalLevel::Sentence),
            other => Err(format!("unknown evaluation level: {other}")),
        }
    }
}

/// Scores for one dataset row of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEval {
    pub dataset: String,
    pub matrix: ConfusionMatrix,
    pub summary: MetricSummary,
}

/// The full evaluation: one row per dataset plus pooled (micro) and
/// averaged (macro) overall views, since which one "overall" means is
/// conventions-dependent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub level: EvalLevel,
    pub rows: Vec<DatasetEval>,
    pub micro: DatasetEval,
    pub macro_summary: MetricSummary,
}

fn index_reports(
    reports: &[DetectionReport],
) -> Result<BTreeMap<&str, &DetectionReport>, EvalError> {
    let mut by_id = BTreeMap::new();
    for report in reports {
        if by_id.insert(report.input_id.as_str(), report).is_some() {
            return Err(EvalError::DuplicatePrediction(report.input_id.clone()));
        }
    }
    Ok(by_id)
}

fn build_report(
    level: EvalLevel,
    pairs_by_dataset: BTreeMap<String, Vec<(Label, Label)>>,
) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::new();
    let mut pooled = ConfusionMatrix::default();
    for (dataset, pairs) in pairs_by_dataset {
        if pairs.is_empty() {
            continue;
        }
        let matrix = ConfusionMatrix::from_pairs(&pairs);
        pooled.merge(&matrix);
        rows.push(DatasetEval {
            dataset,
            summary: matrix.summary(),
            matrix,
        });
    }
    if pooled.total() == 0 {
        return Err(EvalError::EmptyInput);
    }
    let macro_summary =
        MetricSummary::mean(&rows.iter().map(|r| r.summary.clone()).collect::<Vec<_>>())
            .expect("rows non-empty");
    Ok(EvalReport {
        level,
        rows,
        micro: DatasetEval {
            dataset: "overall (micro)".to_string(),
            summary: pooled.summary(),
            matrix: pooled,
        },
        macro_summary,
    })
}

/// Response-level evaluation: join predictions to inputs by id and score
/// per dataset.
pub fn evaluate_response(
    inputs: &[DetectionInput],
    reports: &[DetectionReport],
) -> Result<EvalReport, EvalError> {
    let by_id = index_reports(reports)?;
    let mut pairs_by_dataset: BTreeMap<String, Vec<(Label, Label)>> = BTreeMap::new();
    for input in inputs {
        let gold = input.gold_label.ok_or_else(|| EvalError::Schema {
            line: 0,
            detail: format!("input {} has no gold label", input.id),
        })?;
        let report = by_id
            .get(input.id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(input.id.clone()))?;
        let dataset = input
            .dataset
            .clone()
            .unwrap_or_else(|| "default".to_string());
        pairs_by_dataset
            .entry(dataset)
            .or_default()
            .push((report.response_label, gold));
    }
    build_report(EvalLevel::Response, pairs_by_dataset)
}

/// Sentence-level evaluation: align each source's verdicts onto its gold
/// claims and score per dataset.
pub fn evaluate_sentence(
    groups: &[ClaimGroup],
    reports: &[DetectionReport],
) -> Result<EvalReport, EvalError> {
    let by_id = index_reports(reports)?;
    let mut pairs_by_dataset: BTreeMap<String, Vec<(Label, Label)>> = BTreeMap::new();
    for group in groups {
        let report = by_id
            .get(group.source_id.as_str())
            .ok_or_else(|| EvalError::MissingPrediction(group.source_id.clone()))?;
        let pairs = align_claims(&report.verdicts, &group.claims);
        let dataset = group
            .dataset
            .clone()
            .unwrap_or_else(|| "default".to_string());
        pairs_by_dataset.entry(dataset).or_default().extend(pairs);
    }
    build_report(EvalLevel::Sentence, pairs_by_dataset)
}

impl EvalReport {
    /// Human-readable table: dataset rows, the pooled overall row, and the
    /// macro average, as two-decimal percentages.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>6} {:>9} {:>10} {:>8} {:>8}\n",
            "dataset", "pairs", "accuracy", "precision", "recall", "f1"
        ));
        let mut print_row = |name: &str, pairs: String, s: &MetricSummary| {
            out.push_str(&format!(
                "{:<24} {:>6} {:>9} {:>10} {:>8} {:>8}\n",
                name,
                pairs,
                percent(&s.accuracy),
                percent(&s.precision),
                percent(&s.recall),
                percent(&s.f1)
            ));
        };
        for row in &self.rows {
            print_row(&row.dataset, row.matrix.total().to_string(), &row.summary);
        }
        print_row(
            &self.micro.dataset,
            self.micro.matrix.total().to_string(),
            &self.micro.summary,
        );
        print_row("overall (macro)", "-".to_string(), &self.macro_summary);
        out
    }

    /// Machine-readable form of the same report.
    pub fn to_json(&self) -> serde_json::Value {
        let summary_json = |s: &MetricSummary| {
            serde_json::json!({
                "accuracy": s.accuracy.to_f64(),
                "precision": s.precision.to_f64(),
                "recall": s.recall.to_f64(),
                "f1": s.f1.to_f64(),
                "accuracy_pct": percent(&s.accuracy),
                "precision_pct": percent(&s.precision),
                "recall_pct": percent(&s.recall),
                "f1_pct": percent(&s.f1),
            })
        };
        let row_json = |row: &DatasetEval| {
            let mut value = summary_json(&row.summary);
            let map = value.as_object_mut().expect("object");
            map.insert("dataset".to_string(), row.dataset.clone().into());
            map.insert("pairs".to_string(), row.matrix.total().into());
            map.insert(
                "confusion".to_string(),
                serde_json::to_value(row.matrix).expect("serializable"),
            );
            value
        };
        serde_json::json!({
            "level": self.level.as_str(),
            "datasets": self.rows.iter().map(row_json).collect::<Vec<_>>(),
            "overall_micro": row_json(&self.micro),
            "overall_macro": summary_json(&self.macro_summary),
        })
    }
}
