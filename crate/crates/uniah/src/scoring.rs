//! Answer scoring: the exact element-coverage oracle, self-doubt detection,
//! the error-type taxonomy, and the LLM-as-judge path.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, CompletionRequest, ModelBackend};
use crate::cases::{JudgeRubric, NeedleCase};
use crate::text;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("judge reply not parseable as a rubric level: {raw:?}")]
    JudgeUnparseable { raw: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMethod {
    StrictInteger,
    FallbackExtract,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub value: u8,
    pub raw_judge_text: String,
    pub parse_method: ParseMethod,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub present: BTreeSet<String>,
    pub missing: BTreeSet<String>,
    pub extra: Vec<String>,
    pub self_doubt: bool,
    /// Raised for non-empty answers with no recognizable content.
    pub nonsensical: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    OnlyMissing,
    OnlyWrong,
    Both,
    SelfDoubtComplete,
    SelfDoubtIncomplete,
    Other,
    NoError,
}

/// Negation patterns that mark an answer as self-doubting. Data, not code:
/// replaceable per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfDoubtLexicon {
    pub patterns: Vec<String>,
}

impl Default for SelfDoubtLexicon {
    fn default() -> Self {
        SelfDoubtLexicon {
            patterns: vec![
                "not related to the text".into(),
                "not explicitly mentioned".into(),
                "but it is actually a mistake".into(),
                "refuse to answer".into(),
                "cannot be found in the document".into(),
                "does not contain this information".into(),
            ],
        }
    }
}

pub fn detect_self_doubt(answer: &str, lexicon: &SelfDoubtLexicon) -> bool {
    let norm = text::normalize(answer);
    lexicon
        .patterns
        .iter()
        .any(|p| norm.contains(&text::normalize(p)))
}

/// Element coverage: an element counts as present when its normalized form
/// occurs as a substring of the normalized answer. Fabricated extras come
/// from the case's distractor lexicon.
pub fn coverage(answer: &str, case: &NeedleCase) -> CoverageReport {
    coverage_with_lexicon(answer, case, &SelfDoubtLexicon::default())
}

pub fn coverage_with_lexicon(answer: &str, case: &NeedleCase, doubt: &SelfDoubtLexicon) -> CoverageReport {
    let mut present = BTreeSet::new();
    let mut missing = BTreeSet::new();
    for e in case.element_strings() {
        if text::contains_normalized(answer, &e) {
            present.insert(e);
        } else {
            missing.insert(e);
        }
    }
    let extra: Vec<String> = case
        .fabrication_lexicon
        .iter()
        .filter(|d| text::contains_normalized(answer, d))
        .cloned()
        .collect();
    let nonsensical = !answer.is_empty() && text::normalize(answer).is_empty();
    CoverageReport {
        present,
        missing,
        extra,
        self_doubt: detect_self_doubt(answer, doubt),
        nonsensical,
    }
}

/// The six-class decision table. Self-doubt dominates missing/extra; the
/// nonsensical flag dominates everything.
pub fn classify(report: &CoverageReport) -> ErrorClass {
    if report.nonsensical {
        return ErrorClass::Other;
    }
    if report.self_doubt {
        return if report.missing.is_empty() {
            ErrorClass::SelfDoubtComplete
        } else {
            ErrorClass::SelfDoubtIncomplete
        };
    }
    match (!report.missing.is_empty(), !report.extra.is_empty()) {
        (true, true) => ErrorClass::Both,
        (true, false) => ErrorClass::OnlyMissing,
        (false, true) => ErrorClass::OnlyWrong,
        (false, false) => ErrorClass::NoError,
    }
}

pub fn rubric_sha256(rubric: &JudgeRubric) -> String {
    let mut h = Sha256::new();
    for (k, v) in &rubric.levels {
        h.update([*k]);
        h.update(v.as_bytes());
        h.update([0]);
    }
    format!("{:x}", h.finalize())
}

/// Render the judge prompt: rubric levels verbatim, then the question,
/// reference, and answer in tagged blocks.
pub fn judge_prompt(question: &str, reference: &str, answer: &str, rubric: &JudgeRubric) -> CompletionRequest {
    let mut system = String::from(
        "You are grading an answer against a reference. Use exactly one of the following scores:\n",
    );
    for (level, description) in &rubric.levels {
        system.push_str(&format!("Score {level}: {description}\n"));
    }
    system.push_str("Reply with the score only.");
    let user_text = format!(
        "Question: {question}\n<reference>{reference}</reference>\n<answer>{answer}</answer>\nRespond with exactly one score."
    );
    CompletionRequest { system_text: system, user_text, max_output_tokens: 16 }
}

fn parse_judge_reply(raw: &str, rubric: &JudgeRubric) -> Result<JudgeScore, ScoringError> {
    let trimmed = raw.trim();
    if let Ok(v) = trimmed.parse::<u8>() {
        if rubric.is_level(v) {
            return Ok(JudgeScore { value: v, raw_judge_text: raw.to_string(), parse_method: ParseMethod::StrictInteger });
        }
    }
    // fallback: last integer token in the text that is a rubric level
    let mut found: Option<u8> = None;
    let mut current = String::new();
    for c in raw.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            current.push(c);
        } else if !current.is_empty() {
            if let Ok(v) = current.parse::<u8>() {
                if rubric.is_level(v) {
                    found = Some(v);
                }
            }
            current.clear();
        }
    }
    match found {
        Some(v) => Ok(JudgeScore { value: v, raw_judge_text: raw.to_string(), parse_method: ParseMethod::FallbackExtract }),
        None => Err(ScoringError::JudgeUnparseable { raw: raw.to_string() }),
    }
}

pub fn judge(
    question: &str,
    reference: &str,
    answer: &str,
    judge_backend: &ModelBackend,
    rubric: &JudgeRubric,
) -> Result<JudgeScore, ScoringError> {
    let request = judge_prompt(question, reference, answer, rubric);
    let response = judge_backend.complete(&request)?;
    parse_judge_reply(&response.text, rubric)
}
