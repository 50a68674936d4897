//! Needle case definitions: the question, reference answer, and the set of
//! needles (including long and needle-in-needle compositions) to plant.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenCounter;
use crate::text;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("io error reading {path}: {source}")]
    IoError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("case schema error in {path}: {message}")]
    CaseSchemaError { path: PathBuf, message: String },
    #[error("case {id} invalid: {violations:?}")]
    CaseInvalid { id: String, violations: Vec<Violation> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeedleKind {
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    pub id: String,
    pub text: String,
    pub kind: NeedleKind,
    pub key_elements: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<Needle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleCase {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
    pub haystack_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_ref: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub first_depth_only: bool,
    /// Known distractor items used for fabrication ("extra element") detection.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fabrication_lexicon: Vec<String>,
    pub needles: Vec<Needle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.check, self.detail)
    }
}

/// The five-level ordinal judge rubric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRubric {
    pub levels: BTreeMap<u8, String>,
}

pub const RUBRIC_LEVELS: [u8; 5] = [1, 3, 5, 7, 10];

impl Default for JudgeRubric {
    fn default() -> Self {
        let mut levels = BTreeMap::new();
        levels.insert(1, "The answer is completely unrelated to the reference or totally wrong.".to_string());
        levels.insert(3, "The answer has minor relevance but does not align with the reference.".to_string());
        levels.insert(5, "The answer has moderate relevance but contains inaccuracies.".to_string());
        levels.insert(7, "The answer partially aligns with the reference but has minor omissions.".to_string());
        levels.insert(10, "The answer is aligned with the reference. Information order may differ and wording need not match the reference exactly.".to_string());
        JudgeRubric { levels }
    }
}

impl JudgeRubric {
    pub fn is_level(&self, v: u8) -> bool {
        self.levels.contains_key(&v)
    }
}

impl Needle {
    /// This needle followed by all descendants, depth-first.
    pub fn flatten(&self) -> Vec<&Needle> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.flatten());
        }
        out
    }
}

impl NeedleCase {
    /// Top-level needles in case order. These are what gets planted; child
    /// needles ride along inside their host's text.
    pub fn planted_needles(&self) -> &[Needle] {
        &self.needles
    }

    /// Every needle including needle-in-needle children, each exactly once.
    pub fn flat_needles(&self) -> Vec<&Needle> {
        self.needles.iter().flat_map(|n| n.flatten()).collect()
    }

    /// Unique (needle_id, element) pairs over the flattened needle set.
    pub fn all_elements(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for n in self.flat_needles() {
            for e in &n.key_elements {
                out.insert((n.id.clone(), e.clone()));
            }
        }
        out
    }

    /// Unique element strings (deduplicated across needles).
    pub fn element_strings(&self) -> BTreeSet<String> {
        self.all_elements().into_iter().map(|(_, e)| e).collect()
    }
}

pub fn load_case(path: &Path) -> Result<NeedleCase, CaseError> {
    let raw = fs::read_to_string(path).map_err(|e| CaseError::IoError { path: path.to_path_buf(), source: e })?;
    let case: NeedleCase = serde_json::from_str(&raw).map_err(|e| CaseError::CaseSchemaError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let violations = validate_case(&case);
    if violations.is_empty() {
        Ok(case)
    } else {
        Err(CaseError::CaseInvalid { id: case.id, violations })
    }
}

fn needle_token_band(kind: NeedleKind) -> (usize, usize) {
    match kind {
        NeedleKind::Short => (20, 150),
        NeedleKind::Long => (300, 700),
    }
}

/// Deterministic validation report; empty means the case is well-formed.
pub fn validate_case(case: &NeedleCase) -> Vec<Violation> {
    let mut v = Vec::new();
    let counter = TokenCounter::word_approx();

    if case.needles.is_empty() {
        v.push(Violation { check: "needles_nonempty".into(), detail: format!("case {} has no needles", case.id) });
        return v;
    }

    let flat = case.flat_needles();
    let mut seen = BTreeSet::new();
    for n in &flat {
        if !seen.insert(n.id.clone()) {
            v.push(Violation {
                check: "needle_ids_unique".into(),
                detail: format!("duplicate needle id {}", n.id),
            });
        }
    }

    for n in &flat {
        for e in &n.key_elements {
            if !text::contains_normalized(&n.text, e) {
                v.push(Violation {
                    check: "key_element_in_text".into(),
                    detail: format!("element {e:?} not found in needle {}", n.id),
                });
            }
        }
        let tokens = counter.count(&n.text);
        let (lo, hi) = needle_token_band(n.kind);
        if tokens < lo || tokens > hi {
            v.push(Violation {
                check: "needle_token_band".into(),
                detail: format!("needle {} has {tokens} tokens, outside [{lo}, {hi}] for {:?}", n.id, n.kind),
            });
        }
        for c in &n.children {
            if !n.text.contains(&c.text) {
                v.push(Violation {
                    check: "child_in_parent".into(),
                    detail: format!("child needle {} text not a substring of parent {}", c.id, n.id),
                });
            }
        }
    }

    let elements = case.element_strings();
    if elements.is_empty() {
        v.push(Violation {
            check: "elements_nonempty".into(),
            detail: format!("case {} has no key elements", case.id),
        });
    }
    for e in &elements {
        if !text::contains_normalized(&case.reference_answer, e) {
            v.push(Violation {
                check: "element_in_reference".into(),
                detail: format!("element {e:?} missing from reference_answer"),
            });
        }
    }

    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_needle(id: &str, element: &str) -> Needle {
        Needle {
            id: id.into(),
            text: format!(
                "Every seasoned chef at the academy will remind you that {element} remains the most \
                 prized addition to the recipe, something visiting scholars note in their journals."
            ),
            kind: NeedleKind::Short,
            key_elements: vec![element.to_string()],
            children: vec![],
        }
    }

    fn pizza_case() -> NeedleCase {
        NeedleCase {
            id: "pizza".into(),
            question: "What are the secret ingredients?".into(),
            reference_answer: "The secret ingredients are Prosciutto, goat cheese, and figs.".into(),
            haystack_ref: "neutral".into(),
            distractor_ref: None,
            first_depth_only: false,
            fabrication_lexicon: vec!["pineapple".into()],
            needles: vec![
                short_needle("n1", "Prosciutto"),
                short_needle("n2", "goat cheese"),
                short_needle("n3", "figs"),
            ],
        }
    }

    #[test]
    fn valid_case_has_empty_report() {
        assert_eq!(validate_case(&pizza_case()), vec![]);
    }

    #[test]
    fn duplicate_needle_ids_flagged() {
        let mut c = pizza_case();
        c.needles[1].id = "n1".into();
        let report = validate_case(&c);
        assert!(report.iter().any(|v| v.check == "needle_ids_unique"));
    }

    #[test]
    fn element_absent_from_needle_text_flagged() {
        let mut c = pizza_case();
        c.needles[0].key_elements = vec!["anchovies".into()];
        let report = validate_case(&c);
        assert!(report.iter().any(|v| v.check == "key_element_in_text"));
    }

    #[test]
    fn element_missing_from_reference_flagged() {
        let mut c = pizza_case();
        c.reference_answer = "Prosciutto and goat cheese.".into();
        let report = validate_case(&c);
        let hits: Vec<_> = report.iter().filter(|v| v.check == "element_in_reference").collect();
        assert_eq!(hits.len(), 1);
        assert!(hits[0].detail.contains("figs"));
    }

    #[test]
    fn token_band_enforced() {
        let mut c = pizza_case();
        c.needles[0].text = "Prosciutto only.".into();
        let report = validate_case(&c);
        assert!(report.iter().any(|v| v.check == "needle_token_band"));
    }

    #[test]
    fn child_needle_must_be_substring() {
        let mut c = pizza_case();
        let child = Needle {
            id: "c1".into(),
            text: "not actually inside the parent".into(),
            kind: NeedleKind::Short,
            key_elements: vec![],
            children: vec![],
        };
        c.needles[0].children.push(child);
        let report = validate_case(&c);
        assert!(report.iter().any(|v| v.check == "child_in_parent"));
    }

    #[test]
    fn flatten_counts_each_needle_once() {
        let mut c = pizza_case();
        let child_text = "the hidden clause about figs".to_string();
        c.needles[0].text.push_str(&format!(" Also, {child_text}."));
        c.needles[0].children.push(Needle {
            id: "c1".into(),
            text: child_text,
            kind: NeedleKind::Short,
            key_elements: vec![],
            children: vec![],
        });
        let flat = c.flat_needles();
        assert_eq!(flat.len(), 4);
        let ids: BTreeSet<_> = flat.iter().map(|n| n.id.clone()).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn case_round_trips_through_json() {
        let c = pizza_case();
        let json = serde_json::to_string(&c).unwrap();
        let back: NeedleCase = serde_json::from_str(&json).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn rubric_has_exactly_five_levels() {
        let r = JudgeRubric::default();
        assert_eq!(r.levels.keys().copied().collect::<Vec<_>>(), RUBRIC_LEVELS.to_vec());
        assert!(r.is_level(7));
        assert!(!r.is_level(4));
    }
}
