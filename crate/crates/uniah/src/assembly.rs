//! Token budgeting, depth-controlled needle insertion, and LC prompt
//! construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cases::{Needle, NeedleCase};
use crate::corpus::{HaystackSample, SampleProvenance, TokenCounter};
use crate::text;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("budget exhausted: L={length} leaves deficit of {deficit} tokens (P={reserved}, N={needles})")]
    BudgetExhausted { length: usize, reserved: usize, needles: usize, deficit: usize },
    #[error("unknown prompt template {0:?}")]
    ConfigError(String),
}

/// Token budget split: haystack capacity is what remains of the context
/// window after the reserved prompt and the needles themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub context_length: usize,
    pub reserved_prompt: usize,
    pub needle_total: usize,
    pub haystack_budget: usize,
}

pub fn compute_budget(
    context_length: usize,
    reserved_prompt: usize,
    needles: &[Needle],
    counter: &TokenCounter,
) -> Result<PromptBudget, AssemblyError> {
    let needle_total: usize = needles.iter().map(|n| counter.count(&n.text)).sum();
    if context_length <= reserved_prompt + needle_total {
        return Err(AssemblyError::BudgetExhausted {
            length: context_length,
            reserved: reserved_prompt,
            needles: needle_total,
            deficit: (reserved_prompt + needle_total).saturating_sub(context_length),
        });
    }
    Ok(PromptBudget {
        context_length,
        reserved_prompt,
        needle_total,
        haystack_budget: context_length - reserved_prompt - needle_total,
    })
}

/// Target token offsets for each needle. The first needle sits at
/// `alpha * H`; the rest split the remaining space into k equal segments.
/// At alpha = 1.0 all needles go contiguously to the very bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub alpha: f64,
    pub positions: Vec<usize>,
    pub at_bottom: bool,
}

pub fn insertion_depths(k: usize, alpha: f64, haystack_budget: usize) -> InsertionPlan {
    assert!(k >= 1, "at least one needle");
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
    let h = haystack_budget;
    if alpha >= 1.0 {
        return InsertionPlan { alpha, positions: vec![h; k], at_bottom: true };
    }
    let d1 = (alpha * h as f64).round() as usize;
    let mut positions = vec![d1];
    for i in 2..=k {
        positions.push(d1 + (i - 1) * (h - d1) / k);
    }
    InsertionPlan { alpha, positions, at_bottom: false }
}

/// A note about where an insertion actually landed (after sentence-boundary
/// snapping and collision shifts).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InsertionNote {
    pub needle_id: String,
    pub target_tokens: usize,
    pub snapped_char: usize,
    pub shifted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeedleSpan {
    pub char_start: usize,
    pub char_end: usize,
    pub token_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssembledContext {
    pub text: String,
    pub needle_spans: BTreeMap<String, NeedleSpan>,
    /// Span order matching the insertion plan (case order).
    pub span_order: Vec<String>,
    pub haystack_provenance: SampleProvenance,
    pub insertion_notes: Vec<InsertionNote>,
    pub nominal_length: usize,
    pub actual_length: usize,
}

impl AssembledContext {
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.text.as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Plant needles into a sampled haystack at the planned token offsets,
/// snapping each to the sentence boundary at or before its target. Two
/// needles landing on the same boundary shift the later one to the next
/// boundary rather than dropping it.
pub fn insert_needles(
    haystack: &HaystackSample,
    needles: &[Needle],
    plan: &InsertionPlan,
    counter: &TokenCounter,
    nominal_length: usize,
) -> AssembledContext {
    assert_eq!(needles.len(), plan.positions.len(), "one position per needle");
    let hay = &haystack.text;
    let spans = text::token_spans(hay);

    // char offset just past token `t` (insertion point for token offset t)
    let char_at_token = |t: usize| -> usize {
        if t == 0 || spans.is_empty() {
            0
        } else if t >= spans.len() {
            hay.len()
        } else {
            spans[t - 1].1
        }
    };

    let mut notes = Vec::new();
    let mut placements: Vec<(usize, &Needle)> = Vec::new(); // (char offset, needle)

    if plan.at_bottom {
        for n in needles {
            notes.push(InsertionNote {
                needle_id: n.id.clone(),
                target_tokens: plan.positions[0],
                snapped_char: hay.len(),
                shifted: false,
            });
            placements.push((hay.len(), n));
        }
    } else {
        let mut last_char: Option<usize> = None;
        for (n, &target) in needles.iter().zip(&plan.positions) {
            let raw = haystack.sentences.snap_before(char_at_token(target.min(haystack.tokens)));
            let mut at = raw;
            let mut shifted = false;
            if let Some(prev) = last_char {
                while at <= prev {
                    match haystack.sentences.next_after(at) {
                        Some(next) => {
                            at = next;
                            shifted = true;
                        }
                        None => {
                            at = hay.len();
                            shifted = at != raw;
                            break;
                        }
                    }
                }
            }
            // Multiple needles may pile up at the text end; keep them all.
            last_char = Some(if at >= hay.len() { at.max(last_char.unwrap_or(0)) } else { at });
            notes.push(InsertionNote { needle_id: n.id.clone(), target_tokens: target, snapped_char: at, shifted });
            placements.push((at, n));
        }
    }

    // Splice needles into the haystack. Placements are non-decreasing in
    // char offset and already in case order.
    let mut out = String::with_capacity(hay.len() + needles.iter().map(|n| n.text.len() + 1).sum::<usize>());
    let mut spans_out: BTreeMap<String, NeedleSpan> = BTreeMap::new();
    let mut order = Vec::new();
    let mut cursor = 0usize;
    for (at, n) in &placements {
        out.push_str(&hay[cursor..*at]);
        cursor = *at;
        if !out.is_empty() && !out.ends_with(char::is_whitespace) {
            out.push(' ');
        }
        let start = out.len();
        out.push_str(&n.text);
        let end = out.len();
        if cursor < hay.len() && !hay[cursor..].starts_with(char::is_whitespace) {
            out.push(' ');
        }
        let token_offset = text::word_count(&out[..start]);
        spans_out.insert(n.id.clone(), NeedleSpan { char_start: start, char_end: end, token_offset });
        order.push(n.id.clone());
    }
    out.push_str(&hay[cursor..]);

    let actual_length = counter.count(&out);
    AssembledContext {
        text: out,
        needle_spans: spans_out,
        span_order: order,
        haystack_provenance: haystack.provenance.clone(),
        insertion_notes: notes,
        nominal_length,
        actual_length,
    }
}

/// Prompt template. The text is versioned configuration; its hash goes into
/// trial provenance because judge scores are sensitive to wording.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub system_text: String,
    pub context_header: String,
    pub question_header: String,
}

impl PromptTemplate {
    pub fn default_lc() -> Self {
        PromptTemplate {
            id: "default".into(),
            system_text: "You are a careful assistant. Answer the question using only the document \
                          provided. Do not use outside knowledge. If the document names specific items, \
                          list all of them."
                .into(),
            context_header: "Document:".into(),
            question_header: "Question:".into(),
        }
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update([0]);
        h.update(self.system_text.as_bytes());
        h.update([0]);
        h.update(self.context_header.as_bytes());
        h.update([0]);
        h.update(self.question_header.as_bytes());
        format!("{:x}", h.finalize())
    }

    /// Tokens this template contributes on top of context and question.
    pub fn overhead_tokens(&self, counter: &TokenCounter) -> usize {
        counter.count(&self.system_text) + counter.count(&self.context_header) + counter.count(&self.question_header)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateRegistry {
    pub fn with_defaults() -> Self {
        let mut r = TemplateRegistry::default();
        r.register(PromptTemplate::default_lc());
        r
    }

    pub fn register(&mut self, t: PromptTemplate) {
        self.templates.insert(t.id.clone(), t);
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, AssemblyError> {
        self.templates.get(id).ok_or_else(|| AssemblyError::ConfigError(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLayout {
    ContextThenQuestion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub layout: PromptLayout,
}

/// Render the LC prompt: context verbatim, question last.
pub fn build_lc_prompt(
    case: &NeedleCase,
    context_text: &str,
    registry: &TemplateRegistry,
    template_id: &str,
) -> Result<PromptBundle, AssemblyError> {
    let t = registry.get(template_id)?;
    let user_text = format!(
        "{}\n{}\n\n{} {}",
        t.context_header, context_text, t.question_header, case.question
    );
    Ok(PromptBundle { system_text: t.system_text.clone(), user_text, layout: PromptLayout::ContextThenQuestion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases::NeedleKind;
    use crate::corpus::{sample_haystack, Corpus, CorpusKind, Document};

    fn counter() -> TokenCounter {
        TokenCounter::word_approx()
    }

    fn needle(id: &str, words: usize) -> Needle {
        let mut text = String::new();
        for i in 0..words - 1 {
            text.push_str(&format!("n{id}w{i} "));
        }
        text.push_str("end.");
        Needle { id: id.into(), text, kind: NeedleKind::Short, key_elements: vec![], children: vec![] }
    }

    fn haystack_of_sentences(n_sentences: usize, words_per: usize) -> HaystackSample {
        let mut doc = String::new();
        for s in 0..n_sentences {
            for w in 0..words_per - 1 {
                doc.push_str(&format!("s{s}w{w} "));
            }
            doc.push_str(&format!("s{s}end. "));
        }
        let corpus = Corpus {
            id: "t".into(),
            documents: vec![Document { doc_id: "d".into(), text: doc.trim_end().to_string() }],
            kind: CorpusKind::Neutral,
        };
        sample_haystack(&corpus, n_sentences * words_per, 0, &counter())
    }

    #[test]
    fn budget_direct_substitution() {
        let needles = vec![needle("a", 100), needle("b", 100), needle("c", 100)];
        let b = compute_budget(1000, 200, &needles, &counter()).unwrap();
        assert_eq!(b.haystack_budget, 500);
        assert_eq!(b.needle_total, 300);
    }

    #[test]
    fn budget_boundary_is_exhausted() {
        let needles = vec![needle("a", 300)];
        match compute_budget(500, 200, &needles, &counter()) {
            Err(AssemblyError::BudgetExhausted { deficit, .. }) => assert_eq!(deficit, 0),
            other => panic!("expected BudgetExhausted, got {other:?}"),
        }
    }

    #[test]
    fn budget_word_counts() {
        let needles = vec![needle("a", 40), needle("b", 60), needle("c", 100)];
        let b = compute_budget(4096, 96, &needles, &counter()).unwrap();
        assert_eq!(b.haystack_budget, 3800);
    }

    #[test]
    fn depths_paper_worked_example() {
        // k=3, alpha=0.10 -> 10%, 40%, 70% of H
        let p = insertion_depths(3, 0.10, 1000);
        assert_eq!(p.positions, vec![100, 400, 700]);
        assert!(!p.at_bottom);
    }

    #[test]
    fn depths_single_needle() {
        let p = insertion_depths(1, 0.5, 1000);
        assert_eq!(p.positions, vec![500]);
    }

    #[test]
    fn depths_k4_hand_computed() {
        // d1=100, d_i = 100 + floor((i-1)*900/4)
        let p = insertion_depths(4, 0.10, 1000);
        assert_eq!(p.positions, vec![100, 325, 550, 775]);
    }

    #[test]
    fn depths_alpha_one_is_bottom() {
        let p = insertion_depths(3, 1.0, 1000);
        assert!(p.at_bottom);
        assert_eq!(p.positions, vec![1000, 1000, 1000]);
    }

    #[test]
    fn insert_at_bottom_is_contiguous_tail() {
        let hay = haystack_of_sentences(5, 10);
        let needles = vec![needle("a", 20), needle("b", 20), needle("c", 20)];
        let plan = insertion_depths(3, 1.0, 50);
        let ctx = insert_needles(&hay, &needles, &plan, &counter(), 200);
        assert!(ctx.text.starts_with(&hay.text));
        for n in &needles {
            let span = &ctx.needle_spans[&n.id];
            assert_eq!(&ctx.text[span.char_start..span.char_end], n.text);
        }
        // contiguous at tail: only whitespace between spans, last span ends at text end
        let ids = &ctx.span_order;
        assert_eq!(ids, &["a", "b", "c"]);
        for w in ids.windows(2) {
            let a = &ctx.needle_spans[&w[0]];
            let b = &ctx.needle_spans[&w[1]];
            assert!(ctx.text[a.char_end..b.char_start].trim().is_empty());
        }
        assert_eq!(ctx.needle_spans["c"].char_end, ctx.text.len());
    }

    #[test]
    fn insert_into_empty_haystack() {
        let corpus = Corpus {
            id: "t".into(),
            documents: vec![Document { doc_id: "d".into(), text: "x.".into() }],
            kind: CorpusKind::Neutral,
        };
        let hay = sample_haystack(&corpus, 0, 0, &counter());
        let n = needle("a", 5);
        let plan = insertion_depths(1, 0.5, 0);
        let ctx = insert_needles(&hay, std::slice::from_ref(&n), &plan, &counter(), 100);
        assert_eq!(ctx.text, n.text);
    }

    #[test]
    fn insert_snaps_to_boundary_before_target() {
        // 10 sentences x 10 tokens, target offset 47 -> after sentence 4 (token 40)
        let hay = haystack_of_sentences(10, 10);
        let n = needle("a", 20);
        let plan = InsertionPlan { alpha: 0.47, positions: vec![47], at_bottom: false };
        let ctx = insert_needles(&hay, std::slice::from_ref(&n), &plan, &counter(), 200);
        let span = &ctx.needle_spans["a"];
        assert_eq!(span.token_offset, 40);
        assert_eq!(&ctx.text[span.char_start..span.char_end], n.text);
    }

    #[test]
    fn colliding_needles_shift_to_next_boundary() {
        let hay = haystack_of_sentences(10, 10);
        let needles = vec![needle("a", 20), needle("b", 20)];
        // both target token 12 -> both snap to boundary after sentence 1
        let plan = InsertionPlan { alpha: 0.12, positions: vec![12, 13], at_bottom: false };
        let ctx = insert_needles(&hay, &needles, &plan, &counter(), 400);
        let a = &ctx.needle_spans["a"];
        let b = &ctx.needle_spans["b"];
        assert_eq!(a.token_offset, 10);
        // sentence 1 (10) + needle a (20) + sentence 2 (10) precede needle b
        assert_eq!(b.token_offset, 40);
        assert!(b.char_start > a.char_end);
        assert!(ctx.insertion_notes[1].shifted);
        for n in &needles {
            let s = &ctx.needle_spans[&n.id];
            assert_eq!(&ctx.text[s.char_start..s.char_end], n.text);
        }
    }

    #[test]
    fn lc_prompt_embeds_context_and_ends_with_question() {
        let reg = TemplateRegistry::with_defaults();
        let case = NeedleCase {
            id: "c".into(),
            question: "What is planted?".into(),
            reference_answer: "x".into(),
            haystack_ref: "neutral".into(),
            distractor_ref: None,
            first_depth_only: false,
            fabrication_lexicon: vec![],
            needles: vec![needle("a", 20)],
        };
        let bundle = build_lc_prompt(&case, "CONTEXT BODY", &reg, "default").unwrap();
        assert!(bundle.user_text.contains("CONTEXT BODY"));
        assert!(bundle.user_text.ends_with(&case.question));
        assert_eq!(bundle.user_text.matches("CONTEXT BODY").count(), 1);
        assert!(matches!(
            build_lc_prompt(&case, "x", &reg, "nope"),
            Err(AssemblyError::ConfigError(_))
        ));
    }

    #[test]
    fn lc_prompt_deterministic() {
        let reg = TemplateRegistry::with_defaults();
        let case = NeedleCase {
            id: "c".into(),
            question: "Q?".into(),
            reference_answer: "x".into(),
            haystack_ref: "neutral".into(),
            distractor_ref: None,
            first_depth_only: false,
            fabrication_lexicon: vec![],
            needles: vec![needle("a", 20)],
        };
        let b1 = build_lc_prompt(&case, "ctx", &reg, "default").unwrap();
        let b2 = build_lc_prompt(&case, "ctx", &reg, "default").unwrap();
        assert_eq!(b1, b2);
    }
}
