//! Haystack corpora: loading, token counting, sentence indexing, and
//! seed-deterministic sampling of filler text to a token budget.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus directory {0} contains no .txt/.md documents")]
    CorpusEmpty(PathBuf),
    #[error("io error reading {path}: {source}")]
    IoError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("document {0} is empty after whitespace normalization")]
    EmptyDocument(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Filler text unrelated to any needle case.
    Neutral,
    /// Shares vocabulary with needle cases (adversarial haystack).
    Distractor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub id: String,
    pub documents: Vec<Document>,
    pub kind: CorpusKind,
}

/// Token counting scheme. The default `word_approx` makes every number in
/// the test suite hand-checkable; `external` records a tokenizer name for
/// provenance but counts locally with the word rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScheme {
    WordApprox,
    CharsPerToken(u32),
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounter {
    pub scheme: TokenScheme,
}

impl Default for TokenCounter {
    fn default() -> Self {
        TokenCounter { scheme: TokenScheme::WordApprox }
    }
}

impl TokenCounter {
    pub fn word_approx() -> Self {
        Self::default()
    }

    pub fn chars_per_token(k: u32) -> Self {
        assert!(k > 0, "chars_per_token requires a positive divisor");
        TokenCounter { scheme: TokenScheme::CharsPerToken(k) }
    }

    pub fn count(&self, text: &str) -> usize {
        if text.trim().is_empty() {
            return 0;
        }
        match &self.scheme {
            TokenScheme::WordApprox | TokenScheme::External(_) => text::word_count(text),
            TokenScheme::CharsPerToken(k) => {
                let chars = text.chars().count();
                chars.div_ceil(*k as usize)
            }
        }
    }
}

pub fn count_tokens(text: &str, counter: &TokenCounter) -> usize {
    counter.count(text)
}

/// Character offsets at which a sentence may end. Boundaries are the offsets
/// just past `.`, `!`, `?`, or a newline, when followed by whitespace or the
/// end of text. The text length is always the final boundary.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SentenceIndex {
    pub boundaries: Vec<usize>,
}

impl SentenceIndex {
    pub fn of(text: &str) -> Self {
        let bytes = text.as_bytes();
        let mut boundaries = Vec::new();
        for (i, c) in text.char_indices() {
            let next = i + c.len_utf8();
            if c == '\n' {
                boundaries.push(next);
            } else if matches!(c, '.' | '!' | '?')
                && (next == bytes.len() || text[next..].starts_with(char::is_whitespace))
            {
                boundaries.push(next);
            }
        }
        if !text.is_empty() && boundaries.last() != Some(&text.len()) {
            boundaries.push(text.len());
        }
        SentenceIndex { boundaries }
    }

    /// Greatest boundary ≤ `offset`; 0 (the text start) counts as a boundary.
    pub fn snap_before(&self, offset: usize) -> usize {
        match self.boundaries.binary_search(&offset) {
            Ok(i) => self.boundaries[i],
            Err(0) => 0,
            Err(i) => self.boundaries[i - 1],
        }
    }

    /// Smallest boundary strictly greater than `offset`, if any.
    pub fn next_after(&self, offset: usize) -> Option<usize> {
        self.boundaries.iter().copied().find(|&b| b > offset)
    }
}

/// Sentences of a document as (start, end) character ranges.
fn sentences(text: &str) -> Vec<(usize, usize)> {
    let idx = SentenceIndex::of(text);
    let mut out = Vec::new();
    let mut start = 0;
    for &b in &idx.boundaries {
        let s = text[start..b].trim();
        if !s.is_empty() {
            // trim leading whitespace off the range
            let lead = text[start..b].len() - text[start..b].trim_start().len();
            let trail = text[start..b].len() - text[start..b].trim_end().len();
            out.push((start + lead, b - trail));
        }
        start = b;
    }
    out
}

pub fn load_corpus(root: &Path, id: &str, kind: CorpusKind) -> Result<Corpus, CorpusError> {
    let entries = fs::read_dir(root).map_err(|e| CorpusError::IoError { path: root.to_path_buf(), source: e })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()), Some("txt") | Some("md"))
        })
        .collect();
    paths.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if paths.is_empty() {
        return Err(CorpusError::CorpusEmpty(root.to_path_buf()));
    }
    let mut documents = Vec::with_capacity(paths.len());
    for p in paths {
        let raw = fs::read_to_string(&p).map_err(|e| CorpusError::IoError { path: p.clone(), source: e })?;
        let norm = raw.replace("\r\n", "\n").replace('\r', "\n");
        if norm.trim().is_empty() {
            return Err(CorpusError::EmptyDocument(p));
        }
        let doc_id = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        documents.push(Document { doc_id, text: norm });
    }
    Ok(Corpus { id: id.to_string(), documents, kind })
}

/// Which part of which document a sample drew from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSegment {
    pub doc_id: String,
    pub char_range: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub corpus_id: String,
    pub seed: u64,
    pub budget: usize,
    pub segments: Vec<SampleSegment>,
    pub wrapped: bool,
}

#[derive(Debug, Clone)]
pub struct HaystackSample {
    pub text: String,
    pub sentences: SentenceIndex,
    pub tokens: usize,
    pub provenance: SampleProvenance,
}

/// Fill up to `budget` tokens with whole sentences, consuming documents in a
/// seed-determined rotation. Wraps (and flags it) when the corpus is shorter
/// than the budget. Deterministic for fixed (corpus, budget, seed).
pub fn sample_haystack(corpus: &Corpus, budget: usize, seed: u64, counter: &TokenCounter) -> HaystackSample {
    let mut out = String::new();
    let mut used = 0usize;
    let mut segments: Vec<SampleSegment> = Vec::new();
    let mut wrapped = false;

    let n = corpus.documents.len();
    if n > 0 && budget > 0 {
        let start_doc = (seed % n as u64) as usize;
        let mut pass = 0usize;
        'fill: loop {
            let mut added_this_pass = 0usize;
            for d in 0..n {
                let repeat_visit = pass > 0;
                let doc = &corpus.documents[(start_doc + d) % n];
                let mut seg_start: Option<usize> = None;
                let mut seg_end = 0usize;
                for &(s, e) in &sentences(&doc.text) {
                    let sent = &doc.text[s..e];
                    let cost = counter.count(sent);
                    if cost == 0 {
                        continue;
                    }
                    if used + cost > budget {
                        break;
                    }
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(sent);
                    used += cost;
                    added_this_pass += cost;
                    if repeat_visit {
                        wrapped = true;
                    }
                    if seg_start.is_none() {
                        seg_start = Some(s);
                    }
                    seg_end = e;
                    if used == budget {
                        if let Some(ss) = seg_start {
                            segments.push(SampleSegment { doc_id: doc.doc_id.clone(), char_range: (ss, seg_end) });
                        }
                        break 'fill;
                    }
                }
                if let Some(ss) = seg_start {
                    segments.push(SampleSegment { doc_id: doc.doc_id.clone(), char_range: (ss, seg_end) });
                }
            }
            if added_this_pass == 0 {
                // No sentence fits in the remaining budget.
                break;
            }
            pass += 1;
        }
    }

    let sentences = SentenceIndex::of(&out);
    HaystackSample {
        tokens: counter.count(&out),
        sentences,
        provenance: SampleProvenance {
            corpus_id: corpus.id.clone(),
            seed,
            budget,
            segments,
            wrapped,
        },
        text: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn corpus_of(docs: &[(&str, &str)]) -> Corpus {
        Corpus {
            id: "test".into(),
            documents: docs
                .iter()
                .map(|(id, t)| Document { doc_id: id.to_string(), text: t.to_string() })
                .collect(),
            kind: CorpusKind::Neutral,
        }
    }

    #[test]
    fn count_tokens_examples() {
        let w = TokenCounter::word_approx();
        assert_eq!(count_tokens("", &w), 0);
        assert_eq!(count_tokens("   ", &w), 0);
        assert_eq!(count_tokens("one two three", &w), 3);
        let c = TokenCounter::chars_per_token(4);
        let s = "x".repeat(400);
        assert_eq!(count_tokens(&s, &c), 100);
        let s = "x".repeat(401);
        assert_eq!(count_tokens(&s, &c), 101);
    }

    #[test]
    fn external_scheme_counts_like_word_approx() {
        let e = TokenCounter { scheme: TokenScheme::External("tiktoken".into()) };
        assert_eq!(count_tokens("a b c", &e), 3);
    }

    #[test]
    fn load_corpus_orders_lexicographically() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "World.").unwrap();
        fs::write(dir.path().join("a.txt"), "Hello.").unwrap();
        fs::write(dir.path().join("ignored.json"), "{}").unwrap();
        let c = load_corpus(dir.path(), "c", CorpusKind::Neutral).unwrap();
        assert_eq!(c.documents.len(), 2);
        assert_eq!(c.documents[0].doc_id, "a.txt");
        assert_eq!(c.documents[0].text, "Hello.");
        assert_eq!(c.documents[1].doc_id, "b.txt");
    }

    #[test]
    fn load_corpus_empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        match load_corpus(dir.path(), "c", CorpusKind::Neutral) {
            Err(CorpusError::CorpusEmpty(_)) => {}
            other => panic!("expected CorpusEmpty, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_rejects_blank_document() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "  \n ").unwrap();
        assert!(matches!(
            load_corpus(dir.path(), "c", CorpusKind::Neutral),
            Err(CorpusError::EmptyDocument(_))
        ));
    }

    #[test]
    fn sentence_index_rules() {
        let idx = SentenceIndex::of("One. Two! Three? Four\nFive");
        assert_eq!(idx.boundaries, vec![4, 9, 16, 22, 26]);
        let idx = SentenceIndex::of("v1.2 is out. Done.");
        // "." inside v1.2 is not followed by whitespace
        assert_eq!(idx.boundaries, vec![12, 18]);
        assert!(SentenceIndex::of("").boundaries.is_empty());
    }

    #[test]
    fn snap_before_and_next_after() {
        let idx = SentenceIndex::of("One. Two. Three.");
        assert_eq!(idx.boundaries, vec![4, 9, 16]);
        assert_eq!(idx.snap_before(3), 0);
        assert_eq!(idx.snap_before(4), 4);
        assert_eq!(idx.snap_before(8), 4);
        assert_eq!(idx.next_after(4), Some(9));
        assert_eq!(idx.next_after(16), None);
    }

    #[test]
    fn sample_zero_budget_is_empty() {
        let c = corpus_of(&[("a", "One two three.")]);
        let s = sample_haystack(&c, 0, 7, &TokenCounter::word_approx());
        assert!(s.text.is_empty());
        assert!(s.sentences.boundaries.is_empty());
        assert_eq!(s.tokens, 0);
        assert!(!s.provenance.wrapped);
    }

    #[test]
    fn sample_truncates_at_sentence_boundary() {
        // 3 one-sentence docs of 10 tokens each, budget 25 -> 2 sentences, 20 tokens
        let ten = "w1 w2 w3 w4 w5 w6 w7 w8 w9 end.";
        let c = corpus_of(&[("a", ten), ("b", ten), ("c", ten)]);
        let counter = TokenCounter::word_approx();
        let s = sample_haystack(&c, 25, 0, &counter);
        assert_eq!(s.tokens, 20);
        assert_eq!(s.sentences.boundaries.len(), 2);
    }

    #[test]
    fn sample_is_deterministic_and_seed_rotates() {
        let c = corpus_of(&[("a", "Alpha one two."), ("b", "Beta one two."), ("c", "Gamma one two.")]);
        let counter = TokenCounter::word_approx();
        let s1 = sample_haystack(&c, 6, 4, &counter);
        let s2 = sample_haystack(&c, 6, 4, &counter);
        assert_eq!(s1.text, s2.text);
        // seed 4 % 3 docs = start at doc index 1
        assert!(s1.text.starts_with("Beta"));
        let s3 = sample_haystack(&c, 6, 0, &counter);
        assert!(s3.text.starts_with("Alpha"));
    }

    #[test]
    fn sample_wraps_and_flags_short_corpus() {
        let c = corpus_of(&[("a", "Just five words right here.")]);
        let counter = TokenCounter::word_approx();
        let s = sample_haystack(&c, 12, 0, &counter);
        assert!(s.provenance.wrapped);
        assert_eq!(s.tokens, 10);
        assert!(s.tokens <= 12);
    }

    #[test]
    fn sample_never_exceeds_budget() {
        let c = corpus_of(&[
            ("a", "One two three four five. Six seven."),
            ("b", "Eight nine ten eleven twelve thirteen fourteen."),
        ]);
        let counter = TokenCounter::word_approx();
        for budget in 0..30 {
            for seed in 0..4 {
                let s = sample_haystack(&c, budget, seed, &counter);
                assert!(s.tokens <= budget, "budget {budget} seed {seed} got {}", s.tokens);
            }
        }
    }
}
