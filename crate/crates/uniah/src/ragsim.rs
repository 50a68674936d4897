//! The retrieval pipeline: sliding-window chunking, deterministic hash
//! embeddings, exhaustive cosine ranking, retrieval scopes, chunk ordering,
//! and noise/recall metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cases::NeedleCase;
use crate::corpus::TokenCounter;
use crate::text;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("invalid chunking params: overlap {overlap} must be < window {window}")]
    InvalidChunking { window: usize, overlap: usize },
    #[error("embedding provider error: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingParams {
    pub window: usize,
    pub overlap: usize,
}

impl ChunkingParams {
    pub fn new(window: usize, overlap: usize) -> Result<Self, RagError> {
        if overlap >= window || window == 0 {
            return Err(RagError::InvalidChunking { window, overlap });
        }
        Ok(ChunkingParams { window, overlap })
    }

    /// Paper defaults: 600-token windows with 100-token overlap.
    pub fn default_paper() -> Self {
        ChunkingParams { window: 600, overlap: 100 }
    }

    pub fn stride(&self) -> usize {
        self.window - self.overlap
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: usize,
    pub text: String,
    pub token_range: (usize, usize),
    /// (needle_id, element) pairs whose element string occurs in this chunk.
    pub contains_elements: BTreeSet<(String, String)>,
    pub score: f64,
}

/// Sliding-window chunking over whitespace tokens: chunk i covers tokens
/// [i*stride, i*stride + window), clipped at the end. Every token is covered.
pub fn chunk(context_text: &str, case: &NeedleCase, params: &ChunkingParams, _counter: &TokenCounter) -> Vec<ChunkRecord> {
    let spans = text::token_spans(context_text);
    let total = spans.len();
    let mut out = Vec::new();
    if total == 0 {
        return out;
    }
    let stride = params.stride();
    let elements = case.all_elements();
    let mut start = 0usize;
    let mut id = 0usize;
    while start < total {
        let end = (start + params.window).min(total);
        let char_start = spans[start].0;
        let char_end = spans[end - 1].1;
        let chunk_text = &context_text[char_start..char_end];
        let contains: BTreeSet<(String, String)> = elements
            .iter()
            .filter(|(_, e)| text::contains_normalized(chunk_text, e))
            .cloned()
            .collect();
        out.push(ChunkRecord {
            chunk_id: id,
            text: chunk_text.to_string(),
            token_range: (start, end),
            contains_elements: contains,
            score: 0.0,
        });
        id += 1;
        start += stride;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub degenerate: bool,
}

/// Deterministic bag-of-words hash embedding: each normalized word lands in
/// a signed bucket; the result is L2-normalized. Empty text degenerates to
/// the first basis vector.
pub fn hash_embed(text_in: &str, dimension: usize) -> Embedding {
    assert!(dimension >= 8, "embedding dimension must be at least 8");
    let mut v = vec![0.0f64; dimension];
    let norm = text::normalize(text_in);
    let mut any = false;
    for word in norm.split_whitespace() {
        let h = text::fnv1a64(word.as_bytes());
        let bucket = (h % dimension as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
        any = true;
    }
    let mag = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !any || mag == 0.0 {
        let mut basis = vec![0.0; dimension];
        basis[0] = 1.0;
        return Embedding { vector: basis, degenerate: true };
    }
    for x in &mut v {
        *x /= mag;
    }
    Embedding { vector: v, degenerate: false }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    DeterministicLocal,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingProvider {
    pub name: String,
    pub dimension: usize,
    pub mode: EmbeddingMode,
}

impl EmbeddingProvider {
    pub fn deterministic(dimension: usize) -> Self {
        EmbeddingProvider { name: "hash-bow".into(), dimension, mode: EmbeddingMode::DeterministicLocal }
    }

    pub fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RagError> {
        match self.mode {
            EmbeddingMode::DeterministicLocal => {
                Ok(texts.iter().map(|t| hash_embed(t, self.dimension).vector).collect())
            }
            EmbeddingMode::Remote => Err(RagError::Provider(
                "remote embedding requires a configured backend; use backends::embed_remote".into(),
            )),
        }
    }
}

/// Rank chunks by cosine similarity to the query, descending, ties broken by
/// ascending chunk_id. Returns the top `k` with scores recorded.
pub fn retrieve(
    query: &str,
    chunks: &[ChunkRecord],
    provider: &EmbeddingProvider,
    k: usize,
) -> Result<Vec<ChunkRecord>, RagError> {
    assert!(k >= 1, "k must be at least 1");
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let embeddings = provider.embed(&texts)?;
    let qv = provider.embed(&[query])?.remove(0);
    let mut ranked: Vec<ChunkRecord> = chunks
        .iter()
        .zip(embeddings)
        .map(|(c, e)| {
            let mut c = c.clone();
            c.score = cosine(&qv, &e);
            c
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.chunk_id.cmp(&b.chunk_id))
    });
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScope {
    TopK(usize),
    HalfLength,
    FullLength,
}

impl std::fmt::Display for RetrievalScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RetrievalScope::TopK(k) => write!(f, "top{k}"),
            RetrievalScope::HalfLength => write!(f, "half"),
            RetrievalScope::FullLength => write!(f, "full"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkOrder {
    Norm,
    Rev,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub ranked: Vec<ChunkRecord>,
    pub scope: RetrievalScope,
    pub order: ChunkOrder,
    pub noise_ratio: f64,
    pub needle_recall: f64,
    pub element_recall: f64,
    pub over_budget: bool,
}

/// Keep a ranking prefix according to the scope, then compute noise ratio
/// and recall over the kept set. Half/Full budgets are token budgets over
/// (L - reserve), halved for HalfLength.
pub fn apply_scope(
    ranking: &[ChunkRecord],
    scope: RetrievalScope,
    order: ChunkOrder,
    context_length: usize,
    reserve: usize,
    counter: &TokenCounter,
    case: &NeedleCase,
) -> RetrievalSet {
    assert!(!ranking.is_empty(), "ranking must be non-empty");
    let mut over_budget = false;
    let kept: Vec<ChunkRecord> = match scope {
        RetrievalScope::TopK(k) => ranking.iter().take(k.max(1)).cloned().collect(),
        RetrievalScope::HalfLength | RetrievalScope::FullLength => {
            let available = context_length.saturating_sub(reserve);
            let budget = if scope == RetrievalScope::HalfLength { available / 2 } else { available };
            let mut total = 0usize;
            let mut kept = Vec::new();
            for c in ranking {
                let cost = counter.count(&c.text);
                if total + cost > budget {
                    break;
                }
                total += cost;
                kept.push(c.clone());
            }
            if kept.is_empty() {
                over_budget = true;
                kept.push(ranking[0].clone());
            }
            kept
        }
    };

    let noisy = kept.iter().filter(|c| c.contains_elements.is_empty()).count();
    let noise_ratio = noisy as f64 / kept.len() as f64;
    let (needle_recall, element_recall) = recall_of(&kept, case);
    RetrievalSet { ranked: kept, scope, order, noise_ratio, needle_recall, element_recall, over_budget }
}

/// The context aggregation operator: Norm keeps descending relevance (the
/// most relevant chunk farthest from the question), Rev is the exact
/// reversal.
pub fn order_chunks(set: &RetrievalSet) -> Vec<&ChunkRecord> {
    let mut refs: Vec<&ChunkRecord> = set.ranked.iter().collect();
    if set.order == ChunkOrder::Rev {
        refs.reverse();
    }
    refs
}

fn recall_of(kept: &[ChunkRecord], case: &NeedleCase) -> (f64, f64) {
    let all = case.all_elements();
    if all.is_empty() {
        return (0.0, 0.0);
    }
    let present: BTreeSet<&(String, String)> = kept.iter().flat_map(|c| c.contains_elements.iter()).collect();
    let element_recall = present.len() as f64 / all.len() as f64;

    let mut needles_total = 0usize;
    let mut needles_hit = 0usize;
    for n in case.flat_needles() {
        if n.key_elements.is_empty() {
            continue;
        }
        needles_total += 1;
        let complete = n
            .key_elements
            .iter()
            .all(|e| present.contains(&(n.id.clone(), e.clone())));
        if complete {
            needles_hit += 1;
        }
    }
    let needle_recall = if needles_total == 0 { 0.0 } else { needles_hit as f64 / needles_total as f64 };
    (needle_recall, element_recall)
}

/// Element- and needle-level recall of a retrieval set.
pub fn retrieval_recall(set: &RetrievalSet, case: &NeedleCase) -> (f64, f64) {
    let (n, e) = recall_of(&set.ranked, case);
    (n, e)
}

/// One JSON line per chunk for audit dumps.
pub fn index_dump_line(c: &ChunkRecord) -> String {
    serde_json::json!({
        "chunk_id": c.chunk_id,
        "token_range": c.token_range,
        "score": c.score,
        "contains_elements": c.contains_elements,
    })
    .to_string()
}
