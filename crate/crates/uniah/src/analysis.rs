//! Log-driven aggregation: length-by-depth performance matrices, win rates,
//! context-bucket tables, error/noise correlation, threshold stumps, and
//! deterministic CSV/SVG artifacts. No analysis step calls a model backend.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runner::{TrialMode, TrialResult};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no trials match the selection")]
    EmptySelection,
    #[error("cannot split: all x values are equal")]
    NoSplit,
    #[error("io error at {path}: {source}")]
    IoError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed matrix csv: {0}")]
    MatrixParse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub lengths: Vec<usize>,
    pub depths: Vec<u32>,
    /// cells[i][j] = bucket for (lengths[i], depths[j]); None where no trials.
    pub cells: Vec<Vec<Option<Cell>>>,
}

impl PerformanceMatrix {
    pub fn overall_mean(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for row in &self.cells {
            for c in row.iter().flatten() {
                sum += c.mean * c.count as f64;
                n += c.count;
            }
        }
        if n == 0 {
            None
        } else {
            Some(sum / n as f64)
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean judge score per (context length, depth) cell over the filtered log.
pub fn matrix<F>(results: &[TrialResult], filter: F) -> Result<PerformanceMatrix, AnalysisError>
where
    F: Fn(&TrialResult) -> bool,
{
    let mut grouped: BTreeMap<(usize, u32), Vec<f64>> = BTreeMap::new();
    for r in results {
        if !filter(r) {
            continue;
        }
        if let Some(j) = &r.judge {
            grouped
                .entry((r.key.context_length, r.key.depth_percent))
                .or_default()
                .push(j.value as f64);
        }
    }
    if grouped.is_empty() {
        return Err(AnalysisError::EmptySelection);
    }
    let lengths: Vec<usize> = grouped.keys().map(|(l, _)| *l).collect::<BTreeSet<_>>().into_iter().collect();
    let depths: Vec<u32> = grouped.keys().map(|(_, d)| *d).collect::<BTreeSet<_>>().into_iter().collect();
    let mut cells = vec![vec![None; depths.len()]; lengths.len()];
    for ((l, d), scores) in grouped {
        let i = lengths.binary_search(&l).unwrap();
        let j = depths.binary_search(&d).unwrap();
        let (mean, std) = mean_std(&scores);
        cells[i][j] = Some(Cell { mean, std, count: scores.len() });
    }
    Ok(PerformanceMatrix { lengths, depths, cells })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorePair {
    pub case_id: String,
    pub context_length: usize,
    pub depth_percent: u32,
    pub backend_id: String,
    pub seed: u64,
    pub rag_mode: String,
    pub rag_score: f64,
    pub lc_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub pairs: Vec<ScorePair>,
    /// Fraction of pairs with rag_score >= lc_score.
    pub win_rate: f64,
    pub unpaired: usize,
}

/// Pair every scored RAG trial with the LC trial sharing
/// (case, length, depth, backend, seed).
pub fn win_rate(results: &[TrialResult]) -> Result<PairedComparison, AnalysisError> {
    type PairKey = (String, usize, u32, String, u64);
    let mut lc: BTreeMap<PairKey, f64> = BTreeMap::new();
    let mut rag: Vec<(PairKey, String, f64)> = Vec::new();
    let mut scored = 0usize;
    for r in results {
        let Some(j) = &r.judge else { continue };
        scored += 1;
        let k = (
            r.key.case_id.clone(),
            r.key.context_length,
            r.key.depth_percent,
            r.key.backend_id.clone(),
            r.key.seed,
        );
        match &r.key.mode {
            TrialMode::Lc => {
                lc.insert(k, j.value as f64);
            }
            TrialMode::Rag { .. } => rag.push((k, r.key.mode.label(), j.value as f64)),
        }
    }
    let mut pairs = Vec::new();
    let mut unpaired = 0usize;
    for (k, mode, rag_score) in rag {
        match lc.get(&k) {
            Some(&lc_score) => pairs.push(ScorePair {
                case_id: k.0,
                context_length: k.1,
                depth_percent: k.2,
                backend_id: k.3,
                seed: k.4,
                rag_mode: mode,
                rag_score,
                lc_score,
            }),
            None => unpaired += 1,
        }
    }
    // LC trials with no RAG partner are also unpaired
    let paired_lc: BTreeSet<PairKey> = pairs
        .iter()
        .map(|p| (p.case_id.clone(), p.context_length, p.depth_percent, p.backend_id.clone(), p.seed))
        .collect();
    unpaired += lc.keys().filter(|k| !paired_lc.contains(*k)).count();
    let _ = scored;
    if pairs.is_empty() {
        return Err(AnalysisError::EmptySelection);
    }
    let wins = pairs.iter().filter(|p| p.rag_score >= p.lc_score).count();
    let win_rate = wins as f64 / pairs.len() as f64;
    Ok(PairedComparison { pairs, win_rate, unpaired })
}

/// The paper's context ranges: 1-16k / 16k-32k / 32k-64k / 64k-128k,
/// half-open except the top edge which includes 128k.
pub fn default_buckets() -> Vec<(usize, usize)> {
    vec![(0, 16_000), (16_000, 32_000), (32_000, 64_000), (64_000, 128_001)]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketRow {
    pub backend_id: String,
    pub bucket: (usize, usize),
    pub mode: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean ± std per (backend, context bucket, mode kind), assigned by
/// nominal context length over half-open [lo, hi) ranges.
pub fn bucket_summary(results: &[TrialResult], buckets: &[(usize, usize)]) -> Vec<BucketRow> {
    for w in buckets.windows(2) {
        assert!(w[0].1 <= w[1].0, "buckets must be disjoint and ordered");
    }
    let mut grouped: BTreeMap<(String, (usize, usize), String), Vec<f64>> = BTreeMap::new();
    for r in results {
        let Some(j) = &r.judge else { continue };
        let Some(&bucket) = buckets.iter().find(|(lo, hi)| r.key.context_length >= *lo && r.key.context_length < *hi)
        else {
            continue;
        };
        let mode = if r.key.mode.is_rag() { "rag".to_string() } else { "lc".to_string() };
        grouped.entry((r.key.backend_id.clone(), bucket, mode)).or_default().push(j.value as f64);
    }
    grouped
        .into_iter()
        .map(|((backend_id, bucket, mode), scores)| {
            let (mean, std) = mean_std(&scores);
            BucketRow { backend_id, bucket, mode, mean, std, count: scores.len() }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StumpSplit {
    pub threshold: f64,
    pub left_mean: f64,
    pub right_mean: f64,
    pub sse: f64,
    pub t_stat: f64,
    /// True when every split has equal SSE (constant response).
    pub degenerate: bool,
}

/// Depth-1 regression stump: exhaustive scan over midpoints between
/// adjacent distinct sorted x values, minimizing total SSE; ties take the
/// smallest threshold.
pub fn stump(xs: &[f64], ys: &[f64]) -> Result<StumpSplit, AnalysisError> {
    assert_eq!(xs.len(), ys.len(), "xs and ys must be parallel");
    let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let distinct: Vec<f64> = {
        let mut d: Vec<f64> = pts.iter().map(|p| p.0).collect();
        d.dedup();
        d
    };
    if distinct.len() < 2 {
        return Err(AnalysisError::NoSplit);
    }

    let sse_of = |vals: &[f64]| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - m) * (v - m)).sum()
    };

    let mut best: Option<StumpSplit> = None;
    let mut all_equal_sse = true;
    let mut first_sse: Option<f64> = None;
    for w in distinct.windows(2) {
        let threshold = (w[0] + w[1]) / 2.0;
        let left: Vec<f64> = pts.iter().filter(|p| p.0 <= threshold).map(|p| p.1).collect();
        let right: Vec<f64> = pts.iter().filter(|p| p.0 > threshold).map(|p| p.1).collect();
        let sse = sse_of(&left) + sse_of(&right);
        match first_sse {
            None => first_sse = Some(sse),
            Some(f) if (f - sse).abs() > 1e-12 => all_equal_sse = false,
            _ => {}
        }
        let better = match &best {
            None => true,
            Some(b) => sse < b.sse - 1e-12,
        };
        if better {
            let (lm, ls) = mean_std(&left);
            let (rm, rs) = mean_std(&right);
            let n1 = left.len() as f64;
            let n2 = right.len() as f64;
            let denom = (ls * ls / n1 + rs * rs / n2).sqrt();
            let t_stat = if denom == 0.0 { 0.0 } else { (lm - rm) / denom };
            best = Some(StumpSplit { threshold, left_mean: lm, right_mean: rm, sse, t_stat, degenerate: false });
        }
    }
    let mut best = best.expect("at least one candidate");
    best.degenerate = all_equal_sse;
    Ok(best)
}

// ---------------------------------------------------------------------------
// Artifacts: matrix CSV and heatmap SVG
// ---------------------------------------------------------------------------

pub fn matrix_to_csv(m: &PerformanceMatrix) -> String {
    let mut out = String::from("context_length");
    for d in &m.depths {
        let _ = write!(out, ",{d}");
    }
    out.push('\n');
    for (i, l) in m.lengths.iter().enumerate() {
        let _ = write!(out, "{l}");
        for j in 0..m.depths.len() {
            match &m.cells[i][j] {
                Some(c) => {
                    let _ = write!(out, ",{}", c.mean);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Parse a matrix CSV back into lengths/depths/means (counts and stds are
/// not stored in the CSV).
pub fn matrix_from_csv(csv: &str) -> Result<PerformanceMatrix, AnalysisError> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| AnalysisError::MatrixParse("empty csv".into()))?;
    let depths: Vec<u32> = header
        .split(',')
        .skip(1)
        .map(|s| s.parse().map_err(|_| AnalysisError::MatrixParse(format!("bad depth {s:?}"))))
        .collect::<Result<_, _>>()?;
    let mut lengths = Vec::new();
    let mut cells = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let l: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| AnalysisError::MatrixParse(format!("bad length in {line:?}")))?;
        lengths.push(l);
        let row: Vec<Option<Cell>> = parts
            .map(|s| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(|mean| Some(Cell { mean, std: 0.0, count: 0 }))
                        .map_err(|_| AnalysisError::MatrixParse(format!("bad cell {s:?}")))
                }
            })
            .collect::<Result<_, _>>()?;
        if row.len() != depths.len() {
            return Err(AnalysisError::MatrixParse("row width mismatch".into()));
        }
        cells.push(row);
    }
    Ok(PerformanceMatrix { lengths, depths, cells })
}

/// Red-to-green color over scores in [1, 10].
fn score_color(score: f64) -> String {
    let t = ((score - 1.0) / 9.0).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(217.0, 92.0), lerp(83.0, 184.0), lerp(79.0, 92.0))
}

/// Deterministic vector heatmap: fixed palette, no timestamps, cell mean
/// annotations. Lengths run top to bottom, depths left to right.
pub fn matrix_to_svg(m: &PerformanceMatrix) -> String {
    const CELL_W: usize = 64;
    const CELL_H: usize = 36;
    const LEFT: usize = 90;
    const TOP: usize = 40;
    let width = LEFT + CELL_W * m.depths.len() + 10;
    let height = TOP + CELL_H * m.lengths.len() + 10;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);
    for (j, d) in m.depths.iter().enumerate() {
        let x = LEFT + j * CELL_W + CELL_W / 2;
        let _ = writeln!(svg, r#"<text x="{x}" y="{}" text-anchor="middle">{d}%</text>"#, TOP - 12);
    }
    for (i, l) in m.lengths.iter().enumerate() {
        let y = TOP + i * CELL_H + CELL_H / 2 + 4;
        let _ = writeln!(svg, r#"<text x="{}" y="{y}" text-anchor="end">{l}</text>"#, LEFT - 8);
        for j in 0..m.depths.len() {
            let x = LEFT + j * CELL_W;
            let cy = TOP + i * CELL_H;
            match &m.cells[i][j] {
                Some(c) => {
                    let color = score_color(c.mean);
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{x}" y="{cy}" width="{CELL_W}" height="{CELL_H}" fill="{color}" stroke="white"/>"#
                    );
                    let tx = x + CELL_W / 2;
                    let _ = writeln!(
                        svg,
                        r#"<text x="{tx}" y="{y}" text-anchor="middle">{:.1}</text>"#,
                        c.mean
                    );
                }
                None => {
                    let _ = writeln!(
                        svg,
                        r##"<rect x="{x}" y="{cy}" width="{CELL_W}" height="{CELL_H}" fill="#eeeeee" stroke="white"/>"##
                    );
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write the matrix CSV and SVG heatmap next to each other.
pub fn emit_heatmap(m: &PerformanceMatrix, csv_path: &Path, svg_path: &Path) -> Result<(), AnalysisError> {
    fs::write(csv_path, matrix_to_csv(m)).map_err(|e| AnalysisError::IoError { path: csv_path.to_path_buf(), source: e })?;
    fs::write(svg_path, matrix_to_svg(m)).map_err(|e| AnalysisError::IoError { path: svg_path.to_path_buf(), source: e })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Error / noise correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorLedgerRow {
    pub backend_id: String,
    pub bucket: (usize, usize),
    pub trials: usize,
    pub missing_rate: f64,
    pub extra_rate: f64,
    pub self_doubt_rate: f64,
    pub mean_noise_ratio: f64,
    pub missing_rate_norm: f64,
    pub missing_rate_rev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorCorrelates {
    pub rows: Vec<ErrorLedgerRow>,
    pub noise_missing_stump: Option<StumpSplit>,
    pub noise_extra_stump: Option<StumpSplit>,
}

/// Per (backend, context bucket) error rates plus noise-ratio threshold
/// detection over the RAG trials.
pub fn error_correlates(results: &[TrialResult], buckets: &[(usize, usize)]) -> ErrorCorrelates {
    #[derive(Default)]
    struct Acc {
        trials: usize,
        missing: usize,
        extra: usize,
        doubt: usize,
        noise_sum: f64,
        noise_n: usize,
        norm_missing: usize,
        norm_n: usize,
        rev_missing: usize,
        rev_n: usize,
    }
    let mut grouped: BTreeMap<(String, (usize, usize)), Acc> = BTreeMap::new();
    let mut etas: Vec<f64> = Vec::new();
    let mut missing_flags: Vec<f64> = Vec::new();
    let mut extra_flags: Vec<f64> = Vec::new();

    for r in results {
        let Some(cov) = &r.coverage else { continue };
        let Some(&bucket) = buckets.iter().find(|(lo, hi)| r.key.context_length >= *lo && r.key.context_length < *hi)
        else {
            continue;
        };
        let acc = grouped.entry((r.key.backend_id.clone(), bucket)).or_default();
        acc.trials += 1;
        let miss = !cov.missing.is_empty();
        let extra = !cov.extra.is_empty();
        if miss {
            acc.missing += 1;
        }
        if extra {
            acc.extra += 1;
        }
        if cov.self_doubt {
            acc.doubt += 1;
        }
        if let Some(ret) = &r.retrieval {
            acc.noise_sum += ret.noise_ratio;
            acc.noise_n += 1;
            etas.push(ret.noise_ratio);
            missing_flags.push(if miss { 1.0 } else { 0.0 });
            extra_flags.push(if extra { 1.0 } else { 0.0 });
            if let TrialMode::Rag { order, .. } = &r.key.mode {
                match order {
                    crate::ragsim::ChunkOrder::Norm => {
                        acc.norm_n += 1;
                        if miss {
                            acc.norm_missing += 1;
                        }
                    }
                    crate::ragsim::ChunkOrder::Rev => {
                        acc.rev_n += 1;
                        if miss {
                            acc.rev_missing += 1;
                        }
                    }
                }
            }
        }
    }

    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let rows = grouped
        .into_iter()
        .map(|((backend_id, bucket), a)| ErrorLedgerRow {
            backend_id,
            bucket,
            trials: a.trials,
            missing_rate: rate(a.missing, a.trials),
            extra_rate: rate(a.extra, a.trials),
            self_doubt_rate: rate(a.doubt, a.trials),
            mean_noise_ratio: if a.noise_n == 0 { 0.0 } else { a.noise_sum / a.noise_n as f64 },
            missing_rate_norm: rate(a.norm_missing, a.norm_n),
            missing_rate_rev: rate(a.rev_missing, a.rev_n),
        })
        .collect();

    ErrorCorrelates {
        rows,
        noise_missing_stump: stump(&etas, &missing_flags).ok(),
        noise_extra_stump: stump(&etas, &extra_flags).ok(),
    }
}

pub fn error_ledger_csv(report: &ErrorCorrelates) -> String {
    let mut out = String::from(
        "backend,bucket_lo,bucket_hi,trials,missing_rate,extra_rate,self_doubt_rate,mean_noise_ratio,missing_rate_norm,missing_rate_rev\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.backend_id,
            r.bucket.0,
            r.bucket.1,
            r.trials,
            r.missing_rate,
            r.extra_rate,
            r.self_doubt_rate,
            r.mean_noise_ratio,
            r.missing_rate_norm,
            r.missing_rate_rev
        );
    }
    out
}

pub fn bucket_table_csv(rows: &[BucketRow]) -> String {
    let mut out = String::from("backend,bucket_lo,bucket_hi,mode,mean,std,count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.backend_id, r.bucket.0, r.bucket.1, r.mode, r.mean, r.std, r.count
        );
    }
    out
}
