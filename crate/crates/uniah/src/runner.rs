//! Experiment grid planning and execution with an append-only, resumable
//! JSONL result log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{self, AssembledContext, TemplateRegistry};
use crate::backends::{BackendError, CaseRegistry, CompletionRequest, ModelBackend};
use crate::cases::{JudgeRubric, NeedleCase};
use crate::corpus::{self, Corpus, TokenCounter};
use crate::ragsim::{self, ChunkOrder, ChunkingParams, EmbeddingProvider, RetrievalScope};
use crate::scoring::{self, CoverageReport, ErrorClass, JudgeScore, ScoringError, SelfDoubtLexicon};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("unknown id in grid: {0}")]
    ConfigError(String),
    #[error("result sink error at {path}: {source}")]
    SinkError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Retrieval scope as written in a grid config; `top_k_auto` resolves per
/// case via the needles-to-k map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridScope {
    TopKAuto,
    TopK(usize),
    HalfLength,
    FullLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    Lc,
    Rag { scope: GridScope, order: ChunkOrder },
}

/// Concrete per-trial mode after scope resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    Lc,
    Rag { scope: RetrievalScope, order: ChunkOrder },
}

impl TrialMode {
    pub fn label(&self) -> String {
        match self {
            TrialMode::Lc => "lc".to_string(),
            TrialMode::Rag { scope, order } => {
                let o = match order {
                    ChunkOrder::Norm => "norm",
                    ChunkOrder::Rev => "rev",
                };
                format!("rag-{scope}-{o}")
            }
        }
    }

    pub fn is_rag(&self) -> bool {
        matches!(self, TrialMode::Rag { .. })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub context_lengths: Vec<usize>,
    /// Depth fractions in (0, 1].
    pub depths: Vec<f64>,
    pub cases: Vec<String>,
    pub modes: Vec<GridMode>,
    pub backends: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            context_lengths: vec![1_000, 2_000, 4_000, 8_000, 16_000, 32_000, 64_000, 128_000],
            depths: (1..=10).map(|i| i as f64 / 10.0).collect(),
            cases: vec![],
            modes: vec![GridMode::Lc, GridMode::Rag { scope: GridScope::TopKAuto, order: ChunkOrder::Norm }],
            backends: vec![],
            seeds: vec![0],
        }
    }
}

/// Paper defaults: top 5/10/20 chunks for 3/7/15-needle cases.
pub fn topk_for_needles(n: usize) -> usize {
    if n <= 3 {
        5
    } else if n <= 7 {
        10
    } else {
        20
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialKey {
    pub case_id: String,
    pub context_length: usize,
    pub depth_percent: u32,
    pub mode: TrialMode,
    pub backend_id: String,
    pub seed: u64,
}

impl TrialKey {
    pub fn sort_tuple(&self) -> (String, usize, u32, String, String, u64) {
        (
            self.case_id.clone(),
            self.context_length,
            self.depth_percent,
            self.mode.label(),
            self.backend_id.clone(),
            self.seed,
        )
    }

    /// Canonical string identity used for dedup/resume.
    pub fn canonical(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.case_id,
            self.context_length,
            self.depth_percent,
            self.mode.label(),
            self.backend_id,
            self.seed
        )
    }
}

impl Ord for TrialKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_tuple().cmp(&other.sort_tuple())
    }
}

impl PartialOrd for TrialKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub noise_ratio: f64,
    pub needle_recall: f64,
    pub element_recall: f64,
    pub kept_chunks: usize,
    pub total_chunks: usize,
    pub over_budget: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub key: TrialKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_hash: Option<String>,
    #[serde(default)]
    pub nominal_tokens: usize,
    #[serde(default)]
    pub actual_tokens: usize,
    #[serde(default)]
    pub haystack_wrapped: bool,
    #[serde(default)]
    pub prompt_tokens: usize,
    #[serde(default)]
    pub output_tokens: usize,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub template_hash: String,
    #[serde(default)]
    pub rubric_hash: String,
}

/// Everything a run needs: corpora, cases, backends, judge, templates,
/// chunking and budgeting knobs. Immutable during execution.
pub struct Harness {
    pub corpora: BTreeMap<String, Corpus>,
    pub cases: CaseRegistry,
    pub backends: BTreeMap<String, ModelBackend>,
    pub judge_backend: String,
    pub templates: TemplateRegistry,
    pub template_id: String,
    pub counter: TokenCounter,
    pub chunking: ChunkingParams,
    pub embedding_dimension: usize,
    pub answer_reserve: usize,
    pub rubric: JudgeRubric,
    pub doubt_lexicon: SelfDoubtLexicon,
}

impl Harness {
    pub fn case(&self, id: &str) -> Result<&NeedleCase, RunnerError> {
        self.cases.get(id).ok_or_else(|| RunnerError::ConfigError(format!("case {id}")))
    }

    pub fn backend(&self, id: &str) -> Result<&ModelBackend, RunnerError> {
        self.backends.get(id).ok_or_else(|| RunnerError::ConfigError(format!("backend {id}")))
    }

    pub fn reserved_prompt_tokens(&self, case: &NeedleCase) -> usize {
        let template = self.templates.get(&self.template_id).expect("template registered");
        template.overhead_tokens(&self.counter) + self.counter.count(&case.question) + self.answer_reserve
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannedGrid {
    pub trials: Vec<TrialKey>,
    /// Trials dropped because the backend's context window is too small.
    pub excluded_over_context: usize,
}

/// Deterministic trial plan: the full cross product, lexicographically
/// ordered, minus trials that exceed a backend's max context.
pub fn plan(grid: &ExperimentGrid, harness: &Harness) -> Result<PlannedGrid, RunnerError> {
    let mut trials = Vec::new();
    let mut excluded = 0usize;
    for case_id in &grid.cases {
        let case = harness.case(case_id)?;
        let k_auto = topk_for_needles(case.flat_needles().iter().filter(|n| !n.key_elements.is_empty()).count());
        for &length in &grid.context_lengths {
            for &depth in &grid.depths {
                assert!(depth > 0.0 && depth <= 1.0, "depth fractions must be in (0, 1]");
                let depth_percent = (depth * 100.0).round() as u32;
                for mode in &grid.modes {
                    let mode = match mode {
                        GridMode::Lc => TrialMode::Lc,
                        GridMode::Rag { scope, order } => TrialMode::Rag {
                            scope: match scope {
                                GridScope::TopKAuto => RetrievalScope::TopK(k_auto),
                                GridScope::TopK(k) => RetrievalScope::TopK(*k),
                                GridScope::HalfLength => RetrievalScope::HalfLength,
                                GridScope::FullLength => RetrievalScope::FullLength,
                            },
                            order: *order,
                        },
                    };
                    for backend_id in &grid.backends {
                        let backend = harness.backend(backend_id)?;
                        if length > backend.max_context {
                            excluded += grid.seeds.len();
                            continue;
                        }
                        for &seed in &grid.seeds {
                            trials.push(TrialKey {
                                case_id: case_id.clone(),
                                context_length: length,
                                depth_percent,
                                mode,
                                backend_id: backend_id.clone(),
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    trials.sort();
    Ok(PlannedGrid { trials, excluded_over_context: excluded })
}

/// Assemble the context for a trial. Shared verbatim between LC and RAG for
/// the same (case, length, depth, seed).
pub fn assemble_for(harness: &Harness, case: &NeedleCase, length: usize, depth_percent: u32, seed: u64) -> Result<AssembledContext, String> {
    let reserved = harness.reserved_prompt_tokens(case);
    let needles = case.planted_needles();
    let budget = assembly::compute_budget(length, reserved, needles, &harness.counter).map_err(|e| e.to_string())?;
    let corpus = harness
        .corpora
        .get(&case.haystack_ref)
        .ok_or_else(|| format!("unknown corpus {}", case.haystack_ref))?;
    let sample = corpus::sample_haystack(corpus, budget.haystack_budget, seed, &harness.counter);
    let alpha = depth_percent as f64 / 100.0;
    let plan = assembly::insertion_depths(needles.len(), alpha, budget.haystack_budget);
    Ok(assembly::insert_needles(&sample, needles, &plan, &harness.counter, length))
}

/// Execute one trial end to end. Trial-level problems become a recorded
/// failure, not an Err.
pub fn execute_trial(harness: &Harness, key: &TrialKey) -> TrialResult {
    let template_hash = harness
        .templates
        .get(&harness.template_id)
        .map(|t| t.sha256())
        .unwrap_or_default();
    let rubric_hash = scoring::rubric_sha256(&harness.rubric);
    let mut result = TrialResult {
        key: key.clone(),
        failure: None,
        answer: None,
        judge: None,
        judge_error: None,
        coverage: None,
        error_class: None,
        retrieval: None,
        context_hash: None,
        nominal_tokens: key.context_length,
        actual_tokens: 0,
        haystack_wrapped: false,
        prompt_tokens: 0,
        output_tokens: 0,
        latency_ms: 0,
        template_hash,
        rubric_hash,
    };

    let case = match harness.case(&key.case_id) {
        Ok(c) => c,
        Err(e) => {
            result.failure = Some(e.to_string());
            return result;
        }
    };
    let backend = match harness.backend(&key.backend_id) {
        Ok(b) => b,
        Err(e) => {
            result.failure = Some(e.to_string());
            return result;
        }
    };

    let context = match assemble_for(harness, case, key.context_length, key.depth_percent, key.seed) {
        Ok(c) => c,
        Err(e) => {
            result.failure = Some(e);
            return result;
        }
    };
    result.context_hash = Some(context.sha256());
    result.actual_tokens = context.actual_length;
    result.haystack_wrapped = context.haystack_provenance.wrapped;

    let prompt_context: String = match &key.mode {
        TrialMode::Lc => context.text.clone(),
        TrialMode::Rag { scope, order } => {
            let chunks = ragsim::chunk(&context.text, case, &harness.chunking, &harness.counter);
            if chunks.is_empty() {
                result.failure = Some("empty context produced no chunks".into());
                return result;
            }
            let provider = EmbeddingProvider::deterministic(harness.embedding_dimension);
            let ranking = match ragsim::retrieve(&case.question, &chunks, &provider, chunks.len()) {
                Ok(r) => r,
                Err(e) => {
                    result.failure = Some(e.to_string());
                    return result;
                }
            };
            let reserve = harness.reserved_prompt_tokens(case);
            let set = ragsim::apply_scope(&ranking, *scope, *order, key.context_length, reserve, &harness.counter, case);
            result.retrieval = Some(RetrievalMetrics {
                noise_ratio: set.noise_ratio,
                needle_recall: set.needle_recall,
                element_recall: set.element_recall,
                kept_chunks: set.ranked.len(),
                total_chunks: chunks.len(),
                over_budget: set.over_budget,
            });
            ragsim::order_chunks(&set)
                .iter()
                .map(|c| c.text.as_str())
                .collect::<Vec<_>>()
                .join("\n\n")
        }
    };

    let bundle = match assembly::build_lc_prompt(case, &prompt_context, &harness.templates, &harness.template_id) {
        Ok(b) => b,
        Err(e) => {
            result.failure = Some(e.to_string());
            return result;
        }
    };
    let request = CompletionRequest {
        system_text: bundle.system_text,
        user_text: bundle.user_text,
        max_output_tokens: harness.answer_reserve,
    };
    let response = match backend.complete(&request) {
        Ok(r) => r,
        Err(e @ BackendError::ContextOverflow { .. }) => {
            result.failure = Some(e.to_string());
            return result;
        }
        Err(e) => {
            result.failure = Some(e.to_string());
            return result;
        }
    };
    result.prompt_tokens = response.prompt_tokens;
    result.output_tokens = response.output_tokens;
    result.latency_ms = response.latency_ms;

    let answer = response.text;
    let cov = scoring::coverage_with_lexicon(&answer, case, &harness.doubt_lexicon);
    result.error_class = Some(scoring::classify(&cov));
    result.coverage = Some(cov);

    match harness.backend(&harness.judge_backend) {
        Ok(judge_backend) => {
            match scoring::judge(&case.question, &case.reference_answer, &answer, judge_backend, &harness.rubric) {
                Ok(score) => result.judge = Some(score),
                Err(ScoringError::JudgeUnparseable { raw }) => {
                    result.judge_error = Some(format!("unparseable judge reply: {raw}"));
                }
                Err(e) => result.judge_error = Some(e.to_string()),
            }
        }
        Err(e) => result.judge_error = Some(e.to_string()),
    }
    result.answer = Some(answer);
    result
}

pub const LOG_HEADER: &str = r#"{"schema":"uniah-trial-log","version":1}"#;

/// Keys already present in a result log.
pub fn read_log_keys(path: &Path) -> Result<BTreeSet<String>, RunnerError> {
    let mut keys = BTreeSet::new();
    if !path.exists() {
        return Ok(keys);
    }
    let file = File::open(path).map_err(|e| RunnerError::SinkError { path: path.to_path_buf(), source: e })?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| RunnerError::SinkError { path: path.to_path_buf(), source: e })?;
        if line.trim().is_empty() || line.contains("\"schema\"") {
            continue;
        }
        if let Ok(r) = serde_json::from_str::<TrialResult>(&line) {
            keys.insert(r.key.canonical());
        }
    }
    Ok(keys)
}

pub fn read_log(path: &Path) -> Result<Vec<TrialResult>, RunnerError> {
    let file = File::open(path).map_err(|e| RunnerError::SinkError { path: path.to_path_buf(), source: e })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| RunnerError::SinkError { path: path.to_path_buf(), source: e })?;
        if line.trim().is_empty() || line.contains("\"schema\"") {
            continue;
        }
        if let Ok(r) = serde_json::from_str::<TrialResult>(&line) {
            out.push(r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub done: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Counting semaphore for per-backend concurrency caps.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

/// Run the plan against an append-only JSONL sink. Already-present keys are
/// skipped; trial failures are recorded, never abort the run.
pub fn run(plan: &PlannedGrid, harness: &Harness, sink_path: &Path, concurrency: usize) -> Result<RunSummary, RunnerError> {
    let existing = read_log_keys(sink_path)?;
    let fresh = !sink_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(sink_path)
        .map_err(|e| RunnerError::SinkError { path: sink_path.to_path_buf(), source: e })?;
    let writer = Mutex::new(BufWriter::new(file));
    if fresh {
        let mut w = writer.lock().unwrap();
        writeln!(w, "{LOG_HEADER}").map_err(|e| RunnerError::SinkError { path: sink_path.to_path_buf(), source: e })?;
    }

    let todo: Vec<&TrialKey> = plan.trials.iter().filter(|k| !existing.contains(&k.canonical())).collect();
    let skipped = plan.trials.len() - todo.len();

    let semaphores: BTreeMap<String, Arc<Semaphore>> = harness
        .backends
        .iter()
        .map(|(id, b)| (id.clone(), Arc::new(Semaphore::new(b.concurrency_cap))))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .expect("thread pool");

    let failed = Mutex::new(0usize);
    let sink_err: Mutex<Option<std::io::Error>> = Mutex::new(None);

    pool.install(|| {
        use rayon::prelude::*;
        todo.par_iter().for_each(|key| {
            if sink_err.lock().unwrap().is_some() {
                return;
            }
            let sem = semaphores.get(&key.backend_id);
            if let Some(s) = sem {
                s.acquire();
            }
            let result = execute_trial(harness, key);
            if let Some(s) = sem {
                s.release();
            }
            if result.failure.is_some() {
                *failed.lock().unwrap() += 1;
            }
            let line = serde_json::to_string(&result).expect("result serializes");
            let mut w = writer.lock().unwrap();
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                *sink_err.lock().unwrap() = Some(e);
            }
        });
    });

    if let Some(e) = sink_err.lock().unwrap().take() {
        return Err(RunnerError::SinkError { path: sink_path.to_path_buf(), source: e });
    }

    let failed = *failed.lock().unwrap();
    Ok(RunSummary { done: todo.len() - failed, skipped, failed })
}

// ---------------------------------------------------------------------------
// Config-file loading (for the CLI)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub root: PathBuf,
    pub kind: corpus::CorpusKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendModeConfig {
    ScriptedMock(crate::backends::MockScript),
    RemoteChat(crate::backends::RemoteConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: String,
    pub max_context: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_cap")]
    pub concurrency_cap: usize,
    pub mode: BackendModeConfig,
}

fn default_cap() -> usize {
    8
}

fn default_dimension() -> usize {
    256
}

fn default_reserve() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpora: BTreeMap<String, CorpusConfig>,
    pub cases: Vec<PathBuf>,
    pub backends: Vec<BackendConfig>,
    pub judge_backend: String,
    pub grid: ExperimentGrid,
    #[serde(default = "ChunkingParams::default_paper")]
    pub chunking: ChunkingParams,
    #[serde(default = "default_dimension")]
    pub embedding_dimension: usize,
    #[serde(default = "default_reserve")]
    pub answer_reserve: usize,
}

/// Build a harness from a config file's contents, loading corpora and cases
/// from disk. Paths are resolved relative to `base_dir`.
pub fn load_harness(config: &RunConfig, base_dir: &Path) -> Result<Harness, String> {
    let mut corpora = BTreeMap::new();
    for (id, c) in &config.corpora {
        let root = if c.root.is_absolute() { c.root.clone() } else { base_dir.join(&c.root) };
        let corpus = corpus::load_corpus(&root, id, c.kind).map_err(|e| e.to_string())?;
        corpora.insert(id.clone(), corpus);
    }
    let mut cases = BTreeMap::new();
    for p in &config.cases {
        let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        let case = crate::cases::load_case(&path).map_err(|e| e.to_string())?;
        cases.insert(case.id.clone(), case);
    }
    let cases: CaseRegistry = Arc::new(cases);
    let mut backends = BTreeMap::new();
    for b in &config.backends {
        let backend = match &b.mode {
            BackendModeConfig::ScriptedMock(script) => {
                script.validate().map_err(|e| e.to_string())?;
                ModelBackend {
                    id: b.id.clone(),
                    max_context: b.max_context,
                    temperature: b.temperature,
                    concurrency_cap: b.concurrency_cap,
                    kind: crate::backends::BackendKind::ScriptedMock {
                        script: script.clone(),
                        cases: Arc::clone(&cases),
                    },
                    counter: TokenCounter::word_approx(),
                }
            }
            BackendModeConfig::RemoteChat(cfg) => ModelBackend {
                id: b.id.clone(),
                max_context: b.max_context,
                temperature: b.temperature,
                concurrency_cap: b.concurrency_cap,
                kind: crate::backends::BackendKind::RemoteChat(cfg.clone()),
                counter: TokenCounter::word_approx(),
            },
        };
        backends.insert(b.id.clone(), backend);
    }
    if !backends.contains_key(&config.judge_backend) {
        return Err(format!("judge backend {} not configured", config.judge_backend));
    }
    Ok(Harness {
        corpora,
        cases,
        backends,
        judge_backend: config.judge_backend.clone(),
        templates: TemplateRegistry::with_defaults(),
        template_id: "default".into(),
        counter: TokenCounter::word_approx(),
        chunking: config.chunking,
        embedding_dimension: config.embedding_dimension,
        answer_reserve: config.answer_reserve,
        rubric: JudgeRubric::default(),
        doubt_lexicon: SelfDoubtLexicon::default(),
    })
}
