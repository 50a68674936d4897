//! Model backends: a uniform completion/embedding contract with a live
//! HTTP client (chat-completions dialect) and a deterministic scripted mock.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cases::NeedleCase;
use crate::corpus::TokenCounter;
use crate::text;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("context overflow: request needs {needed} tokens but backend {backend} allows {max}")]
    ContextOverflow { backend: String, needed: usize, max: usize },
    #[error("provider unavailable after {attempts} attempts: {last_error}")]
    ProviderUnavailable { attempts: u32, last_error: String },
    #[error("provider protocol error: {0}")]
    ProviderProtocolError(String),
    #[error("backend config error: {0}")]
    ConfigError(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub max_output_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub latency_ms: u64,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMatch {
    Contains(String),
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockBehavior {
    /// Answer with the key elements of the named needles (all needles when
    /// empty) that actually appear in the request text.
    EchoElements { needle_ids: Vec<String> },
    /// Echo present elements except the listed ones.
    Omit { elements: Vec<String> },
    /// Echo present elements plus fabricated extras.
    Fabricate { extras: Vec<String> },
    /// Echo present elements behind a doubting preamble.
    SelfDoubt { prefix: String },
    Verbatim { text: String },
    /// Act as a deterministic judge: read the tagged reference/answer from
    /// the request and reply with a rubric level.
    RubricJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub matcher: MockMatch,
    pub behavior: MockBehavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn validate(&self) -> Result<(), BackendError> {
        match self.rules.last() {
            Some(rule) if rule.matcher == MockMatch::Any => Ok(()),
            _ => Err(BackendError::ConfigError("mock script must end with an `any` fallback rule".into())),
        }
    }

    pub fn always(behavior: MockBehavior) -> Self {
        MockScript { rules: vec![MockRule { matcher: MockMatch::Any, behavior }] }
    }
}

/// Case registry the mock uses to resolve elements; keyed by case id, looked
/// up by matching the case question inside the request text.
pub type CaseRegistry = Arc<BTreeMap<String, NeedleCase>>;

#[derive(Debug, Clone)]
pub enum BackendKind {
    ScriptedMock { script: MockScript, cases: CaseRegistry },
    RemoteChat(RemoteConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key; empty means no auth header.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

#[derive(Debug, Clone)]
pub struct ModelBackend {
    pub id: String,
    pub max_context: usize,
    pub temperature: f64,
    pub concurrency_cap: usize,
    pub kind: BackendKind,
    pub counter: TokenCounter,
}

impl ModelBackend {
    pub fn mock(id: &str, max_context: usize, script: MockScript, cases: CaseRegistry) -> Self {
        script.validate().expect("invalid mock script");
        ModelBackend {
            id: id.to_string(),
            max_context,
            temperature: 0.0,
            concurrency_cap: 8,
            kind: BackendKind::ScriptedMock { script, cases },
            counter: TokenCounter::word_approx(),
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let prompt_tokens = self.counter.count(&request.system_text) + self.counter.count(&request.user_text);
        let needed = prompt_tokens + request.max_output_tokens;
        if needed > self.max_context {
            return Err(BackendError::ContextOverflow {
                backend: self.id.clone(),
                needed,
                max: self.max_context,
            });
        }
        match &self.kind {
            BackendKind::ScriptedMock { script, cases } => {
                let text = run_mock(script, cases, &request.user_text);
                let output_tokens = self.counter.count(&text);
                Ok(CompletionResponse {
                    text,
                    prompt_tokens: prompt_tokens.max(1),
                    output_tokens,
                    latency_ms: 0,
                    backend_id: self.id.clone(),
                })
            }
            BackendKind::RemoteChat(cfg) => remote_complete(cfg, self, request, prompt_tokens),
        }
    }
}

fn find_case<'a>(cases: &'a CaseRegistry, user_text: &str) -> Option<&'a NeedleCase> {
    cases.values().find(|c| user_text.contains(&c.question))
}

/// Elements of the selected needles that occur (normalized) in the request.
fn present_elements(case: &NeedleCase, needle_ids: &[String], user_text: &str) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for n in case.flat_needles() {
        if !needle_ids.is_empty() && !needle_ids.contains(&n.id) {
            continue;
        }
        for e in &n.key_elements {
            if seen.insert(e.clone()) && text::contains_normalized(user_text, e) {
                out.push(e.clone());
            }
        }
    }
    out
}

fn list_answer(elements: &[String]) -> String {
    if elements.is_empty() {
        String::new()
    } else {
        format!("The items found in the document are: {}.", elements.join(", "))
    }
}

fn extract_tag<'a>(text_in: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let s = text_in.find(&open)? + open.len();
    let e = text_in[s..].find(&close)? + s;
    Some(&text_in[s..e])
}

fn rubric_judge_score(cases: &CaseRegistry, user_text: &str) -> u8 {
    let reference = extract_tag(user_text, "reference").unwrap_or("");
    let answer = extract_tag(user_text, "answer").unwrap_or("");
    let case = find_case(cases, user_text);

    let norm_answer = text::normalize(answer);
    if norm_answer.is_empty() {
        return 1;
    }
    if let Some(case) = case {
        let elements = case.element_strings();
        let total = elements.len().max(1);
        let present = elements.iter().filter(|e| text::contains_normalized(answer, e)).count();
        let extra = case
            .fabrication_lexicon
            .iter()
            .any(|d| text::contains_normalized(answer, d));
        let frac = present as f64 / total as f64;
        return if frac >= 1.0 {
            if extra {
                5
            } else {
                10
            }
        } else if frac >= 0.6 {
            7
        } else if frac > 0.0 {
            5
        } else {
            3
        };
    }
    // no case known: fall back to word overlap with the reference
    let ref_norm = text::normalize(reference);
    let ref_words: std::collections::BTreeSet<&str> = ref_norm.split_whitespace().collect();
    if ref_words.is_empty() {
        return 1;
    }
    let ans_words: std::collections::BTreeSet<String> = norm_answer.split_whitespace().map(|s| s.to_string()).collect();
    let hit = ref_words.iter().filter(|w| ans_words.contains(**w)).count();
    let frac = hit as f64 / ref_words.len() as f64;
    if frac >= 0.95 {
        10
    } else if frac >= 0.6 {
        7
    } else if frac >= 0.3 {
        5
    } else if frac > 0.0 {
        3
    } else {
        1
    }
}

fn run_mock(script: &MockScript, cases: &CaseRegistry, user_text: &str) -> String {
    let rule = script
        .rules
        .iter()
        .find(|r| match &r.matcher {
            MockMatch::Contains(s) => user_text.contains(s.as_str()),
            MockMatch::Any => true,
        })
        .expect("validated script always has a fallback");
    match &rule.behavior {
        MockBehavior::Verbatim { text } => text.clone(),
        MockBehavior::EchoElements { needle_ids } => {
            let Some(case) = find_case(cases, user_text) else { return String::new() };
            list_answer(&present_elements(case, needle_ids, user_text))
        }
        MockBehavior::Omit { elements } => {
            let Some(case) = find_case(cases, user_text) else { return String::new() };
            let kept: Vec<String> = present_elements(case, &[], user_text)
                .into_iter()
                .filter(|e| !elements.contains(e))
                .collect();
            list_answer(&kept)
        }
        MockBehavior::Fabricate { extras } => {
            let Some(case) = find_case(cases, user_text) else { return String::new() };
            let mut all = present_elements(case, &[], user_text);
            all.extend(extras.iter().cloned());
            list_answer(&all)
        }
        MockBehavior::SelfDoubt { prefix } => {
            let Some(case) = find_case(cases, user_text) else { return prefix.clone() };
            let body = list_answer(&present_elements(case, &[], user_text));
            format!("{prefix} {body}").trim_end().to_string()
        }
        MockBehavior::RubricJudge => rubric_judge_score(cases, user_text).to_string(),
    }
}

// ---------------------------------------------------------------------------
// Remote chat-completions dialect
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize, Default)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

fn api_key(cfg: &RemoteConfig) -> Option<String> {
    if cfg.api_key_env.is_empty() {
        None
    } else {
        std::env::var(&cfg.api_key_env).ok()
    }
}

fn http_client(cfg: &RemoteConfig) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs.unwrap_or(120)))
        .build()
        .map_err(|e| BackendError::ConfigError(e.to_string()))
}

/// POST with bounded retries. Retries on transport errors, 429, and 5xx;
/// other failures surface immediately as protocol errors.
fn post_with_retries(
    cfg: &RemoteConfig,
    url: &str,
    body: &serde_json::Value,
) -> Result<serde_json::Value, BackendError> {
    let client = http_client(cfg)?;
    let attempts = cfg.attempts.max(1);
    let mut last_error = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms << (attempt - 1)));
        }
        let mut req = client.post(url).json(body);
        if let Some(key) = api_key(cfg) {
            req = req.bearer_auth(key);
        }
        match req.send() {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    return resp
                        .json::<serde_json::Value>()
                        .map_err(|e| BackendError::ProviderProtocolError(format!("bad json payload: {e}")));
                }
                if status.as_u16() == 429 || status.is_server_error() {
                    last_error = format!("http {status}");
                    continue;
                }
                return Err(BackendError::ProviderProtocolError(format!("http {status}")));
            }
            Err(e) => {
                last_error = e.to_string();
            }
        }
    }
    Err(BackendError::ProviderUnavailable { attempts, last_error })
}

fn remote_complete(
    cfg: &RemoteConfig,
    backend: &ModelBackend,
    request: &CompletionRequest,
    prompt_tokens_local: usize,
) -> Result<CompletionResponse, BackendError> {
    let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
    let body = serde_json::to_value(ChatRequest {
        model: &cfg.model,
        messages: vec![
            ChatMessage { role: "system", content: &request.system_text },
            ChatMessage { role: "user", content: &request.user_text },
        ],
        temperature: backend.temperature,
        max_tokens: request.max_output_tokens,
    })
    .expect("request serializes");
    let started = Instant::now();
    let value = post_with_retries(cfg, &url, &body)?;
    let latency_ms = started.elapsed().as_millis() as u64;
    let parsed: ChatResponse = serde_json::from_value(value)
        .map_err(|e| BackendError::ProviderProtocolError(format!("unexpected response shape: {e}")))?;
    let text = parsed
        .choices
        .first()
        .and_then(|c| c.message.content.clone())
        .ok_or_else(|| BackendError::ProviderProtocolError("response has no choices".into()))?;
    let text = text.trim_end().to_string();
    let usage = parsed.usage.unwrap_or_default();
    Ok(CompletionResponse {
        output_tokens: if usage.completion_tokens > 0 { usage.completion_tokens } else { backend.counter.count(&text) },
        prompt_tokens: if usage.prompt_tokens > 0 { usage.prompt_tokens } else { prompt_tokens_local.max(1) },
        text,
        latency_ms,
        backend_id: backend.id.clone(),
    })
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

/// Batched remote embeddings; vectors are L2-normalized locally regardless
/// of provider normalization.
pub fn embed_remote(cfg: &RemoteConfig, texts: &[&str]) -> Result<Vec<Vec<f64>>, BackendError> {
    for t in texts {
        if t.trim().is_empty() {
            return Err(BackendError::ConfigError("cannot embed empty text".into()));
        }
    }
    let url = format!("{}/embeddings", cfg.base_url.trim_end_matches('/'));
    let body = serde_json::json!({ "model": cfg.model, "input": texts });
    let value = post_with_retries(cfg, &url, &body)?;
    let parsed: EmbeddingResponse = serde_json::from_value(value)
        .map_err(|e| BackendError::ProviderProtocolError(format!("unexpected response shape: {e}")))?;
    if parsed.data.len() != texts.len() {
        return Err(BackendError::ProviderProtocolError(format!(
            "expected {} embeddings, got {}",
            texts.len(),
            parsed.data.len()
        )));
    }
    Ok(parsed
        .data
        .into_iter()
        .map(|d| {
            let mag = d.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if mag == 0.0 {
                d.embedding
            } else {
                d.embedding.into_iter().map(|x| x / mag).collect()
            }
        })
        .collect())
}
