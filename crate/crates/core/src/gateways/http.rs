//! Live HTTP backends.
//!
//! The chat wire format is a single JSON-over-HTTP shape:
//!
//! ```text
//! POST <endpoint>
//! {"model", "messages": [{"role", "content"}], "temperature", "top_p",
//!  "top_k", "max_tokens", "stop": [..], "seed"}
//! ```
//!
//! answered by an OpenAI-style `{"choices": [{"message": {"content"},
//! "finish_reason", "stop_reason"}], "usage": {..}}` body. Search providers
//! are queried with `GET <endpoint>?q=<query>&num=<k>` and may answer with a
//! `results`, `items` or `organic` array.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use chrono::Utc;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::chat::{ChatRequest, ChatResponse, FinishReason, Usage};
use super::search::{RawSearchHit, SearchProvider};
use super::{GatewayError, LlmClient};

/// Exponential backoff: attempt `n` (0-based retry index) waits
/// `initial_backoff * 2^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_backoff: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.saturating_mul(1u32 << retry.min(16))
    }
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

fn build_agent(timeout: Duration) -> ureq::Agent {
    let config = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build();
    ureq::Agent::new_with_config(config)
}

fn classify(result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Attempt {
    match result {
        Ok(mut resp) => {
            let status = resp.status().as_u16();
            let body = match resp.body_mut().read_to_string() {
                Ok(body) => body,
                Err(e) => return Attempt::Retry(format!("reading body: {e}")),
            };
            match status {
                200..=299 => Attempt::Done(body),
                429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
                _ => Attempt::Fatal(format!("HTTP {status}: {}", truncate(&body, 200))),
            }
        }
        Err(e) => Attempt::Retry(e.to_string()),
    }
}

fn truncate(s: &str, n: usize) -> &str {
    s.char_indices().nth(n).map_or(s, |(i, _)| &s[..i])
}

/// Runs `attempt` under `policy`, returning the body and the number of
/// retries it took.
fn run_with_retries(
    policy: &RetryPolicy,
    what: &str,
    mut attempt: impl FnMut() -> Attempt,
) -> Result<(String, u32), GatewayError> {
    let mut retries = 0;
    loop {
        match attempt() {
            Attempt::Done(body) => return Ok((body, retries)),
            Attempt::Fatal(message) => {
                return Err(GatewayError::Transport { message, attempts: retries + 1 })
            }
            Attempt::Retry(message) if retries < policy.max_retries => {
                let wait = policy.backoff(retries);
                warn!(%what, %message, retry = retries + 1, ?wait, "retrying request");
                thread::sleep(wait);
                retries += 1;
            }
            Attempt::Retry(message) => {
                return Err(GatewayError::Transport { message, attempts: retries + 1 })
            }
        }
    }
}

/// Chat-completion client for an HTTP endpoint.
#[derive(Debug)]
pub struct HttpLlm {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    retries: AtomicU64,
}

impl HttpLlm {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            model: String::new(),
            agent: build_agent(Duration::from_secs(600)),
            retry: RetryPolicy::default(),
            retries: AtomicU64::new(0),
        }
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = build_agent(timeout);
        self
    }

    /// Model name sent when a request does not name one.
    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// Total retries performed by this client so far.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let mut body = json!({
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "top_k": request.top_k,
            "max_tokens": request.max_tokens,
            "stop": request.stop_sequences,
        });
        let model = if request.model.is_empty() { &self.model } else { &request.model };
        if !model.is_empty() {
            body["model"] = json!(model);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

/// Parses an OpenAI-style completion body.
pub(crate) fn parse_chat_body(body: &str, stops: &[String]) -> Result<ChatResponse, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Decode(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Decode("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::Decode("choice has no content".into()))?
        .to_string();
    // vLLM-style servers report the matched stop string in `stop_reason`.
    let matched_stop = choice
        .get("stop_reason")
        .and_then(Value::as_str)
        .is_some_and(|s| stops.iter().any(|stop| stop == s));
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        _ if matched_stop => FinishReason::StopSequence,
        _ => FinishReason::End,
    };
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    };
    Ok(ChatResponse { text, finish_reason, usage })
}

impl LlmClient for HttpLlm {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let body = self.body(request);
        let (text, retries) = run_with_retries(&self.retry, &self.endpoint, || {
            let mut req = self.agent.post(&self.endpoint);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            classify(req.send_json(&body))
        })?;
        self.retries.fetch_add(u64::from(retries), Ordering::SeqCst);
        debug!(endpoint = %self.endpoint, retries, "chat completion succeeded");
        parse_chat_body(&text, &request.stop_sequences)
    }
}

/// Generic JSON search API provider.
#[derive(Debug)]
pub struct HttpSearchProvider {
    name: String,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
    fetch_pages: bool,
}

impl HttpSearchProvider {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            api_key,
            agent: build_agent(Duration::from_secs(60)),
            retry: RetryPolicy::default(),
            fetch_pages: false,
        }
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Download each result page and use its HTML instead of the snippet.
    pub fn fetching_pages(mut self, fetch: bool) -> Self {
        self.fetch_pages = fetch;
        self
    }

    fn fetch_page(&self, url: &str) -> Option<String> {
        run_with_retries(&self.retry, url, || classify(self.agent.get(url).call()))
            .map(|(body, _)| body)
            .map_err(|e| warn!(%url, error = %e, "page fetch failed; keeping snippet"))
            .ok()
    }
}

fn str_field<'a>(v: &'a Value, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| v.get(*n).and_then(Value::as_str))
}

pub(crate) fn parse_search_body(body: &str) -> Result<Vec<(String, String, String)>, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Decode(e.to_string()))?;
    let items = ["results", "items", "organic"]
        .iter()
        .find_map(|k| v.get(*k).and_then(Value::as_array));
    let Some(items) = items else {
        return Ok(Vec::new());
    };
    Ok(items
        .iter()
        .filter_map(|item| {
            let url = str_field(item, &["url", "link"])?.to_string();
            let title = str_field(item, &["title"]).unwrap_or_default().to_string();
            let text = str_field(item, &["html_or_text", "html", "content", "text", "snippet"])
                .unwrap_or_default()
                .to_string();
            Some((url, title, text))
        })
        .collect())
}

impl SearchProvider for HttpSearchProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn fetch(&self, query: &str, top_k: usize) -> Result<Vec<RawSearchHit>, GatewayError> {
        let num = top_k.to_string();
        let (body, _) = run_with_retries(&self.retry, &self.endpoint, || {
            let mut req = self.agent.get(&self.endpoint).query("q", query).query("num", &num);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            classify(req.call())
        })?;
        let hits = parse_search_body(&body)?;
        Ok(hits
            .into_iter()
            .take(top_k)
            .map(|(url, title, snippet)| {
                let html_or_text = if self.fetch_pages {
                    self.fetch_page(&url).unwrap_or(snippet)
                } else {
                    snippet
                };
                RawSearchHit { url, title, html_or_text, fetched_at: Utc::now() }
            })
            .collect())
    }
}
