//! Deterministic in-process backends for tests and offline runs.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, Utc};
use serde::Deserialize;

use super::chat::{ChatRequest, ChatResponse, FinishReason, Usage};
use super::search::{RawSearchHit, SearchProvider};
use super::{GatewayError, LlmClient};
use crate::text::normalize_phrase;

/// Returns the last user message verbatim.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoLlm;

impl LlmClient for EchoLlm {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let text = request.last_user_text().unwrap_or_default();
        Ok(shape_response(request, text.to_string()))
    }
}

type ScriptFn = dyn Fn(&ChatRequest, usize) -> Result<String, GatewayError> + Send + Sync;

enum Script {
    Sequence(Vec<String>),
    Func(Box<ScriptFn>),
}

/// A scripted chat backend.
///
/// Completions come either from a fixed sequence (the last entry repeats
/// once the sequence is exhausted) or from a closure over the request and
/// the zero-based call number. Stop sequences and `max_tokens` are applied
/// the way a real server would: output is cut at the first stop sequence
/// (which is removed) or after `max_tokens` whitespace tokens.
pub struct ScriptedLlm {
    script: Script,
    calls: AtomicUsize,
    fail_on: BTreeSet<usize>,
}

impl std::fmt::Debug for ScriptedLlm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedLlm")
            .field("calls", &self.calls.load(Ordering::SeqCst))
            .field("fail_on", &self.fail_on)
            .finish_non_exhaustive()
    }
}

impl ScriptedLlm {
    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_script(Script::Sequence(responses.into_iter().map(Into::into).collect()))
    }

    pub fn repeat(text: impl Into<String>) -> Self {
        Self::sequence([text.into()])
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest, usize) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        Self::with_script(Script::Func(Box::new(f)))
    }

    fn with_script(script: Script) -> Self {
        Self { script, calls: AtomicUsize::new(0), fail_on: BTreeSet::new() }
    }

    /// Makes the given 1-based call numbers fail with a backend error.
    pub fn failing_on(mut self, calls: impl IntoIterator<Item = usize>) -> Self {
        self.fail_on.extend(calls);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for ScriptedLlm {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on.contains(&(call + 1)) {
            return Err(GatewayError::Scripted(format!("injected failure on call {}", call + 1)));
        }
        let text = match &self.script {
            Script::Sequence(seq) => seq
                .get(call)
                .or_else(|| seq.last())
                .cloned()
                .unwrap_or_default(),
            Script::Func(f) => f(request, call)?,
        };
        Ok(shape_response(request, text))
    }
}

/// Applies stop sequences and the token limit to a raw completion.
pub(crate) fn shape_response(request: &ChatRequest, mut text: String) -> ChatResponse {
    let mut finish_reason = FinishReason::End;
    let first_stop = request
        .stop_sequences
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    if let Some(cut) = first_stop {
        text.truncate(cut);
        finish_reason = FinishReason::StopSequence;
    }
    if let Some(cut) = token_start(&text, request.max_tokens as usize) {
        text.truncate(cut);
        finish_reason = FinishReason::Length;
    }
    let prompt_tokens = request
        .messages
        .iter()
        .map(|m| m.content.split_whitespace().count() as u64)
        .sum();
    let completion_tokens = text.split_whitespace().count() as u64;
    ChatResponse { text, finish_reason, usage: Usage { prompt_tokens, completion_tokens } }
}

fn token_start(text: &str, index: usize) -> Option<usize> {
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            if seen == index {
                return Some(i);
            }
            seen += 1;
            in_token = true;
        }
    }
    None
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureLine {
    query: String,
    results: Vec<FixtureHit>,
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureHit {
    url: String,
    title: String,
    html_or_text: String,
}

/// Serves search results from a JSONL fixture of
/// `{query, results: [{url, title, html_or_text}]}` lines.
#[derive(Debug, Default)]
pub struct FixtureSearchProvider {
    entries: HashMap<String, Vec<RawSearchHit>>,
    fetches: AtomicUsize,
    name: Option<String>,
}

impl FixtureSearchProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<I, S>(&mut self, query: &str, hits: I)
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: Into<String>,
    {
        let hits = hits
            .into_iter()
            .map(|(url, title, html_or_text)| RawSearchHit {
                url: url.into(),
                title: title.into(),
                html_or_text: html_or_text.into(),
                fetched_at: fixture_time(),
            })
            .collect();
        self.entries.insert(normalize_phrase(query), hits);
    }

    /// Reports `name` as the provider name, which is part of the cache key.
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, GatewayError> {
        let content = fs::read_to_string(path)?;
        Self::from_jsonl_str(&content)
            .map_err(|e| GatewayError::Decode(format!("{}: {e}", path.display())))
    }

    pub fn from_jsonl_str(content: &str) -> Result<Self, GatewayError> {
        let mut provider = Self::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine = serde_json::from_str(line)
                .map_err(|e| GatewayError::Decode(format!("line {}: {e}", idx + 1)))?;
            provider.insert(
                &parsed.query,
                parsed.results.into_iter().map(|h| (h.url, h.title, h.html_or_text)),
            );
        }
        Ok(provider)
    }

    pub fn fetches(&self) -> usize {
        self.fetches.load(Ordering::SeqCst)
    }
}

fn fixture_time() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

impl SearchProvider for FixtureSearchProvider {
    fn name(&self) -> &str {
        self.name.as_deref().unwrap_or("fixture")
    }

    fn fetch(&self, query: &str, top_k: usize) -> Result<Vec<RawSearchHit>, GatewayError> {
        self.fetches.fetch_add(1, Ordering::SeqCst);
        Ok(self
            .entries
            .get(&normalize_phrase(query))
            .map(|hits| hits.iter().take(top_k).cloned().collect())
            .unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateways::chat::{ChatMessage, GenerationParams};

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user(text)], &GenerationParams::default())
    }

    #[test]
    fn echo_returns_input() {
        assert_eq!(EchoLlm.chat_complete(&req("hi")).unwrap().text, "hi");
    }

    #[test]
    fn sequence_repeats_last() {
        let llm = ScriptedLlm::sequence(["a", "b"]);
        let out: Vec<_> = (0..3).map(|_| llm.chat_complete(&req("x")).unwrap().text).collect();
        assert_eq!(out, ["a", "b", "b"]);
        assert_eq!(llm.calls(), 3);
    }

    #[test]
    fn stop_sequence_cuts_and_is_reported() {
        let llm = ScriptedLlm::repeat("think <q>paris<end> more");
        let resp = llm.chat_complete(&req("x").with_stop("<end>")).unwrap();
        assert_eq!(resp.text, "think <q>paris");
        assert_eq!(resp.finish_reason, FinishReason::StopSequence);
    }

    #[test]
    fn max_tokens_truncates() {
        let llm = ScriptedLlm::repeat("one two  three four");
        let resp = llm.chat_complete(&req("x").with_max_tokens(2)).unwrap();
        assert_eq!(resp.text, "one two  ");
        assert_eq!(resp.finish_reason, FinishReason::Length);
    }

    #[test]
    fn injected_failures() {
        let llm = ScriptedLlm::repeat("ok").failing_on([2]);
        assert!(llm.chat_complete(&req("x")).is_ok());
        assert!(matches!(llm.chat_complete(&req("x")), Err(GatewayError::Scripted(_))));
        assert!(llm.chat_complete(&req("x")).is_ok());
    }
}
