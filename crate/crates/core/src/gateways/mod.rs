//! External-service clients.
//!
//! Every LLM role (reasoner, summarizer, annotator, judge) talks to an
//! [`LlmClient`]; web retrieval goes through a [`SearchClient`]. Each has a
//! live HTTP backend, a content-addressed record/replay layer, and scripted
//! mocks for tests and offline runs.

mod chat;
pub mod html;
pub mod http;
pub mod mock;
pub mod replay;
pub mod search;

pub use chat::{
    fingerprint, ChatMessage, ChatRequest, ChatResponse, FinishReason, GenerationParams, Role,
    Usage,
};
pub use html::{extract_text, DEFAULT_DOC_CHAR_BUDGET};
pub use http::{HttpLlm, HttpSearchProvider, RetryPolicy};
pub use mock::{EchoLlm, FixtureSearchProvider, ScriptedLlm};
pub use replay::{ReplayLlm, ReplayMode};
pub use search::{
    search_cache_key, CachePolicy, OfflineProvider, RawSearchHit, SearchGateway, SearchProvider,
    SearchResult,
};

use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("replay cache miss for request {fingerprint}")]
    CacheMiss { fingerprint: String },
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("mock backend failure: {0}")]
    Scripted(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// Stable short code for persisted error records.
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidRequest(_) => "invalid_request",
            Self::Transport { .. } => "transport",
            Self::CacheMiss { .. } => "cache_miss",
            Self::Decode(_) => "decode",
            Self::Scripted(_) => "scripted_failure",
            Self::Io(_) => "io",
        }
    }
}

/// A chat-completion backend. Implementations must be safe to share across
/// threads; trajectories for different queries run concurrently.
pub trait LlmClient: Send + Sync {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: LlmClient + ?Sized> LlmClient for Arc<T> {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat_complete(request)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat_complete(request)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn chat_complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat_complete(request)
    }
}

/// Web search returning rank-ordered, markup-free documents.
pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchResult>, GatewayError>;
}

impl<T: SearchClient + ?Sized> SearchClient for Arc<T> {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchResult>, GatewayError> {
        (**self).search(query, top_k)
    }
}

impl<T: SearchClient + ?Sized> SearchClient for &T {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchResult>, GatewayError> {
        (**self).search(query, top_k)
    }
}

impl<T: SearchClient + ?Sized> SearchClient for Box<T> {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchResult>, GatewayError> {
        (**self).search(query, top_k)
    }
}
