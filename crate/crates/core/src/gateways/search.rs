use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::html::{extract_text, DEFAULT_DOC_CHAR_BUDGET};
use super::replay::{ContentStore, KeyLocks};
use super::{GatewayError, SearchClient};
use crate::text::normalize_phrase;

/// A retrieved web document after markup stripping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    /// 1-based position in the result list.
    pub rank: u32,
    pub url: String,
    pub title: String,
    pub extracted_text: String,
    pub fetched_at: DateTime<Utc>,
}

/// A result as returned by a provider, before text extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSearchHit {
    pub url: String,
    pub title: String,
    pub html_or_text: String,
    pub fetched_at: DateTime<Utc>,
}

/// A search vendor. Providers only fetch; ranking, extraction and caching
/// are handled by [`SearchGateway`].
pub trait SearchProvider: Send + Sync {
    fn name(&self) -> &str;
    fn fetch(&self, query: &str, top_k: usize) -> Result<Vec<RawSearchHit>, GatewayError>;
}

/// Stands in for a provider in replay runs: carries the recorded provider's
/// name so cache keys line up, and refuses to fetch.
#[derive(Debug, Clone)]
pub struct OfflineProvider {
    name: String,
}

impl OfflineProvider {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }
}

impl SearchProvider for OfflineProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn fetch(&self, query: &str, _top_k: usize) -> Result<Vec<RawSearchHit>, GatewayError> {
        Err(GatewayError::InvalidRequest(format!("offline provider cannot fetch {query:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CachePolicy {
    /// Every call goes to the provider.
    Disabled,
    /// In-memory cache only.
    Memory,
    /// Read through a directory cache, fetching and storing on a miss.
    ReadWrite(PathBuf),
    /// Serve only from a directory cache; misses are errors.
    ReplayOnly(PathBuf),
}

#[derive(Debug, Serialize, Deserialize)]
struct CachedSearch {
    provider: String,
    query: String,
    top_k: usize,
    results: Vec<SearchResult>,
}

/// Search client combining a provider with text extraction and a cache keyed
/// by (normalized query, top_k, provider). At most one fetch per key is in
/// flight at a time; concurrent callers for the same key wait for it.
pub struct SearchGateway<P> {
    provider: P,
    policy: CachePolicy,
    doc_char_budget: usize,
    memory: Mutex<HashMap<String, Vec<SearchResult>>>,
    locks: KeyLocks,
}

impl<P: SearchProvider> SearchGateway<P> {
    pub fn new(provider: P, policy: CachePolicy) -> Self {
        Self {
            provider,
            policy,
            doc_char_budget: DEFAULT_DOC_CHAR_BUDGET,
            memory: Mutex::new(HashMap::new()),
            locks: KeyLocks::default(),
        }
    }

    pub fn with_doc_char_budget(mut self, budget: usize) -> Self {
        self.doc_char_budget = budget;
        self
    }

    pub fn provider(&self) -> &P {
        &self.provider
    }

    fn store(&self) -> Option<ContentStore> {
        match &self.policy {
            CachePolicy::ReadWrite(dir) | CachePolicy::ReplayOnly(dir) => Some(ContentStore::new(dir)),
            CachePolicy::Disabled | CachePolicy::Memory => None,
        }
    }

    fn fetch_and_extract(&self, query: &str, top_k: usize) -> Result<Vec<SearchResult>, GatewayError> {
        let hits = self.provider.fetch(query, top_k)?;
        Ok(hits
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, hit)| SearchResult {
                rank: i as u32 + 1,
                url: hit.url,
                title: hit.title,
                extracted_text: extract_text(&hit.html_or_text, self.doc_char_budget),
                fetched_at: hit.fetched_at,
            })
            .collect())
    }
}

/// Cache key for a search: hex SHA-256 of provider, normalized query and top_k.
pub fn search_cache_key(provider: &str, query: &str, top_k: usize) -> String {
    let material = format!("{provider}\n{}\n{top_k}", normalize_phrase(query));
    hex::encode(Sha256::digest(material.as_bytes()))
}

impl<P: SearchProvider> SearchClient for SearchGateway<P> {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<SearchResult>, GatewayError> {
        if query.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("search query is empty".into()));
        }
        if top_k == 0 {
            return Err(GatewayError::InvalidRequest("top_k must be positive".into()));
        }
        if self.policy == CachePolicy::Disabled {
            return self.fetch_and_extract(query, top_k);
        }
        let key = search_cache_key(self.provider.name(), query, top_k);
        let lock = self.locks.get(&key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

        if let Some(hit) = self.memory.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let store = self.store();
        if let Some(store) = &store {
            if let Some(cached) = store.get::<CachedSearch>(&key)? {
                self.memory
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(key, cached.results.clone());
                return Ok(cached.results);
            }
        }
        if let CachePolicy::ReplayOnly(_) = self.policy {
            return Err(GatewayError::CacheMiss { fingerprint: key });
        }
        let results = self.fetch_and_extract(query, top_k)?;
        if let Some(store) = &store {
            store.put(
                &key,
                &CachedSearch {
                    provider: self.provider.name().to_string(),
                    query: normalize_phrase(query),
                    top_k,
                    results: results.clone(),
                },
            )?;
        }
        self.memory
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, results.clone());
        Ok(results)
    }
}
