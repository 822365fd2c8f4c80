//! Diversity-aware query sampling.
//!
//! Queries are grouped by domain and each domain gets an equal quota of
//! `ceil(n / m)` slots. Within a domain, candidates are visited in
//! descending interrogative-word count and accepted greedily in passes: an
//! item is taken only if its keywords are disjoint from every keyword
//! accepted earlier in the same pass. The keyword set starts empty on each
//! pass, so items skipped for overlap get another chance later. Domains
//! are emitted in first-appearance order and the result is truncated to `n`.

use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedQuery;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("target number of queries must be at least 1")]
    ZeroTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub target_total: usize,
    pub per_domain_quota: usize,
    pub domains: Vec<String>,
}

impl SamplePlan {
    pub fn new(dataset: &[AnnotatedQuery], n: usize) -> Result<Self, SamplerError> {
        if n == 0 {
            return Err(SamplerError::ZeroTarget);
        }
        let mut domains: Vec<String> = Vec::new();
        for q in dataset {
            if !domains.contains(&q.domain) {
                domains.push(q.domain.clone());
            }
        }
        let per_domain_quota = if domains.is_empty() { n } else { n.div_ceil(domains.len()) };
        Ok(Self { target_total: n, per_domain_quota, domains })
    }
}

/// One accepted item: its index in the input and the 1-based pass that took it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pick {
    pub index: usize,
    pub pass: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub pool_size: usize,
    /// Items accepted before the final truncation to `n`.
    pub accepted: usize,
    /// Items of this domain in the returned selection.
    pub selected: usize,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleReport {
    pub plan: SamplePlan,
    pub domains: Vec<DomainReport>,
    pub total_selected: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub selected: Vec<AnnotatedQuery>,
    /// Parallel to `selected`.
    pub picks: Vec<Pick>,
    pub report: SampleReport,
}

/// Selects up to `n` queries balancing domains and keyword diversity.
pub fn sample_diverse(dataset: &[AnnotatedQuery], n: usize) -> Result<Vec<AnnotatedQuery>, SamplerError> {
    sample_diverse_with_report(dataset, n).map(|o| o.selected)
}

pub fn sample_diverse_with_report(dataset: &[AnnotatedQuery], n: usize) -> Result<SampleOutcome, SamplerError> {
    let plan = SamplePlan::new(dataset, n)?;
    let mut by_domain: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, q) in dataset.iter().enumerate() {
        by_domain.entry(q.domain.as_str()).or_default().push(i);
    }
    let keywords: Vec<HashSet<&str>> = dataset
        .iter()
        .map(|q| q.keywords.iter().map(String::as_str).collect())
        .collect();

    let mut picks = Vec::new();
    let mut reports = Vec::new();
    for (domain, mut pool) in by_domain {
        // Stable: equal counts keep input order.
        pool.sort_by(|&a, &b| dataset[b].interrogative_count.cmp(&dataset[a].interrogative_count));
        let pool_size = pool.len();
        let (accepted, passes) = fill_domain(pool, &keywords, plan.per_domain_quota);
        reports.push(DomainReport {
            domain: domain.to_string(),
            pool_size,
            accepted: accepted.len(),
            selected: 0,
            passes,
        });
        picks.extend(accepted);
    }

    picks.truncate(n);
    for pick in &picks {
        let domain = &dataset[pick.index].domain;
        if let Some(r) = reports.iter_mut().find(|r| &r.domain == domain) {
            r.selected += 1;
        }
    }
    let selected: Vec<AnnotatedQuery> = picks.iter().map(|p| dataset[p.index].clone()).collect();
    let report = SampleReport { total_selected: selected.len(), plan, domains: reports };
    Ok(SampleOutcome { selected, picks, report })
}

/// Runs greedy passes over one domain's sorted pool until the quota is met
/// or the pool is empty. Returns the picks and the number of passes.
fn fill_domain(mut remaining: Vec<usize>, keywords: &[HashSet<&str>], quota: usize) -> (Vec<Pick>, usize) {
    let mut accepted = Vec::new();
    let mut passes = 0;
    while accepted.len() < quota && !remaining.is_empty() {
        passes += 1;
        let mut seen: HashSet<&str> = HashSet::new();
        let mut leftover = Vec::with_capacity(remaining.len());
        for idx in remaining {
            if accepted.len() >= quota || !keywords[idx].is_disjoint(&seen) {
                leftover.push(idx);
                continue;
            }
            seen.extend(keywords[idx].iter().copied());
            accepted.push(Pick { index: idx, pass: passes });
        }
        remaining = leftover;
    }
    (accepted, passes)
}
