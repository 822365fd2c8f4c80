//! Training artifacts: loss-masked SFT examples, DPO preference pairs and
//! per-trajectory rewards.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::curation::{
    collect_metadata, filter_format, filter_reasoning_path, selection_order, CorrectnessOracle,
    CurationConfig, ResponseMetadata,
};
use crate::eval::best_f1;
use crate::orchestrator::{extract_final_answer, ProtocolTokens, SpanError, SpanKind, StopReason, Trajectory};
use crate::text::{char_slice, count_phrases, Tokenizer, WhitespaceTokenizer};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExportError {
    #[error("trajectory {id} did not finish with an answer")]
    NotAnswered { id: String },
    #[error("trajectory {id} has inconsistent spans: {source}")]
    Integrity {
        id: String,
        #[source]
        source: SpanError,
    },
    #[error("trajectory {id} does not start with a prompt span")]
    MissingPrompt { id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub question_id: String,
    pub trajectory_id: String,
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub completion: String,
    /// Half-open char ranges into `completion` excluded from the loss.
    pub mask_spans: Vec<(usize, usize)>,
    pub meta: SftMeta,
}

impl SftExample {
    /// Text of `completion` outside every mask span.
    pub fn unmasked_text(&self) -> String {
        let mut out = String::new();
        let mut cursor = 0;
        let total = self.completion.chars().count();
        for &(s, e) in &self.mask_spans {
            out.push_str(char_slice(&self.completion, cursor, s).unwrap_or_default());
            cursor = e;
        }
        out.push_str(char_slice(&self.completion, cursor, total).unwrap_or_default());
        out
    }
}

pub fn to_sft_example(t: &Trajectory) -> Result<SftExample, ExportError> {
    if t.stop_reason != StopReason::Answered {
        return Err(ExportError::NotAnswered { id: t.id.clone() });
    }
    t.validate_spans()
        .map_err(|source| ExportError::Integrity { id: t.id.clone(), source })?;
    if t.spans.first().map(|s| s.kind) != Some(SpanKind::Prompt) {
        return Err(ExportError::MissingPrompt { id: t.id.clone() });
    }
    let prompt_len = t.prompt_len();
    let total = t.raw_text.chars().count();
    let prompt = char_slice(&t.raw_text, 0, prompt_len).unwrap_or_default().to_string();
    let completion = char_slice(&t.raw_text, prompt_len, total).unwrap_or_default().to_string();
    let mask_spans = t
        .spans
        .iter()
        .filter(|s| s.kind.is_injected())
        .map(|s| (s.start - prompt_len, s.end - prompt_len))
        .collect();
    Ok(SftExample {
        prompt,
        completion,
        mask_spans,
        meta: SftMeta {
            question_id: t.query.record.id.clone(),
            trajectory_id: t.id.clone(),
            gold_answers: t.gold_answers().to_vec(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoMeta {
    pub chosen_id: String,
    pub rejected_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoPair {
    pub question_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: DpoMeta,
}

fn split_prompt(t: &Trajectory) -> (String, String) {
    let p = t.prompt_len();
    let total = t.raw_text.chars().count();
    (
        char_slice(&t.raw_text, 0, p).unwrap_or_default().to_string(),
        char_slice(&t.raw_text, p, total).unwrap_or_default().to_string(),
    )
}

fn passes_checks(t: &Trajectory, m: &ResponseMetadata, tokens: &ProtocolTokens, cfg: &CurationConfig) -> bool {
    filter_format(t, tokens, cfg).passed() && filter_reasoning_path(m, cfg).is_ok()
}

/// One pair per question that has a strong trajectory passing the format
/// and reasoning-path checks and a weak trajectory failing them. The strong
/// side is the first in selection order; the weak side is the first in
/// input order. Both sides use the strong trajectory's prompt.
pub fn build_dpo_pairs(
    strong: &[Trajectory],
    weak: &[Trajectory],
    tokens: &ProtocolTokens,
    cfg: &CurationConfig,
    oracle: &dyn CorrectnessOracle,
) -> Vec<DpoPair> {
    let mut strong_by_q: IndexMap<&str, Vec<&Trajectory>> = IndexMap::new();
    for t in strong {
        strong_by_q.entry(t.query.record.id.as_str()).or_default().push(t);
    }
    let mut weak_by_q: HashMap<&str, Vec<&Trajectory>> = HashMap::new();
    for t in weak {
        weak_by_q.entry(t.query.record.id.as_str()).or_default().push(t);
    }

    let mut pairs = Vec::new();
    for (qid, candidates) in strong_by_q {
        let Some(weak_pool) = weak_by_q.get(qid) else { continue };
        let metas: Vec<ResponseMetadata> = candidates
            .iter()
            .map(|t| collect_metadata(t, tokens, cfg, oracle))
            .collect();
        let passing: Vec<usize> = (0..candidates.len())
            .filter(|&i| passes_checks(candidates[i], &metas[i], tokens, cfg))
            .collect();
        let refs: Vec<&ResponseMetadata> = passing.iter().map(|&i| &metas[i]).collect();
        let Some(&best) = selection_order(&refs).first() else { continue };
        let chosen = candidates[passing[best]];
        let rejected = weak_pool.iter().find(|t| {
            let m = collect_metadata(t, tokens, cfg, oracle);
            !passes_checks(t, &m, tokens, cfg)
        });
        let Some(rejected) = rejected else { continue };
        let (prompt, chosen_text) = split_prompt(chosen);
        let (_, rejected_text) = split_prompt(rejected);
        if chosen_text == rejected_text {
            continue;
        }
        pairs.push(DpoPair {
            question_id: qid.to_string(),
            prompt,
            chosen: chosen_text,
            rejected: rejected_text,
            meta: DpoMeta { chosen_id: chosen.id.clone(), rejected_id: rejected.id.clone() },
        });
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFlag {
    SelfRetrievedContent,
    Gibberish,
    ExcessiveMarkers,
    MissingBoxOrOverlong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub marker_lexicon: Vec<String>,
    pub max_markers: usize,
    pub max_search_steps: usize,
    /// Limit on generated tokens between consecutive retrievals.
    pub max_segment_tokens: usize,
    pub penalty: f64,
    pub max_non_printable_ratio: f64,
    pub max_repeated_ngram_share: f64,
    pub ngram_size: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            marker_lexicon: vec!["alternatively".into(), "wait".into(), "hmm".into()],
            max_markers: 5,
            max_search_steps: 8,
            max_segment_tokens: 8_096,
            penalty: -2.0,
            max_non_printable_ratio: 0.02,
            max_repeated_ngram_share: 0.30,
            ngram_size: 4,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.penalty > 0.0 {
            return Err(("penalty".into(), "must not be positive".into()));
        }
        if self.ngram_size == 0 {
            return Err(("ngram_size".into(), "must be positive".into()));
        }
        for (name, v) in [
            ("max_non_printable_ratio", self.max_non_printable_ratio),
            ("max_repeated_ngram_share", self.max_repeated_ngram_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err((name.into(), format!("must be within [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub trajectory_id: String,
    pub answer_f1: f64,
    pub penalty: f64,
    pub flags: Vec<RewardFlag>,
    pub total: f64,
}

fn non_printable_ratio(text: &str) -> f64 {
    let total = text.chars().count();
    if total == 0 {
        return 0.0;
    }
    let bad = text
        .chars()
        .filter(|&c| (c.is_control() && !c.is_whitespace()) || c == '\u{FFFD}')
        .count();
    bad as f64 / total as f64
}

/// Fraction of word n-grams that repeat an earlier n-gram.
fn repeated_ngram_share(text: &str, n: usize) -> f64 {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() < n {
        return 0.0;
    }
    let grams = words.windows(n);
    let total = grams.len();
    let mut seen = std::collections::HashSet::with_capacity(total);
    let repeats = grams.filter(|g| !seen.insert(*g)).count();
    repeats as f64 / total as f64
}

pub fn is_gibberish(text: &str, cfg: &RewardConfig) -> bool {
    non_printable_ratio(text) > cfg.max_non_printable_ratio
        || repeated_ngram_share(text, cfg.ngram_size) > cfg.max_repeated_ngram_share
}

pub fn rl_reward(t: &Trajectory, tokens: &ProtocolTokens, cfg: &RewardConfig) -> RewardBreakdown {
    rl_reward_with(t, tokens, cfg, &WhitespaceTokenizer)
}

pub fn rl_reward_with(
    t: &Trajectory,
    tokens: &ProtocolTokens,
    cfg: &RewardConfig,
    tokenizer: &dyn Tokenizer,
) -> RewardBreakdown {
    let generated = t.generated_text();
    let answer = t
        .final_answer
        .clone()
        .or_else(|| extract_final_answer(&generated, &tokens.answer_marker));
    let answer_f1 = match (&answer, t.gold_answers().is_empty()) {
        (Some(a), false) => best_f1(a, t.gold_answers()).unwrap_or(0.0),
        _ => 0.0,
    };

    let mut flags = Vec::new();
    if t.generated_segments()
        .any(|s| tokens.result_markers().iter().any(|m| s.contains(m)))
    {
        flags.push(RewardFlag::SelfRetrievedContent);
    }
    if is_gibberish(&generated, cfg) {
        flags.push(RewardFlag::Gibberish);
    }
    let markers: usize = t
        .generated_segments()
        .map(|s| count_phrases(s, &cfg.marker_lexicon))
        .sum();
    if markers > cfg.max_markers {
        flags.push(RewardFlag::ExcessiveMarkers);
    }
    let overlong = t
        .inter_search_segments()
        .iter()
        .any(|s| tokenizer.count(s) > cfg.max_segment_tokens);
    if answer.is_none() || t.counters.search_calls > cfg.max_search_steps || overlong {
        flags.push(RewardFlag::MissingBoxOrOverlong);
    }

    let penalty = if flags.is_empty() { 0.0 } else { cfg.penalty };
    RewardBreakdown {
        trajectory_id: t.id.clone(),
        answer_f1,
        penalty,
        flags,
        total: answer_f1 + penalty,
    }
}
