//! Answer scoring, LLM-as-judge verdicts, stage attribution and output
//! statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::gateways::{ChatMessage, ChatRequest, GenerationParams, LlmClient};
use crate::orchestrator::Trajectory;
use crate::text::{count_phrases, Tokenizer, WhitespaceTokenizer};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("at least one gold answer is required")]
    EmptyGolds,
    #[error("cannot compute statistics over an empty set of trajectories")]
    EmptyInput,
}

/// Lowercases, drops ASCII punctuation and the articles a/an/the, and splits
/// on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token-level F1 between a prediction and one gold answer.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn best_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGolds);
    }
    Ok(golds.iter().map(|g| f1(pred, g.as_ref())).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    /// No parsable verdict after the re-ask, or the judge backend failed.
    Abstain,
}

impl Verdict {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Self::Correct => Some(true),
            Self::Incorrect => Some(false),
            Self::Abstain => None,
        }
    }
}

pub fn judge_request<S: AsRef<str>>(question: &str, pred: &str, golds: &[S]) -> ChatRequest {
    let golds: Vec<&str> = golds.iter().map(AsRef::as_ref).collect();
    let prompt = format!(
        "You are evaluating whether a predicted answer to a question is correct.\n\
Question: {question}\n\
Gold answers: {}\n\
Predicted answer: {pred}\n\n\
The prediction is correct if it expresses the same meaning as any gold answer, even when \
worded differently. Reply with exactly one word: Correct or Incorrect.",
        golds.join(" | ")
    );
    let params = GenerationParams { temperature: 0.0, top_p: 1.0, top_k: 1, max_tokens: 16 };
    ChatRequest::new(vec![ChatMessage::user(prompt)], &params)
}

/// Reads a verdict from a judge reply. "Incorrect" is checked first since it
/// contains "correct".
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let lower = reply.trim().to_lowercase();
    let first = lower.split(|c: char| !c.is_alphanumeric()).find(|w| !w.is_empty())?;
    match first {
        "incorrect" | "wrong" | "no" => Some(false),
        "correct" | "yes" => Some(true),
        _ => None,
    }
}

/// Asks the judge, re-asking once when the reply carries no verdict.
pub fn llm_judge<S: AsRef<str>>(question: &str, pred: &str, golds: &[S], judge: &dyn LlmClient) -> Verdict {
    let request = judge_request(question, pred, golds);
    for _ in 0..2 {
        match judge.chat_complete(&request) {
            Ok(reply) => match parse_verdict(&reply.text) {
                Some(true) => return Verdict::Correct,
                Some(false) => return Verdict::Incorrect,
                None => continue,
            },
            Err(e) => {
                tracing::warn!(error = %e, "judge call failed");
                return Verdict::Abstain;
            }
        }
    }
    Verdict::Abstain
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub planning: bool,
    pub search: bool,
    pub summarization: bool,
}

fn contains_tokens(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn any_gold_in<S: AsRef<str>>(text: &str, golds: &[S]) -> bool {
    let hay = normalize_answer(text);
    golds.iter().any(|g| contains_tokens(&hay, &normalize_answer(g.as_ref())))
}

/// Where a gold answer shows up: in the model's own reasoning, in raw
/// retrieved documents, or in injected summaries.
pub fn stage_attribution<S: AsRef<str>>(t: &Trajectory, golds: &[S]) -> StageFlags {
    let planning = t.generated_segments().any(|s| any_gold_in(s, golds));
    let events = || t.turns.iter().filter_map(|turn| turn.search.as_ref());
    let search = events()
        .flat_map(|e| e.results.iter())
        .any(|r| any_gold_in(&r.extracted_text, golds));
    let summarization = events().any(|e| any_gold_in(&e.summary, golds));
    StageFlags { planning, search, summarization }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputStats {
    pub mean_alternatively: f64,
    pub mean_searches: f64,
    pub mean_length: f64,
}

pub fn output_stats(ts: &[Trajectory]) -> Result<OutputStats, EvalError> {
    output_stats_with(ts, &WhitespaceTokenizer)
}

pub fn output_stats_with(ts: &[Trajectory], tokenizer: &dyn Tokenizer) -> Result<OutputStats, EvalError> {
    if ts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = ts.len() as f64;
    let (mut alt, mut searches, mut length) = (0usize, 0usize, 0usize);
    for t in ts {
        alt += t.generated_segments().map(|s| count_phrases(s, &["alternatively"])).sum::<usize>();
        searches += t.counters.search_calls;
        length += t.generated_token_count(tokenizer);
    }
    Ok(OutputStats {
        mean_alternatively: alt as f64 / n,
        mean_searches: searches as f64 / n,
        mean_length: length as f64 / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub trajectory_id: String,
    pub question_id: String,
    pub prediction: Option<String>,
    pub f1: f64,
    pub judge: Option<Verdict>,
    pub stages: StageFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRates {
    pub planning: f64,
    pub search: f64,
    pub summarization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub items: Vec<EvalItem>,
    pub mean_f1: f64,
    /// Over judged items that did not abstain.
    pub judge_accuracy: Option<f64>,
    pub judged: usize,
    pub abstentions: usize,
    pub stats: OutputStats,
    pub stage_rates: StageRates,
}

/// Which metrics an evaluation run computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSet {
    pub f1: bool,
    pub judge: bool,
    pub stages: bool,
}

impl Default for MetricSet {
    fn default() -> Self {
        Self { f1: true, judge: false, stages: true }
    }
}

pub fn evaluate(ts: &[Trajectory], judge: Option<&dyn LlmClient>, metrics: MetricSet) -> Result<EvalReport, EvalError> {
    let stats = output_stats(ts)?;
    let mut items = Vec::with_capacity(ts.len());
    for t in ts {
        let golds = t.gold_answers();
        let pred = t.final_answer.clone();
        let f1 = match (&pred, metrics.f1) {
            (Some(p), true) => best_f1(p, golds)?,
            _ => 0.0,
        };
        let judge = match (judge, metrics.judge) {
            (Some(j), true) => Some(match &pred {
                Some(p) => llm_judge(t.question(), p, golds, j),
                None => Verdict::Incorrect,
            }),
            _ => None,
        };
        let stages = if metrics.stages { stage_attribution(t, golds) } else { StageFlags::default() };
        items.push(EvalItem {
            trajectory_id: t.id.clone(),
            question_id: t.query.record.id.clone(),
            prediction: pred,
            f1,
            judge,
            stages,
        });
    }
    let n = items.len() as f64;
    let mean_f1 = items.iter().map(|i| i.f1).sum::<f64>() / n;
    let verdicts: Vec<bool> = items.iter().filter_map(|i| i.judge.and_then(Verdict::as_bool)).collect();
    let judged = items.iter().filter(|i| i.judge.is_some()).count();
    let abstentions = items.iter().filter(|i| i.judge == Some(Verdict::Abstain)).count();
    let judge_accuracy = (!verdicts.is_empty())
        .then(|| verdicts.iter().filter(|v| **v).count() as f64 / verdicts.len() as f64);
    let rate = |f: fn(&StageFlags) -> bool| items.iter().filter(|i| f(&i.stages)).count() as f64 / n;
    let stage_rates = StageRates {
        planning: rate(|s| s.planning),
        search: rate(|s| s.search),
        summarization: rate(|s| s.summarization),
    };
    Ok(EvalReport { items, mean_f1, judge_accuracy, judged, abstentions, stats, stage_rates })
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>10}\n", "metric", "value"));
        out.push_str(&format!("{:<24} {:>10}\n", "items", self.items.len()));
        out.push_str(&format!("{:<24} {:>10.4}\n", "mean_f1", self.mean_f1));
        match self.judge_accuracy {
            Some(a) => out.push_str(&format!("{:<24} {:>10.4}\n", "judge_accuracy", a)),
            None => out.push_str(&format!("{:<24} {:>10}\n", "judge_accuracy", "n/a")),
        }
        out.push_str(&format!("{:<24} {:>10}\n", "judge_abstentions", self.abstentions));
        out.push_str(&format!("{:<24} {:>10.4}\n", "mean_alternatively", self.stats.mean_alternatively));
        out.push_str(&format!("{:<24} {:>10.4}\n", "mean_searches", self.stats.mean_searches));
        out.push_str(&format!("{:<24} {:>10.4}\n", "mean_output_length", self.stats.mean_length));
        out.push_str(&format!("{:<24} {:>10.4}\n", "stage_planning", self.stage_rates.planning));
        out.push_str(&format!("{:<24} {:>10.4}\n", "stage_search", self.stage_rates.search));
        out.push_str(&format!("{:<24} {:>10.4}\n", "stage_summarization", self.stage_rates.summarization));
        out
    }
}
