//! Response curation: metadata collection, then format, reasoning-path and
//! difficulty filters, then selection of the most search-efficient correct
//! trajectory per question.

use std::collections::HashSet;
use std::ops::RangeInclusive;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{best_f1, llm_judge, Verdict};
use crate::gateways::LlmClient;
use crate::orchestrator::protocol::search_tokens_well_formed;
use crate::orchestrator::{extract_final_answer, ProtocolTokens, StopReason, Trajectory};
use crate::text::{collapse_whitespace, count_phrases, Tokenizer, WhitespaceTokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub reflection_lexicon: Vec<String>,
    pub max_reflections: usize,
    /// Upper bound on whitespace tokens of model-generated text.
    pub max_reasoning_tokens: usize,
    /// A question is dropped when its accuracy reaches this value.
    pub accuracy_drop_threshold: f64,
    pub min_correct: usize,
    /// Groups smaller than this skip the accuracy-drop check, which says
    /// nothing about difficulty for a single attempt.
    pub min_attempts_for_difficulty: usize,
    /// Predictions at or above this F1 against any gold answer are correct.
    pub f1_threshold: f64,
    /// Generated text whose non-dominant script letters exceed this share of
    /// all letters is treated as mixed-language.
    pub script_minority_share: f64,
    /// Ask the judge model about predictions that fall below the F1
    /// threshold.
    pub use_judge: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            reflection_lexicon: vec!["alternatively".into(), "wait".into(), "hmm".into()],
            max_reflections: 5,
            max_reasoning_tokens: 8_096,
            accuracy_drop_threshold: 1.0,
            min_correct: 1,
            min_attempts_for_difficulty: 2,
            f1_threshold: 0.7,
            script_minority_share: 0.05,
            use_judge: false,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        for (name, v) in [
            ("accuracy_drop_threshold", self.accuracy_drop_threshold),
            ("f1_threshold", self.f1_threshold),
            ("script_minority_share", self.script_minority_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err((name.into(), format!("must be within [0, 1], got {v}")));
            }
        }
        if self.reflection_lexicon.iter().any(|p| p.trim().is_empty()) {
            return Err(("reflection_lexicon".into(), "entries must not be blank".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMetadata {
    pub search_steps: usize,
    /// Whitespace tokens of model-generated text.
    pub reasoning_length: usize,
    pub reflection_count: usize,
    pub language_consistent: bool,
    pub format_valid: bool,
    pub correct: bool,
    pub distinct_query_count: usize,
}

/// Decides whether a predicted answer is right.
pub trait CorrectnessOracle: Send + Sync {
    fn is_correct(&self, question: &str, prediction: &str, golds: &[String]) -> bool;
}

/// Correct when F1 against any gold answer reaches the threshold.
#[derive(Debug, Clone, Copy)]
pub struct F1Oracle {
    pub threshold: f64,
}

impl CorrectnessOracle for F1Oracle {
    fn is_correct(&self, _question: &str, prediction: &str, golds: &[String]) -> bool {
        best_f1(prediction, golds).is_ok_and(|f| f >= self.threshold)
    }
}

/// F1 first, then an LLM judge for predictions below the threshold.
pub struct F1OrJudge<'a> {
    pub threshold: f64,
    pub judge: &'a dyn LlmClient,
}

impl CorrectnessOracle for F1OrJudge<'_> {
    fn is_correct(&self, question: &str, prediction: &str, golds: &[String]) -> bool {
        F1Oracle { threshold: self.threshold }.is_correct(question, prediction, golds)
            || llm_judge(question, prediction, golds, self.judge) == Verdict::Correct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Script {
    Latin,
    Greek,
    Cyrillic,
    Hebrew,
    Arabic,
    Indic,
    Thai,
    Cjk,
    Other,
}

fn script_of(c: char) -> Option<Script> {
    if !c.is_alphabetic() {
        return None;
    }
    let cp = c as u32;
    Some(match cp {
        0x0041..=0x024F | 0x1E00..=0x1EFF => Script::Latin,
        0x0370..=0x03FF | 0x1F00..=0x1FFF => Script::Greek,
        0x0400..=0x052F => Script::Cyrillic,
        0x0590..=0x05FF => Script::Hebrew,
        0x0600..=0x06FF | 0x0750..=0x077F => Script::Arabic,
        0x0900..=0x0DFF => Script::Indic,
        0x0E00..=0x0E7F => Script::Thai,
        0x1100..=0x11FF
        | 0x3040..=0x30FF
        | 0x3130..=0x318F
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2FA1F => Script::Cjk,
        _ => Script::Other,
    })
}

/// Share of letters outside the most common script, in [0, 1].
pub fn script_minority_share(text: &str) -> f64 {
    let mut counts: IndexMap<Script, usize> = IndexMap::new();
    for script in text.chars().filter_map(script_of) {
        *counts.entry(script).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    (total - top) as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatFailure {
    MalformedSearchTokens,
    MixedLanguage,
    MissingBoxedAnswer,
    NotAnswered,
}

impl FormatFailure {
    pub fn code(self) -> &'static str {
        match self {
            Self::MalformedSearchTokens => "malformed_search_tokens",
            Self::MixedLanguage => "mixed_language",
            Self::MissingBoxedAnswer => "missing_boxed_answer",
            Self::NotAnswered => "not_answered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatCheck {
    pub failures: Vec<FormatFailure>,
    /// The boxed answer with whitespace collapsed.
    pub answer: Option<String>,
}

impl FormatCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn filter_format(t: &Trajectory, tokens: &ProtocolTokens, cfg: &CurationConfig) -> FormatCheck {
    let generated = t.generated_text();
    let mut failures = Vec::new();
    if !search_tokens_well_formed(&generated, &tokens.begin_search, &tokens.end_search) {
        failures.push(FormatFailure::MalformedSearchTokens);
    }
    if script_minority_share(&generated) > cfg.script_minority_share {
        failures.push(FormatFailure::MixedLanguage);
    }
    let answer = t
        .final_answer
        .clone()
        .or_else(|| extract_final_answer(&generated, &tokens.answer_marker))
        .map(|a| collapse_whitespace(&a))
        .filter(|a| !a.is_empty());
    if answer.is_none() {
        failures.push(FormatFailure::MissingBoxedAnswer);
    }
    if t.stop_reason != StopReason::Answered {
        failures.push(FormatFailure::NotAnswered);
    }
    FormatCheck { failures, answer }
}

pub fn collect_metadata(
    t: &Trajectory,
    tokens: &ProtocolTokens,
    cfg: &CurationConfig,
    oracle: &dyn CorrectnessOracle,
) -> ResponseMetadata {
    collect_metadata_with(t, tokens, cfg, oracle, &WhitespaceTokenizer)
}

pub fn collect_metadata_with(
    t: &Trajectory,
    tokens: &ProtocolTokens,
    cfg: &CurationConfig,
    oracle: &dyn CorrectnessOracle,
    tokenizer: &dyn Tokenizer,
) -> ResponseMetadata {
    let format = filter_format(t, tokens, cfg);
    let correct = format
        .answer
        .as_deref()
        .is_some_and(|a| oracle.is_correct(t.question(), a, t.gold_answers()));
    ResponseMetadata {
        search_steps: t.counters.search_calls,
        reasoning_length: t.generated_token_count(tokenizer),
        reflection_count: t
            .generated_segments()
            .map(|s| count_phrases(s, &cfg.reflection_lexicon))
            .sum(),
        language_consistent: !format.failures.contains(&FormatFailure::MixedLanguage),
        format_valid: format.passed(),
        correct,
        distinct_query_count: t.distinct_query_count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathFailure {
    ExcessiveReflection,
    ReasoningTooLong,
}

impl PathFailure {
    pub fn code(self) -> &'static str {
        match self {
            Self::ExcessiveReflection => "excessive_reflection",
            Self::ReasoningTooLong => "reasoning_too_long",
        }
    }
}

pub fn filter_reasoning_path(m: &ResponseMetadata, cfg: &CurationConfig) -> Result<(), PathFailure> {
    if m.reflection_count > cfg.max_reflections {
        return Err(PathFailure::ExcessiveReflection);
    }
    if m.reasoning_length > cfg.max_reasoning_tokens {
        return Err(PathFailure::ReasoningTooLong);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Keep,
    TooEasy,
    TooHard,
}

impl Difficulty {
    pub fn code(self) -> &'static str {
        match self {
            Self::Keep => "keep",
            Self::TooEasy => "too_easy",
            Self::TooHard => "too_hard",
        }
    }
}

pub fn filter_difficulty(group: &[ResponseMetadata], cfg: &CurationConfig) -> Difficulty {
    let correct = group.iter().filter(|m| m.correct).count();
    if correct < cfg.min_correct || group.is_empty() {
        return Difficulty::TooHard;
    }
    let accuracy = correct as f64 / group.len() as f64;
    if group.len() >= cfg.min_attempts_for_difficulty && accuracy >= cfg.accuracy_drop_threshold {
        return Difficulty::TooEasy;
    }
    Difficulty::Keep
}

/// Indices ordered by preference: fewest searches, then more distinct
/// sub-queries, then shorter reasoning, then input order.
pub fn selection_order(metadata: &[&ResponseMetadata]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..metadata.len()).collect();
    order.sort_by_key(|&i| {
        let m = metadata[i];
        (m.search_steps, std::cmp::Reverse(m.distinct_query_count), m.reasoning_length, i)
    });
    order
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CurationError {
    #[error("no surviving candidates to select from")]
    NoSurvivors,
}

pub fn select_best<'a>(
    survivors: &[(&'a Trajectory, &ResponseMetadata)],
) -> Result<&'a Trajectory, CurationError> {
    let meta: Vec<&ResponseMetadata> = survivors.iter().map(|(_, m)| *m).collect();
    selection_order(&meta)
        .first()
        .map(|&i| survivors[i].0)
        .ok_or(CurationError::NoSurvivors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStage {
    Input,
    Format,
    ReasoningPath,
    Difficulty,
    Correctness,
    Selection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub question_id: String,
    pub candidate_index: usize,
    pub trajectory_ref: String,
    pub stage: AuditStage,
    pub reason_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedRecord {
    pub question_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub trajectory_ref: String,
    pub metadata: ResponseMetadata,
}

/// A correct candidate that passed every filter, with its rank in selection
/// order (0 is the chosen one).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivorRecord {
    pub question_id: String,
    pub trajectory_ref: String,
    pub rank: usize,
    pub metadata: ResponseMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSummary {
    pub question_id: String,
    pub candidates: usize,
    pub correct: usize,
    pub difficulty: Difficulty,
    pub curated: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CurationOutcome {
    pub curated: Vec<CuratedRecord>,
    /// Parallel to `curated`.
    pub chosen: Vec<Trajectory>,
    pub survivors: Vec<SurvivorRecord>,
    pub audit: Vec<AuditRecord>,
    pub questions: Vec<QuestionSummary>,
}

struct QuestionResult {
    curated: Option<(CuratedRecord, Trajectory)>,
    survivors: Vec<SurvivorRecord>,
    audit: Vec<AuditRecord>,
    summary: QuestionSummary,
}

/// Runs the filters in order over candidates grouped by question id.
/// Every input candidate ends up either curated or in the audit log.
pub fn curate(
    candidates: &[Trajectory],
    tokens: &ProtocolTokens,
    cfg: &CurationConfig,
    oracle: &dyn CorrectnessOracle,
) -> CurationOutcome {
    let mut groups: IndexMap<&str, Vec<&Trajectory>> = IndexMap::new();
    for t in candidates {
        groups.entry(t.query.record.id.as_str()).or_default().push(t);
    }
    let groups: Vec<(&str, Vec<&Trajectory>)> = groups.into_iter().collect();
    let results: Vec<QuestionResult> = groups
        .par_iter()
        .map(|(qid, group)| curate_question(qid, group, tokens, cfg, oracle))
        .collect();

    let mut outcome = CurationOutcome::default();
    for r in results {
        if let Some((record, t)) = r.curated {
            outcome.curated.push(record);
            outcome.chosen.push(t);
        }
        outcome.survivors.extend(r.survivors);
        outcome.audit.extend(r.audit);
        outcome.questions.push(r.summary);
    }
    outcome
}

fn curate_question(
    qid: &str,
    group: &[&Trajectory],
    tokens: &ProtocolTokens,
    cfg: &CurationConfig,
    oracle: &dyn CorrectnessOracle,
) -> QuestionResult {
    let audit_for = |t: &Trajectory, stage: AuditStage, code: &str| AuditRecord {
        question_id: qid.to_string(),
        candidate_index: t.candidate_index,
        trajectory_ref: t.id.clone(),
        stage,
        reason_code: code.to_string(),
    };
    let mut audit = Vec::new();
    let mut seen = HashSet::new();
    let mut unique = Vec::with_capacity(group.len());
    for &t in group {
        if seen.insert(t.id.as_str()) {
            unique.push(t);
        } else {
            audit.push(audit_for(t, AuditStage::Input, "duplicate_candidate"));
        }
    }

    let metadata: Vec<ResponseMetadata> = unique
        .iter()
        .map(|t| collect_metadata(t, tokens, cfg, oracle))
        .collect();
    let mut eligible = Vec::new();
    for (i, t) in unique.iter().enumerate() {
        let format = filter_format(t, tokens, cfg);
        if let Some(first) = format.failures.first() {
            audit.push(audit_for(t, AuditStage::Format, first.code()));
        } else if let Err(e) = filter_reasoning_path(&metadata[i], cfg) {
            audit.push(audit_for(t, AuditStage::ReasoningPath, e.code()));
        } else {
            eligible.push(i);
        }
    }

    let difficulty = filter_difficulty(&metadata, cfg);
    let mut survivors = Vec::new();
    let mut curated = None;
    if difficulty != Difficulty::Keep {
        for &i in &eligible {
            audit.push(audit_for(unique[i], AuditStage::Difficulty, difficulty.code()));
        }
    } else {
        let mut correct = Vec::new();
        for &i in &eligible {
            if metadata[i].correct {
                correct.push(i);
            } else {
                audit.push(audit_for(unique[i], AuditStage::Correctness, "incorrect"));
            }
        }
        let meta: Vec<&ResponseMetadata> = correct.iter().map(|&i| &metadata[i]).collect();
        for (rank, pos) in selection_order(&meta).into_iter().enumerate() {
            let i = correct[pos];
            let t = unique[i];
            survivors.push(SurvivorRecord {
                question_id: qid.to_string(),
                trajectory_ref: t.id.clone(),
                rank,
                metadata: metadata[i].clone(),
            });
            if rank == 0 {
                let record = CuratedRecord {
                    question_id: qid.to_string(),
                    question: t.question().to_string(),
                    gold_answers: t.gold_answers().to_vec(),
                    trajectory_ref: t.id.clone(),
                    metadata: metadata[i].clone(),
                };
                curated = Some((record, t.clone()));
            } else {
                audit.push(audit_for(t, AuditStage::Selection, "not_selected"));
            }
        }
    }
    // Keep the audit in input order for stable output.
    audit.sort_by_key(|a| {
        group
            .iter()
            .position(|t| t.id == a.trajectory_ref)
            .unwrap_or(usize::MAX)
    });

    let summary = QuestionSummary {
        question_id: qid.to_string(),
        candidates: unique.len(),
        correct: metadata.iter().filter(|m| m.correct).count(),
        difficulty,
        curated: curated.is_some(),
    };
    QuestionResult { curated, survivors, audit, summary }
}

/// Question ids whose correct-candidate count falls in `range`, the rule
/// used to pick questions for reinforcement-learning rollouts.
pub fn questions_with_correct_in(summaries: &[QuestionSummary], range: RangeInclusive<usize>) -> Vec<String> {
    summaries
        .iter()
        .filter(|s| range.contains(&s.correct))
        .map(|s| s.question_id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{answered, trajectory_from};

    fn tokens() -> ProtocolTokens {
        ProtocolTokens::default()
    }

    fn meta(steps: usize, distinct: usize, len: usize) -> ResponseMetadata {
        ResponseMetadata {
            search_steps: steps,
            reasoning_length: len,
            reflection_count: 0,
            language_consistent: true,
            format_valid: true,
            correct: true,
            distinct_query_count: distinct,
        }
    }

    #[test]
    fn metadata_examples() {
        let cfg = CurationConfig::default();
        let oracle = F1Oracle { threshold: cfg.f1_threshold };
        let t = answered("q", "X", &["The answer is boxed{X}"]);
        let m = collect_metadata(&t, &tokens(), &cfg, &oracle);
        assert_eq!(m.search_steps, 0);
        assert!(m.correct);

        let t = answered("q", "X", &["Alternatively, wait - alternatively boxed{X}"]);
        assert_eq!(collect_metadata(&t, &tokens(), &cfg, &oracle).reflection_count, 3);
    }

    #[test]
    fn reflections_in_documents_are_not_counted() {
        let cfg = CurationConfig::default();
        let oracle = F1Oracle { threshold: 0.7 };
        let t = trajectory_from(
            "q",
            "X",
            &[
                ("<|begin_search_query|>x<|end_search_query|>", Some("alternatively, wait")),
                ("boxed{X}", None),
            ],
        );
        assert_eq!(collect_metadata(&t, &tokens(), &cfg, &oracle).reflection_count, 0);
    }

    #[test]
    fn format_examples() {
        let cfg = CurationConfig::default();
        assert!(filter_format(&answered("q", "X", &["Fine. boxed{ X  Y }"]), &tokens(), &cfg).passed());
        let check = filter_format(&answered("q", "X", &["Fine. boxed{ X  Y }"]), &tokens(), &cfg);
        assert_eq!(check.answer.as_deref(), Some("X Y"));

        let t = answered("q", "X", &["<|begin_search_query|>oops boxed{X}"]);
        assert_eq!(
            filter_format(&t, &tokens(), &cfg).failures,
            [FormatFailure::MalformedSearchTokens]
        );

        let english = "The river runs through the old city and the answer follows from it ".repeat(2);
        let mixed = format!("{english}{} boxed{{X}}", "北京是中国的首都城市".repeat(5));
        let share = script_minority_share(&mixed);
        assert!(share > 0.05 && share < 0.5, "{share}");
        let t = answered("q", "X", &[mixed.as_str()]);
        assert_eq!(filter_format(&t, &tokens(), &cfg).failures, [FormatFailure::MixedLanguage]);
    }

    #[test]
    fn reasoning_path_boundaries() {
        let cfg = CurationConfig::default();
        let mut m = meta(0, 0, 10);
        assert!(filter_reasoning_path(&m, &cfg).is_ok());
        m.reflection_count = 5;
        assert!(filter_reasoning_path(&m, &cfg).is_ok());
        m.reflection_count = 6;
        assert_eq!(filter_reasoning_path(&m, &cfg), Err(PathFailure::ExcessiveReflection));
        m.reflection_count = 0;
        m.reasoning_length = 8_097;
        assert_eq!(filter_reasoning_path(&m, &cfg), Err(PathFailure::ReasoningTooLong));
    }

    #[test]
    fn difficulty_examples() {
        let cfg = CurationConfig::default();
        let group = |c: usize| -> Vec<ResponseMetadata> {
            (0..10)
                .map(|i| ResponseMetadata { correct: i < c, ..meta(0, 0, 1) })
                .collect()
        };
        assert_eq!(filter_difficulty(&group(10), &cfg), Difficulty::TooEasy);
        assert_eq!(filter_difficulty(&group(4), &cfg), Difficulty::Keep);
        assert_eq!(filter_difficulty(&group(0), &cfg), Difficulty::TooHard);
    }

    #[test]
    fn selection_examples() {
        let ts: Vec<Trajectory> = (0..3).map(|i| answered(&format!("q{i}"), "X", &["boxed{X}"])).collect();
        let ms = [meta(3, 3, 1), meta(1, 1, 1), meta(2, 2, 1)];
        let pairs: Vec<_> = ts.iter().zip(ms.iter()).collect();
        assert_eq!(select_best(&pairs).unwrap().id, ts[1].id);

        let ms = [meta(2, 1, 1), meta(2, 2, 1)];
        let pairs: Vec<_> = ts.iter().zip(ms.iter()).collect();
        assert_eq!(select_best(&pairs).unwrap().id, ts[1].id);

        assert_eq!(select_best(&pairs[..1]).unwrap().id, ts[0].id);
        assert_eq!(select_best(&[]).unwrap_err(), CurationError::NoSurvivors);
    }

    #[test]
    fn all_format_failures_give_empty_output() {
        let cfg = CurationConfig::default();
        let ts: Vec<Trajectory> = (0..4)
            .map(|i| {
                let mut t = answered("q", "X", &["no box here"]);
                t.id = format!("q#{i}");
                t.candidate_index = i;
                t
            })
            .collect();
        let out = curate(&ts, &tokens(), &cfg, &F1Oracle { threshold: 0.7 });
        assert!(out.curated.is_empty());
        assert_eq!(out.audit.len(), 4);
        assert!(out.audit.iter().all(|a| a.stage == AuditStage::Format));
    }

    #[test]
    fn duplicate_questions_merge() {
        let cfg = CurationConfig::default();
        let mut a = answered("q", "X", &["boxed{X}"]);
        let mut b = answered("q", "X", &["boxed{wrong}"]);
        a.id = "q#0".into();
        b.id = "q#1".into();
        b.candidate_index = 1;
        let input = vec![a.clone(), b, a];
        let out = curate(&input, &tokens(), &cfg, &F1Oracle { threshold: 0.7 });
        assert_eq!(out.curated.len(), 1);
        assert_eq!(out.curated.len() + out.audit.len(), input.len());

        let again = curate(&out.chosen, &tokens(), &cfg, &F1Oracle { threshold: 0.7 });
        assert_eq!(again.curated, out.curated);
    }
}
