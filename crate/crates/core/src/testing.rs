//! Builders for hand-made trajectories, used by tests, fixtures and
//! benchmarks.

use crate::corpus::{AnnotatedQuery, QaRecord};
use crate::gateways::SearchResult;
use crate::orchestrator::{
    extract_final_answer, parse_search_query, Counters, LoopConfig, SearchEvent, SpanKind,
    StopReason, Trajectory, TrajectoryTurn, LIMIT_NOTICE,
};
use crate::orchestrator::trajectory::TextBuilder;
use crate::text::{Tokenizer, WhitespaceTokenizer};

pub fn query(id: &str, golds: &[&str]) -> AnnotatedQuery {
    AnnotatedQuery {
        record: QaRecord {
            id: id.into(),
            question: format!("Question {id}?"),
            gold_answers: golds.iter().map(|g| g.to_string()).collect(),
            source: "fixture".into(),
        },
        domain: "other".into(),
        keywords: Vec::new(),
        interrogative_count: 0,
    }
}

/// Assembles a trajectory turn by turn, keeping spans and counters
/// consistent the way the orchestrator would.
pub struct TrajectoryBuilder {
    cfg: LoopConfig,
    query: AnnotatedQuery,
    candidate_index: usize,
    text: TextBuilder,
    turns: Vec<TrajectoryTurn>,
    counters: Counters,
    stop: Option<StopReason>,
}

impl TrajectoryBuilder {
    pub fn new(query: AnnotatedQuery) -> Self {
        let cfg = LoopConfig::default();
        let mut text = TextBuilder::default();
        text.push(SpanKind::Prompt, &cfg.template.render(&query.record.question, &cfg));
        Self {
            cfg,
            query,
            candidate_index: 0,
            text,
            turns: Vec::new(),
            counters: Counters::default(),
            stop: None,
        }
    }

    pub fn candidate(mut self, index: usize) -> Self {
        self.candidate_index = index;
        self
    }

    fn push_turn(&mut self, reasoning: &str) -> usize {
        self.text.push(SpanKind::Generated, reasoning);
        self.counters.total_turns += 1;
        self.counters.generated_tokens += WhitespaceTokenizer.count(reasoning);
        self.turns.push(TrajectoryTurn {
            turn_index: self.turns.len(),
            reasoning: reasoning.to_string(),
            search: None,
            limit_notice: false,
            malformed_search: false,
        });
        self.turns.len() - 1
    }

    /// A turn with no search.
    pub fn think(mut self, reasoning: &str) -> Self {
        self.push_turn(reasoning);
        self
    }

    /// A turn that searches for `query` and gets `summary` injected.
    pub fn search(self, reasoning_before: &str, query: &str, summary: &str) -> Self {
        self.search_with(reasoning_before, query, summary, Vec::new())
    }

    pub fn search_with(mut self, reasoning_before: &str, query: &str, summary: &str, results: Vec<SearchResult>) -> Self {
        let t = &self.cfg.tokens;
        let reasoning = format!("{reasoning_before}{}{query}{}", t.begin_search, t.end_search);
        let wrapped = t.wrap_result(summary);
        let idx = self.push_turn(&reasoning);
        self.text.push(SpanKind::InjectedDoc, &wrapped);
        self.counters.search_calls += 1;
        self.turns[idx].search = Some(SearchEvent {
            query: query.to_string(),
            results,
            summary: summary.to_string(),
        });
        self
    }

    /// A turn that asks for a search once the budget is spent.
    pub fn limited(mut self, reasoning_before: &str, query: &str) -> Self {
        let t = &self.cfg.tokens;
        let reasoning = format!("{reasoning_before}{}{query}{}", t.begin_search, t.end_search);
        let notice = t.wrap_result(LIMIT_NOTICE);
        let idx = self.push_turn(&reasoning);
        self.text.push(SpanKind::LimitNotice, &notice);
        self.turns[idx].limit_notice = true;
        self
    }

    pub fn stop(mut self, reason: StopReason) -> Self {
        self.stop = Some(reason);
        self
    }

    /// Finishes the trajectory. Unless set explicitly, the stop reason is
    /// `answered` when the last turn boxes an answer and `max_turns`
    /// otherwise.
    pub fn build(self) -> Trajectory {
        let marker = &self.cfg.tokens.answer_marker;
        let boxed = self
            .turns
            .last()
            .filter(|t| t.search.is_none() && !t.limit_notice)
            .and_then(|t| extract_final_answer(&t.reasoning, marker));
        let stop_reason = self
            .stop
            .unwrap_or(if boxed.is_some() { StopReason::Answered } else { StopReason::MaxTurns });
        let final_answer = if stop_reason == StopReason::Answered { boxed } else { None };
        Trajectory {
            id: format!("{}#{}", self.query.record.id, self.candidate_index),
            candidate_index: self.candidate_index,
            seed: None,
            query: self.query,
            turns: self.turns,
            final_answer,
            raw_text: self.text.text,
            spans: self.text.spans,
            stop_reason,
            counters: self.counters,
            error: None,
        }
    }
}

/// A trajectory of plain reasoning turns for question `qid`.
pub fn answered(qid: &str, gold: &str, generations: &[&str]) -> Trajectory {
    generations
        .iter()
        .fold(TrajectoryBuilder::new(query(qid, &[gold])), |b, g| b.think(g))
        .build()
}

/// Each turn is generated text, optionally followed by an injected summary.
/// A turn with a summary must contain a well-formed search query.
pub fn trajectory_from(qid: &str, gold: &str, turns: &[(&str, Option<&str>)]) -> Trajectory {
    let pair = {
        let t = crate::orchestrator::ProtocolTokens::default();
        (t.begin_search, t.end_search)
    };
    let mut b = TrajectoryBuilder::new(query(qid, &[gold]));
    for (text, summary) in turns {
        match summary {
            Some(s) => {
                let q = parse_search_query(text, (&pair.0, &pair.1));
                let q = q.query().expect("turn with a summary needs a search query").to_string();
                let prefix = &text[..text.find(&pair.0).unwrap_or(0)];
                b = b.search(prefix, &q, s);
            }
            None => b = b.think(text),
        }
    }
    b.build()
}
