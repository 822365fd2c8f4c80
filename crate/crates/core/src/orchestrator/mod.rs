//! The reason, search, summarize, generate loop that synthesizes trajectories.

pub(crate) mod protocol;
mod run;
pub(crate) mod trajectory;

pub use protocol::{extract_final_answer, parse_search_query, SearchParse};
pub use run::{
    candidate_seed, run_trajectory, sample_candidates, summarize_docs, summary_request,
    AgentClients, LIMIT_NOTICE, NO_RESULTS_SENTINEL,
};
pub use trajectory::{
    Counters, SearchEvent, Span, SpanError, SpanKind, StopReason, Trajectory, TrajectoryError,
    TrajectoryTurn,
};

use serde::{Deserialize, Serialize};

use crate::gateways::{GenerationParams, DEFAULT_DOC_CHAR_BUDGET};

/// Delimiters the reasoner emits around a sub-query, and the markers that
/// wrap injected search summaries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolTokens {
    pub begin_search: String,
    pub end_search: String,
    pub begin_result: String,
    pub end_result: String,
    /// Answers are written as `<answer_marker>{...}`.
    pub answer_marker: String,
}

impl Default for ProtocolTokens {
    fn default() -> Self {
        Self {
            begin_search: "<|begin_search_query|>".into(),
            end_search: "<|end_search_query|>".into(),
            begin_result: "<|begin_search_result|>".into(),
            end_result: "<|end_search_result|>".into(),
            answer_marker: "boxed".into(),
        }
    }
}

impl ProtocolTokens {
    pub fn search_pair(&self) -> (&str, &str) {
        (&self.begin_search, &self.end_search)
    }

    pub fn result_markers(&self) -> [&str; 2] {
        [&self.begin_result, &self.end_result]
    }

    /// Wraps injected content in result markers.
    pub fn wrap_result(&self, content: &str) -> String {
        format!("\n\n{}{}{}\n\n", self.begin_result, content, self.end_result)
    }
}

/// Reasoner prompt. `{question}`, `{begin_search}`, `{end_search}`,
/// `{begin_result}`, `{end_result}` and `{max_search_calls}` are substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system: "You are a reasoning assistant with the ability to perform web searches to help \
you answer the user's question accurately.\n\
To search, write {begin_search} your query here {end_search}. The system will then search the \
web and return a summary of the results in the format {begin_result} ...search results... \
{end_result}.\n\
You can repeat the search process multiple times if necessary. The maximum number of search \
attempts is limited to {max_search_calls}.\n\
Once you have all the information you need, continue your reasoning and give the final answer \
in the form \\boxed{YOUR_ANSWER}."
                .into(),
            user: "Question: {question}".into(),
        }
    }
}

impl PromptTemplate {
    fn fill(&self, text: &str, question: &str, cfg: &LoopConfig) -> String {
        text.replace("{begin_search}", &cfg.tokens.begin_search)
            .replace("{end_search}", &cfg.tokens.end_search)
            .replace("{begin_result}", &cfg.tokens.begin_result)
            .replace("{end_result}", &cfg.tokens.end_result)
            .replace("{max_search_calls}", &cfg.max_search_calls.to_string())
            .replace("{question}", question)
    }

    pub fn system_text(&self, cfg: &LoopConfig) -> String {
        self.fill(&self.system, "", cfg)
    }

    pub fn user_text(&self, question: &str, cfg: &LoopConfig) -> String {
        self.fill(&self.user, question, cfg)
    }

    /// The prompt prefix stored at the head of every trajectory.
    pub fn render(&self, question: &str, cfg: &LoopConfig) -> String {
        format!("{}\n\n{}\n\n", self.system_text(cfg), self.user_text(question, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub max_search_calls: usize,
    /// Counts reasoner generations only; summarization calls are not turns.
    pub max_turns: usize,
    pub candidates_per_query: usize,
    pub search_top_k: usize,
    pub doc_char_budget: usize,
    pub generation: GenerationParams,
    pub tokens: ProtocolTokens,
    pub template: PromptTemplate,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_search_calls: 10,
            max_turns: 15,
            candidates_per_query: 10,
            search_top_k: 10,
            doc_char_budget: DEFAULT_DOC_CHAR_BUDGET,
            generation: GenerationParams::default(),
            tokens: ProtocolTokens::default(),
            template: PromptTemplate::default(),
        }
    }
}

impl LoopConfig {
    /// Returns the offending field name and a message on failure.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |f: &str, m: &str| Err((f.to_string(), m.to_string()));
        if self.max_search_calls == 0 {
            return err("max_search_calls", "must be positive");
        }
        if self.max_turns == 0 {
            return err("max_turns", "must be positive");
        }
        if self.max_search_calls > self.max_turns {
            return err("max_search_calls", "must not exceed max_turns");
        }
        if self.candidates_per_query == 0 {
            return err("candidates_per_query", "must be positive");
        }
        if self.search_top_k == 0 {
            return err("search_top_k", "must be positive");
        }
        if self.doc_char_budget == 0 {
            return err("doc_char_budget", "must be positive");
        }
        let t = &self.tokens;
        for (name, value) in [
            ("tokens.begin_search", &t.begin_search),
            ("tokens.end_search", &t.end_search),
            ("tokens.begin_result", &t.begin_result),
            ("tokens.end_result", &t.end_result),
            ("tokens.answer_marker", &t.answer_marker),
        ] {
            if value.is_empty() {
                return err(name, "must not be empty");
            }
        }
        if t.begin_search == t.end_search {
            return err("tokens.end_search", "must differ from begin_search");
        }
        self.generation
            .validate()
            .map_err(|(f, m)| (format!("generation.{f}"), m))
    }
}
