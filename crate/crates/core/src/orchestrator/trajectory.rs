use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedQuery;
use crate::gateways::SearchResult;
use crate::text::{char_slice, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    /// The rendered prompt (system instructions and question).
    Prompt,
    /// Text produced by the reasoner.
    Generated,
    /// A wrapped search summary inserted into the context.
    InjectedDoc,
    /// The fixed notice inserted once the search budget is spent.
    LimitNotice,
}

impl SpanKind {
    /// Content that did not come from the model and is excluded from the
    /// training loss.
    pub fn is_injected(self) -> bool {
        matches!(self, Self::InjectedDoc | Self::LimitNotice)
    }
}

/// A half-open `[start, end)` range of char offsets into `raw_text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Answered,
    MaxSearches,
    MaxTurns,
    MaxTokens,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub query: String,
    pub results: Vec<SearchResult>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryTurn {
    pub turn_index: usize,
    /// The reasoner's output for this turn, including a closing search token
    /// when generation stopped on it.
    pub reasoning: String,
    pub search: Option<SearchEvent>,
    /// The turn asked for a search after the budget was spent.
    #[serde(default)]
    pub limit_notice: bool,
    /// The turn opened a search query without closing it.
    #[serde(default)]
    pub malformed_search: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub search_calls: usize,
    pub total_turns: usize,
    pub generated_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub code: String,
    pub message: String,
}

/// One sampled reasoning path for a query.
///
/// `raw_text` is the full interleaved context: prompt, generated text and
/// injected content. `spans` partitions it in order, so every character of
/// `raw_text` belongs to exactly one span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub candidate_index: usize,
    pub seed: Option<u64>,
    pub query: AnnotatedQuery,
    pub turns: Vec<TrajectoryTurn>,
    pub final_answer: Option<String>,
    pub raw_text: String,
    pub spans: Vec<Span>,
    pub stop_reason: StopReason,
    pub counters: Counters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TrajectoryError>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SpanError {
    #[error("span {index} [{start}, {end}) is out of bounds or inverted")]
    OutOfBounds { index: usize, start: usize, end: usize },
    #[error("span {index} overlaps its predecessor")]
    Overlap { index: usize },
}

impl Trajectory {
    pub fn question(&self) -> &str {
        &self.query.record.question
    }

    pub fn gold_answers(&self) -> &[String] {
        &self.query.record.gold_answers
    }

    /// Text of one span. Panics if the span does not lie on char boundaries
    /// of `raw_text`; call [`Trajectory::validate_spans`] on untrusted data.
    pub fn span_text(&self, span: &Span) -> &str {
        char_slice(&self.raw_text, span.start, span.end).expect("span within raw_text")
    }

    pub fn spans_of(&self, kind: SpanKind) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(move |s| s.kind == kind)
    }

    /// Model-generated segments in order.
    pub fn generated_segments(&self) -> impl Iterator<Item = &str> {
        self.spans_of(SpanKind::Generated).map(|s| self.span_text(s))
    }

    /// Concatenation of all model-generated text.
    pub fn generated_text(&self) -> String {
        self.generated_segments().collect()
    }

    /// Generated text grouped into runs separated by retrieved documents.
    /// Limit notices do not split a run since no retrieval happened.
    pub fn inter_search_segments(&self) -> Vec<String> {
        let mut runs = vec![String::new()];
        for span in &self.spans {
            match span.kind {
                SpanKind::Generated => runs.last_mut().unwrap().push_str(self.span_text(span)),
                SpanKind::InjectedDoc => runs.push(String::new()),
                SpanKind::Prompt | SpanKind::LimitNotice => {}
            }
        }
        runs
    }

    /// Char offset where the completion (everything after the prompt) starts.
    pub fn prompt_len(&self) -> usize {
        self.spans
            .iter()
            .take_while(|s| s.kind == SpanKind::Prompt)
            .map(|s| s.end)
            .last()
            .unwrap_or(0)
    }

    pub fn generated_token_count(&self, tokenizer: &dyn Tokenizer) -> usize {
        self.generated_segments().map(|s| tokenizer.count(s)).sum()
    }

    /// Distinct executed sub-queries after lowercasing and whitespace collapse.
    pub fn distinct_query_count(&self) -> usize {
        let mut seen: Vec<String> = self
            .turns
            .iter()
            .filter_map(|t| t.search.as_ref())
            .map(|s| crate::text::normalize_phrase(&s.query))
            .collect();
        seen.sort();
        seen.dedup();
        seen.len()
    }

    /// Checks that spans are sorted, non-overlapping and inside `raw_text`.
    pub fn validate_spans(&self) -> Result<(), SpanError> {
        let len = self.raw_text.chars().count();
        let mut prev_end = 0;
        for (index, s) in self.spans.iter().enumerate() {
            if s.start > s.end || s.end > len {
                return Err(SpanError::OutOfBounds { index, start: s.start, end: s.end });
            }
            if s.start < prev_end {
                return Err(SpanError::Overlap { index });
            }
            prev_end = s.end;
        }
        Ok(())
    }
}

/// Appends text to a growing trajectory while recording spans.
#[derive(Debug, Default)]
pub(crate) struct TextBuilder {
    pub(crate) text: String,
    chars: usize,
    pub(crate) spans: Vec<Span>,
}

impl TextBuilder {
    pub(crate) fn push(&mut self, kind: SpanKind, piece: &str) {
        if piece.is_empty() {
            return;
        }
        let start = self.chars;
        self.chars += piece.chars().count();
        self.text.push_str(piece);
        self.spans.push(Span { start, end: self.chars, kind });
    }

    /// Everything after the prompt.
    pub(crate) fn continuation(&self) -> &str {
        let prompt_chars: usize = self
            .spans
            .iter()
            .take_while(|s| s.kind == SpanKind::Prompt)
            .map(|s| s.end - s.start)
            .sum::<usize>();
        let byte = crate::text::char_to_byte(&self.text, prompt_chars).unwrap_or(self.text.len());
        &self.text[byte..]
    }
}
