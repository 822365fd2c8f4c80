use sha2::{Digest, Sha256};

use super::protocol::{extract_final_answer, parse_search_query, SearchParse};
use super::trajectory::{
    Counters, SearchEvent, SpanKind, StopReason, TextBuilder, Trajectory, TrajectoryError,
    TrajectoryTurn,
};
use super::LoopConfig;
use crate::corpus::AnnotatedQuery;
use crate::gateways::{
    ChatMessage, ChatRequest, FinishReason, GatewayError, LlmClient, SearchClient, SearchResult,
};
use crate::text::{char_slice, Tokenizer, WhitespaceTokenizer};

/// Injected verbatim when a search returns nothing usable.
pub const NO_RESULTS_SENTINEL: &str = "No helpful information found.";

/// Injected when the reasoner asks for a search after the budget is spent.
pub const LIMIT_NOTICE: &str = "Search limit reached; answer with current information.";

/// The three backends one trajectory talks to.
#[derive(Clone, Copy)]
pub struct AgentClients<'a> {
    pub reasoner: &'a dyn LlmClient,
    pub searcher: &'a dyn SearchClient,
    pub summarizer: &'a dyn LlmClient,
}

/// Builds the summarization request for one sub-query. Each document is cut
/// to `doc_char_budget` characters.
pub fn summary_request(
    question: &str,
    sub_query: &str,
    results: &[SearchResult],
    cfg: &LoopConfig,
    seed: Option<u64>,
) -> ChatRequest {
    let mut prompt = format!(
        "You are helping answer a question using web search results.\n\
Question: {question}\n\
Current search query: {sub_query}\n\n\
Read the documents below and write a concise summary of the information relevant to the \
current search query and the question. If nothing is relevant, reply with \"{NO_RESULTS_SENTINEL}\"\n"
    );
    for doc in results {
        let text = char_slice(&doc.extracted_text, 0, cfg.doc_char_budget)
            .unwrap_or(&doc.extracted_text);
        prompt.push_str(&format!(
            "\nDocument {} (title: {}; url: {}):\n{}\n",
            doc.rank, doc.title, doc.url, text
        ));
    }
    ChatRequest::new(vec![ChatMessage::user(prompt)], &cfg.generation).with_seed(seed)
}

/// Summarizes search results for injection. Empty results, or an empty
/// summary, give [`NO_RESULTS_SENTINEL`] without calling the model in the
/// first case.
pub fn summarize_docs(
    question: &str,
    sub_query: &str,
    results: &[SearchResult],
    llm: &dyn LlmClient,
    cfg: &LoopConfig,
    seed: Option<u64>,
) -> Result<String, GatewayError> {
    if results.is_empty() {
        return Ok(NO_RESULTS_SENTINEL.to_string());
    }
    let response = llm.chat_complete(&summary_request(question, sub_query, results, cfg, seed))?;
    let summary = response.text.trim();
    Ok(if summary.is_empty() { NO_RESULTS_SENTINEL.to_string() } else { summary.to_string() })
}

/// Seed for candidate `index` of a query, stable across runs and platforms.
pub fn candidate_seed(base_seed: u64, query_id: &str, index: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base_seed.to_le_bytes());
    hasher.update(query_id.as_bytes());
    hasher.update((index as u64).to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

struct LoopState {
    builder: TextBuilder,
    turns: Vec<TrajectoryTurn>,
    counters: Counters,
}

/// Runs the reason and search loop for one candidate.
///
/// Every turn resends the full interleaved history as an assistant prefix
/// and stops generation at the end-of-query token. Backend failures end the
/// loop with [`StopReason::BackendError`] and keep everything produced so far.
pub fn run_trajectory(
    query: &AnnotatedQuery,
    cfg: &LoopConfig,
    clients: AgentClients<'_>,
    candidate_index: usize,
    seed: Option<u64>,
) -> Trajectory {
    let tokenizer = WhitespaceTokenizer;
    let question = query.record.question.as_str();
    let system = cfg.template.system_text(cfg);
    let user = cfg.template.user_text(question, cfg);
    let mut state = LoopState {
        builder: TextBuilder::default(),
        turns: Vec::new(),
        counters: Counters::default(),
    };
    state.builder.push(SpanKind::Prompt, &cfg.template.render(question, cfg));

    let mut final_answer = None;
    let mut error = None;
    let stop_reason = 'outer: {
        for turn_index in 0..cfg.max_turns {
            let context = state.builder.continuation();
            let used = tokenizer.count(context);
            let budget = cfg.generation.max_tokens as usize;
            if used >= budget {
                break 'outer StopReason::MaxTokens;
            }
            let mut messages = vec![ChatMessage::system(&system), ChatMessage::user(&user)];
            if !context.is_empty() {
                messages.push(ChatMessage::assistant(context));
            }
            let request = ChatRequest::new(messages, &cfg.generation)
                .with_stop(&cfg.tokens.end_search)
                .with_seed(seed)
                .with_max_tokens((budget - used) as u32);

            let response = match clients.reasoner.chat_complete(&request) {
                Ok(r) => r,
                Err(e) => {
                    error = Some(TrajectoryError { code: e.code().into(), message: e.to_string() });
                    break 'outer StopReason::BackendError;
                }
            };
            state.counters.total_turns += 1;

            let mut reasoning = response.text;
            if response.finish_reason == FinishReason::StopSequence {
                reasoning.push_str(&cfg.tokens.end_search);
            }
            state.counters.generated_tokens += tokenizer.count(&reasoning);
            state.builder.push(SpanKind::Generated, &reasoning);

            let mut turn = TrajectoryTurn {
                turn_index,
                reasoning,
                search: None,
                limit_notice: false,
                malformed_search: false,
            };
            match parse_search_query(&turn.reasoning, cfg.tokens.search_pair()) {
                SearchParse::Query(sub_query) if state.counters.search_calls < cfg.max_search_calls => {
                    state.counters.search_calls += 1;
                    let searched = clients
                        .searcher
                        .search(&sub_query, cfg.search_top_k)
                        .and_then(|results| {
                            summarize_docs(question, &sub_query, &results, clients.summarizer, cfg, seed)
                                .map(|summary| (results, summary))
                        });
                    match searched {
                        Ok((results, summary)) => {
                            state.builder.push(SpanKind::InjectedDoc, &cfg.tokens.wrap_result(&summary));
                            turn.search = Some(SearchEvent { query: sub_query, results, summary });
                            state.turns.push(turn);
                            continue;
                        }
                        Err(e) => {
                            state.turns.push(turn);
                            error = Some(TrajectoryError { code: e.code().into(), message: e.to_string() });
                            break 'outer StopReason::BackendError;
                        }
                    }
                }
                SearchParse::Query(_) => {
                    state.builder.push(SpanKind::LimitNotice, &cfg.tokens.wrap_result(LIMIT_NOTICE));
                    turn.limit_notice = true;
                    state.turns.push(turn);
                    continue;
                }
                SearchParse::Malformed => turn.malformed_search = true,
                SearchParse::Absent => {}
            }

            let answer = extract_final_answer(&turn.reasoning, &cfg.tokens.answer_marker);
            let finish = response.finish_reason;
            state.turns.push(turn);
            if answer.is_some() {
                final_answer = answer;
                break 'outer StopReason::Answered;
            }
            if finish == FinishReason::Length {
                break 'outer StopReason::MaxTokens;
            }
        }
        StopReason::MaxTurns
    };

    let LoopState { builder, turns, counters } = state;
    Trajectory {
        id: format!("{}#{}", query.record.id, candidate_index),
        candidate_index,
        seed,
        query: query.clone(),
        turns,
        final_answer,
        raw_text: builder.text,
        spans: builder.spans,
        stop_reason,
        counters,
        error,
    }
}

/// Runs `candidates_per_query` trajectories in order, each with its own
/// seed. A failed candidate is kept as a `backend_error` trajectory.
pub fn sample_candidates(
    query: &AnnotatedQuery,
    cfg: &LoopConfig,
    clients: AgentClients<'_>,
    base_seed: u64,
) -> Vec<Trajectory> {
    (0..cfg.candidates_per_query)
        .map(|i| {
            let seed = candidate_seed(base_seed, &query.record.id, i);
            run_trajectory(query, cfg, clients, i, Some(seed))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QaRecord;
    use crate::gateways::{
        CachePolicy, EchoLlm, FixtureSearchProvider, ScriptedLlm, SearchGateway,
    };

    fn query() -> AnnotatedQuery {
        AnnotatedQuery {
            record: QaRecord {
                id: "q1".into(),
                question: "What is the capital of France?".into(),
                gold_answers: vec!["Paris".into()],
                source: "test".into(),
            },
            domain: "geography".into(),
            keywords: vec!["france".into()],
            interrogative_count: 1,
        }
    }

    fn searcher() -> SearchGateway<FixtureSearchProvider> {
        let mut fixture = FixtureSearchProvider::new();
        fixture.insert(
            "capital of France",
            [
                ("https://a.example", "Paris", "<p>Paris is the capital.</p>"),
                ("https://b.example", "France", "<p>France is in Europe.</p>"),
                ("https://c.example", "Lyon", "<p>Lyon is a city.</p>"),
            ],
        );
        SearchGateway::new(fixture, CachePolicy::Memory)
    }

    struct FirstLine;
    impl LlmClient for FirstLine {
        fn chat_complete(&self, r: &ChatRequest) -> Result<crate::gateways::ChatResponse, GatewayError> {
            let text = r.last_user_text().unwrap_or_default();
            let title = text
                .lines()
                .find_map(|l| l.strip_prefix("Document 1 (title: "))
                .and_then(|l| l.split(';').next())
                .unwrap_or_default();
            Ok(crate::gateways::ChatResponse::end(title))
        }
    }

    fn run(reasoner: &dyn LlmClient, cfg: &LoopConfig) -> Trajectory {
        let s = searcher();
        let clients = AgentClients { reasoner, searcher: &s, summarizer: &FirstLine };
        run_trajectory(&query(), cfg, clients, 0, Some(7))
    }

    fn check_span_round_trip(t: &Trajectory) {
        t.validate_spans().unwrap();
        let total: usize = t.spans.iter().map(|s| s.end - s.start).sum();
        assert_eq!(total, t.raw_text.chars().count());
        let kept: String = t
            .spans
            .iter()
            .filter(|s| s.kind == SpanKind::Generated)
            .map(|s| t.span_text(s))
            .collect();
        let joined: String = t.turns.iter().map(|x| x.reasoning.as_str()).collect();
        assert_eq!(kept, joined);
    }

    #[test]
    fn immediate_answer() {
        let reasoner = ScriptedLlm::repeat("Easy. boxed{Paris}");
        let t = run(&reasoner, &LoopConfig::default());
        assert_eq!(t.stop_reason, StopReason::Answered);
        assert_eq!(t.final_answer.as_deref(), Some("Paris"));
        assert_eq!(t.counters.total_turns, 1);
        assert_eq!(t.counters.search_calls, 0);
        check_span_round_trip(&t);
    }

    #[test]
    fn one_search_then_answer() {
        let reasoner = ScriptedLlm::sequence([
            "Let me look. <|begin_search_query|>capital of France<|end_search_query|> ignored",
            "So it is boxed{Paris}",
        ]);
        let cfg = LoopConfig::default();
        let t = run(&reasoner, &cfg);
        assert_eq!(t.stop_reason, StopReason::Answered);
        assert_eq!(t.counters.total_turns, 2);
        assert_eq!(t.counters.search_calls, 1);
        let docs: Vec<_> = t.spans_of(SpanKind::InjectedDoc).collect();
        assert_eq!(docs.len(), 1);
        assert_eq!(t.span_text(docs[0]), cfg.tokens.wrap_result("Paris"));
        assert_eq!(t.turns[0].search.as_ref().unwrap().results.len(), 3);

        // Offsets: prompt, first generation, doc, second generation.
        let prompt = cfg.template.render(&t.query.record.question, &cfg).chars().count();
        let first = "Let me look. <|begin_search_query|>capital of France<|end_search_query|>";
        assert_eq!(t.spans[1].start, prompt);
        assert_eq!(docs[0].start, prompt + first.chars().count());
        assert_eq!(t.turns[0].reasoning, first);
        check_span_round_trip(&t);
    }

    #[test]
    fn search_every_turn_hits_limits() {
        let reasoner = ScriptedLlm::repeat("<|begin_search_query|>capital of France<|end_search_query|>");
        let t = run(&reasoner, &LoopConfig::default());
        assert_eq!(t.counters.search_calls, 10);
        assert_eq!(t.counters.total_turns, 15);
        assert_eq!(t.stop_reason, StopReason::MaxTurns);
        assert_eq!(t.spans_of(SpanKind::LimitNotice).count(), 5);
        assert!(t.turns[10].limit_notice);
        assert!(t.final_answer.is_none());
        check_span_round_trip(&t);
    }

    #[test]
    fn silent_reasoner_runs_out_of_turns() {
        let reasoner = ScriptedLlm::repeat("thinking");
        let t = run(&reasoner, &LoopConfig::default());
        assert_eq!(t.stop_reason, StopReason::MaxTurns);
        assert_eq!(t.counters.total_turns, 15);
    }

    #[test]
    fn token_budget_stops_loop() {
        let reasoner = ScriptedLlm::repeat("one two three four five six");
        let mut cfg = LoopConfig::default();
        cfg.generation.max_tokens = 10;
        let t = run(&reasoner, &cfg);
        assert_eq!(t.stop_reason, StopReason::MaxTokens);
        assert!(t.counters.generated_tokens <= 10);
    }

    #[test]
    fn malformed_search_is_kept_as_text() {
        let reasoner = ScriptedLlm::sequence(["<|begin_search_query|>dangling", "boxed{x}"]);
        let t = run(&reasoner, &LoopConfig::default());
        assert!(t.turns[0].malformed_search);
        assert_eq!(t.counters.search_calls, 0);
        assert_eq!(t.stop_reason, StopReason::Answered);
    }

    #[test]
    fn backend_failure_keeps_partial_trajectory() {
        let reasoner = ScriptedLlm::sequence([
            "<|begin_search_query|>capital of France<|end_search_query|>",
            "boxed{Paris}",
        ])
        .failing_on([2]);
        let t = run(&reasoner, &LoopConfig::default());
        assert_eq!(t.stop_reason, StopReason::BackendError);
        assert_eq!(t.error.as_ref().unwrap().code, "scripted_failure");
        assert_eq!(t.turns.len(), 1);
        assert!(t.final_answer.is_none());
    }

    #[test]
    fn empty_results_inject_sentinel() {
        let reasoner = ScriptedLlm::sequence([
            "<|begin_search_query|>unknown thing<|end_search_query|>",
            "boxed{?}",
        ]);
        let t = run(&reasoner, &LoopConfig::default());
        assert_eq!(t.turns[0].search.as_ref().unwrap().summary, NO_RESULTS_SENTINEL);
    }

    #[test]
    fn summary_prompt_truncates_each_doc() {
        let cfg = LoopConfig::default();
        let docs: Vec<SearchResult> = (1..=3)
            .map(|rank| SearchResult {
                rank,
                url: format!("https://{rank}.example"),
                title: format!("doc {rank}"),
                extracted_text: char::from(b'a' + rank as u8).to_string().repeat(4_000),
                fetched_at: chrono::DateTime::UNIX_EPOCH,
            })
            .collect();
        let long: Vec<SearchResult> = docs
            .iter()
            .cloned()
            .map(|mut d| {
                d.extracted_text = d.extracted_text.repeat(2);
                d
            })
            .collect();
        let prompt = summary_request("q", "sq", &long, &cfg, None).messages[0].content.clone();
        for d in &docs {
            assert!(prompt.contains(&d.extracted_text));
            let run = d.extracted_text.chars().next().unwrap().to_string().repeat(4_001);
            assert!(!prompt.contains(&run));
        }
        assert_eq!(summarize_docs("q", "sq", &[], &EchoLlm, &cfg, None).unwrap(), NO_RESULTS_SENTINEL);
    }

    #[test]
    fn candidates_get_distinct_seeds_and_isolate_failures() {
        let reasoner = ScriptedLlm::repeat("boxed{Paris}").failing_on([4]);
        let s = searcher();
        let clients = AgentClients { reasoner: &reasoner, searcher: &s, summarizer: &EchoLlm };
        let out = sample_candidates(&query(), &LoopConfig::default(), clients, 1);
        assert_eq!(out.len(), 10);
        let failed: Vec<_> = out.iter().filter(|t| t.stop_reason == StopReason::BackendError).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].candidate_index, 3);
        let mut seeds: Vec<_> = out.iter().map(|t| t.seed).collect();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
        assert_eq!(candidate_seed(1, "q1", 0), candidate_seed(1, "q1", 0));
    }
}
