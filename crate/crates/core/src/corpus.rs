//! QA corpus ingestion and query annotation.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateways::{ChatMessage, ChatRequest, GatewayError, GenerationParams, LlmClient};
use crate::text::{normalize_phrase, words};

/// Default interrogative lexicon used to score question complexity.
pub const DEFAULT_INTERROGATIVES: [&str; 9] =
    ["what", "when", "where", "who", "whom", "whose", "which", "why", "how"];

/// Default closed domain label set; `other` is the fallback label.
pub const DEFAULT_DOMAIN_LABELS: [&str; 16] = [
    "film", "geography", "politics", "history", "science", "sports", "music", "literature",
    "television", "business", "technology", "art", "religion", "military", "medicine", "other",
];

/// Label assigned when the annotator answers outside the label set.
pub const OTHER_DOMAIN: &str = "other";

/// Longest keyword phrase, in words, that annotation keeps.
pub const MAX_KEYWORD_WORDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub source: String,
}

/// A QA record with the annotations the diversity sampler works from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedQuery {
    #[serde(flatten)]
    pub record: QaRecord,
    pub domain: String,
    pub keywords: Vec<String>,
    pub interrogative_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown corpus format {other:?} (expected jsonl or tsv)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn malformed(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Malformed { line, message: message.into() }
}

/// Loads a QA dataset, one record per non-blank line (TSV: per data row).
///
/// JSONL lines need `question` and `gold_answers` (`answers` and `answer`
/// are accepted as aliases); `id` and `source` are optional. TSV files need
/// a header naming `question` and `gold_answers` (or `answers`) columns,
/// with multiple answers separated by `|`. Missing ids are synthesized as
/// `<source>-<row index>`; the source defaults to the file stem.
pub fn load_qa_dataset(path: &Path, format: CorpusFormat) -> Result<Vec<QaRecord>, CorpusError> {
    let content = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let default_source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    parse_qa_dataset(&content, format, &default_source)
}

/// Parses corpus text already in memory. `default_source` fills in missing
/// sources and synthesized ids.
pub fn parse_qa_dataset(content: &str, format: CorpusFormat, default_source: &str) -> Result<Vec<QaRecord>, CorpusError> {
    let rows = match format {
        CorpusFormat::Jsonl => parse_jsonl(content)?,
        CorpusFormat::Tsv => parse_tsv(content)?,
    };

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(rows.len());
    for (index, (line, row)) in rows.into_iter().enumerate() {
        let source = row.source.unwrap_or_else(|| default_source.to_string());
        let id = row.id.unwrap_or_else(|| format!("{source}-{index}"));
        if !seen.insert(id.clone()) {
            return Err(malformed(line, format!("duplicate id {id:?}")));
        }
        records.push(QaRecord { id, question: row.question, gold_answers: row.gold_answers, source });
    }
    Ok(records)
}

struct RawRow {
    id: Option<String>,
    question: String,
    gold_answers: Vec<String>,
    source: Option<String>,
}

fn check_row(line: usize, row: RawRow) -> Result<(usize, RawRow), CorpusError> {
    if row.question.trim().is_empty() {
        return Err(malformed(line, "empty question"));
    }
    if row.gold_answers.is_empty() {
        return Err(malformed(line, "missing gold_answers"));
    }
    Ok((line, row))
}

fn parse_jsonl(content: &str) -> Result<Vec<(usize, RawRow)>, CorpusError> {
    let mut rows = Vec::new();
    for (idx, text) in content.lines().enumerate() {
        let line = idx + 1;
        if text.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(text).map_err(|e| malformed(line, e.to_string()))?;
        let question = v
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(line, "missing question"))?
            .to_string();
        let gold = ["gold_answers", "answers", "answer"]
            .iter()
            .find_map(|k| v.get(*k))
            .ok_or_else(|| malformed(line, "missing gold_answers"))?;
        let gold_answers = match gold {
            Value::String(s) => vec![s.clone()],
            Value::Array(items) => items
                .iter()
                .map(|a| match a {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(malformed(line, "gold_answers must be strings")),
                })
                .collect::<Result<_, _>>()?,
            Value::Number(n) => vec![n.to_string()],
            _ => return Err(malformed(line, "gold_answers must be strings")),
        };
        let id = match v.get("id") {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => None,
        };
        let source = v.get("source").and_then(Value::as_str).map(str::to_string);
        rows.push(check_row(line, RawRow { id, question, gold_answers, source })?);
    }
    Ok(rows)
}

fn parse_tsv(content: &str) -> Result<Vec<(usize, RawRow)>, CorpusError> {
    let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let col = |names: &[&str]| columns.iter().position(|c| names.contains(c));
    let q_col = col(&["question"]).ok_or_else(|| malformed(1, "header lacks a question column"))?;
    let a_col = col(&["gold_answers", "answers", "answer"])
        .ok_or_else(|| malformed(1, "missing gold_answers column"))?;
    let id_col = col(&["id"]);
    let src_col = col(&["source"]);

    let mut rows = Vec::new();
    for (idx, text) in lines {
        let line = idx + 1;
        let fields: Vec<&str> = text.split('\t').collect();
        let field = |i: Option<usize>| i.and_then(|i| fields.get(i)).map(|s| s.trim()).filter(|s| !s.is_empty());
        let question = field(Some(q_col)).unwrap_or_default().to_string();
        let gold_answers = field(Some(a_col))
            .map(|s| s.split('|').map(str::trim).filter(|a| !a.is_empty()).map(str::to_string).collect())
            .unwrap_or_default();
        rows.push(check_row(
            line,
            RawRow {
                id: field(id_col).map(str::to_string),
                question,
                gold_answers,
                source: field(src_col).map(str::to_string),
            },
        )?);
    }
    Ok(rows)
}

/// Counts interrogative words in `question` using the default lexicon.
pub fn count_interrogatives(question: &str) -> u32 {
    count_interrogatives_with(question, &DEFAULT_INTERROGATIVES)
}

/// Case-insensitive, word-boundary count of `lexicon` terms in `question`.
pub fn count_interrogatives_with<S: AsRef<str>>(question: &str, lexicon: &[S]) -> u32 {
    words(question)
        .filter(|w| lexicon.iter().any(|term| term.as_ref().eq_ignore_ascii_case(w)))
        .count() as u32
}

/// Lowercases, trims, collapses whitespace and deduplicates keywords,
/// dropping empties and phrases longer than [`MAX_KEYWORD_WORDS`].
pub fn normalize_keywords<I, S>(raw: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = HashSet::new();
    raw.into_iter()
        .map(|k| normalize_phrase(k.as_ref()))
        .filter(|k| !k.is_empty() && k.split(' ').count() <= MAX_KEYWORD_WORDS)
        .filter(|k| seen.insert(k.clone()))
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("annotating {record_id}: backend failed after {attempts} attempt(s): {source}")]
    Backend { record_id: String, attempts: u32, source: GatewayError },
    #[error("annotating {record_id}: unparsable annotator output: {message}")]
    Unparsable { record_id: String, message: String },
}

impl AnnotationError {
    pub fn record_id(&self) -> &str {
        match self {
            Self::Backend { record_id, .. } | Self::Unparsable { record_id, .. } => record_id,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Backend { .. } => "annotation_backend_failure",
            Self::Unparsable { .. } => "annotation_unparsable",
        }
    }
}

const ANNOTATION_INSTRUCTIONS: &str = "You label open-domain questions for a data-selection pipeline.\n\
Choose exactly one domain for the question from this list: {labels}.\n\
Then list the question's core semantic constituents as short keywords: key entity types \
(e.g. film, person, location), critical attributes (e.g. age, duration, population), core \
relationships (e.g. comparison, causality) and measurement dimensions (e.g. time, quantity). \
Use generic constituents, not the specific names in the question.\n\
Reply with a single JSON object: {\"domain\": \"<label>\", \"keywords\": [\"<keyword>\", ...]}";

/// Annotates QA records with a domain label and keywords via an LLM. The
/// interrogative count is always computed locally.
pub struct Annotator<C> {
    llm: C,
    labels: Vec<String>,
    lexicon: Vec<String>,
    params: GenerationParams,
    model: String,
    retries: u32,
}

impl<C: LlmClient> Annotator<C> {
    /// `labels` is the closed domain set; [`OTHER_DOMAIN`] is always added.
    pub fn new<S: AsRef<str>>(llm: C, labels: &[S]) -> Self {
        let mut labels: Vec<String> = labels.iter().map(|l| normalize_phrase(l.as_ref())).collect();
        if !labels.iter().any(|l| l == OTHER_DOMAIN) {
            labels.push(OTHER_DOMAIN.to_string());
        }
        Self {
            llm,
            labels,
            lexicon: DEFAULT_INTERROGATIVES.iter().map(|s| s.to_string()).collect(),
            params: GenerationParams::default(),
            model: String::new(),
            retries: 2,
        }
    }

    pub fn with_lexicon(mut self, lexicon: Vec<String>) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn with_params(mut self, params: GenerationParams, model: impl Into<String>) -> Self {
        self.params = params;
        self.model = model.into();
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn request_for(&self, question: &str) -> ChatRequest {
        let system = ANNOTATION_INSTRUCTIONS.replace("{labels}", &self.labels.join(", "));
        ChatRequest::new(
            vec![ChatMessage::system(system), ChatMessage::user(format!("Question: {question}"))],
            &self.params,
        )
        .with_model(self.model.clone())
    }

    pub fn annotate(&self, record: &QaRecord) -> Result<AnnotatedQuery, AnnotationError> {
        let request = self.request_for(&record.question);
        let mut attempts = 0;
        let reply = loop {
            attempts += 1;
            match self.llm.chat_complete(&request) {
                Ok(resp) => break resp.text,
                Err(_) if attempts <= self.retries => continue,
                Err(source) => {
                    return Err(AnnotationError::Backend {
                        record_id: record.id.clone(),
                        attempts,
                        source,
                    })
                }
            }
        };
        let (domain, keywords) = parse_annotation(&reply).map_err(|message| {
            AnnotationError::Unparsable { record_id: record.id.clone(), message }
        })?;
        let domain = normalize_phrase(&domain);
        let domain = if self.labels.contains(&domain) { domain } else { OTHER_DOMAIN.to_string() };
        Ok(AnnotatedQuery {
            record: record.clone(),
            domain,
            keywords: normalize_keywords(keywords),
            interrogative_count: count_interrogatives_with(&record.question, &self.lexicon),
        })
    }
}

/// Extracts `(domain, keywords)` from the first JSON object in `reply`.
fn parse_annotation(reply: &str) -> Result<(String, Vec<String>), String> {
    let start = reply.find('{').ok_or("no JSON object in reply")?;
    let end = reply.rfind('}').filter(|&e| e > start).ok_or("unterminated JSON object")?;
    let v: Value = serde_json::from_str(&reply[start..=end]).map_err(|e| e.to_string())?;
    let domain = v.get("domain").and_then(Value::as_str).ok_or("missing domain")?.to_string();
    let keywords = v
        .get("keywords")
        .and_then(Value::as_array)
        .ok_or("missing keywords")?
        .iter()
        .map(|k| k.as_str().map(str::to_string).ok_or("keywords must be strings"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((domain, keywords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateways::ScriptedLlm;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(content: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_is_empty_list() {
        let f = write("", ".jsonl");
        assert!(load_qa_dataset(f.path(), CorpusFormat::Jsonl).unwrap().is_empty());
        let f = write("", ".tsv");
        assert!(load_qa_dataset(f.path(), CorpusFormat::Tsv).unwrap().is_empty());
    }

    #[test]
    fn jsonl_with_answers_alias_preserves_order() {
        let f = write(
            "{\"question\":\"Who wrote Hamlet?\",\"answers\":[\"Shakespeare\"]}\n\
             {\"question\":\"Capital of France?\",\"answers\":[\"Paris\"],\"source\":\"nq\"}\n",
            ".jsonl",
        );
        let records = load_qa_dataset(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].question, "Who wrote Hamlet?");
        assert_eq!(records[1].gold_answers, ["Paris"]);
        assert_eq!(records[1].id, "nq-1");
        assert!(records[0].id.ends_with("-0"));
    }

    #[test]
    fn missing_gold_names_the_line() {
        let mut lines: Vec<String> = (0..6)
            .map(|i| format!("{{\"id\":\"q{i}\",\"question\":\"q{i}?\",\"gold_answers\":[\"a\"]}}"))
            .collect();
        lines.push("{\"id\":\"q6\",\"question\":\"no gold?\"}".into());
        let f = write(&lines.join("\n"), ".jsonl");
        let err = load_qa_dataset(f.path(), CorpusFormat::Jsonl).unwrap_err();
        assert_eq!(err.to_string(), "line 7: missing gold_answers");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write(
            "{\"id\":\"a\",\"question\":\"x?\",\"gold_answers\":[\"1\"]}\n{\"id\":\"a\",\"question\":\"y?\",\"gold_answers\":[\"2\"]}",
            ".jsonl",
        );
        assert_eq!(
            load_qa_dataset(f.path(), CorpusFormat::Jsonl).unwrap_err().to_string(),
            "line 2: duplicate id \"a\""
        );
    }

    #[test]
    fn tsv_rows() {
        let f = write("id\tquestion\tanswers\nx1\tWho?\tA | B\nx2\tWhen?\tC\n", ".tsv");
        let records = load_qa_dataset(f.path(), CorpusFormat::Tsv).unwrap();
        assert_eq!(records[0].gold_answers, ["A", "B"]);
        assert_eq!(records[1].id, "x2");
        let bad = write("question\tanswers\nWho?\t\n", ".tsv");
        assert_eq!(
            load_qa_dataset(bad.path(), CorpusFormat::Tsv).unwrap_err().to_string(),
            "line 2: missing gold_answers"
        );
    }

    #[test]
    fn interrogative_examples() {
        assert_eq!(count_interrogatives(""), 0);
        assert_eq!(count_interrogatives("What is X?"), 1);
        assert_eq!(
            count_interrogatives("Who directed the film, and when and where was it released?"),
            3
        );
        assert_eq!(count_interrogatives("Somewhat however whatever"), 0);
        assert_eq!(count_interrogatives("WHOSE book, whom?"), 2);
    }

    proptest! {
        #[test]
        fn interrogative_count_adds_under_concatenation(
            a in "[a-zA-Z ,?']{0,40}", b in "[a-zA-Z ,?']{0,40}"
        ) {
            let joined = format!("{a} {b}");
            prop_assert_eq!(count_interrogatives(&joined), count_interrogatives(&a) + count_interrogatives(&b));
        }
    }

    fn record(question: &str) -> QaRecord {
        QaRecord {
            id: "r1".into(),
            question: question.into(),
            gold_answers: vec!["x".into()],
            source: "test".into(),
        }
    }

    #[test]
    fn annotation_worked_example() {
        let llm = ScriptedLlm::repeat(r#"{"domain": "film", "keywords": ["film", "age"]}"#);
        let annotator = Annotator::new(llm, &DEFAULT_DOMAIN_LABELS);
        let rec = record("Which film whose director is younger, Charge It To Me or Danger: Diabolik?");
        let a = annotator.annotate(&rec).unwrap();
        assert_eq!(a.domain, "film");
        assert_eq!(a.keywords, ["film", "age"]);
        assert_eq!(a.interrogative_count, 2);
        assert_eq!(a.record, rec);
    }

    #[test]
    fn out_of_set_domain_maps_to_other() {
        let llm = ScriptedLlm::repeat(r#"{"domain": "astrology", "keywords": ["star sign"]}"#);
        let a = Annotator::new(llm, &DEFAULT_DOMAIN_LABELS).annotate(&record("What sign?")).unwrap();
        assert_eq!(a.domain, OTHER_DOMAIN);
    }

    #[test]
    fn keywords_are_normalized() {
        let llm = ScriptedLlm::repeat(
            "```json\n{\"domain\": \"Film\", \"keywords\": [\"Film\", \"film\", \"  Release   Date \", \"a b c d e f\"]}\n```",
        );
        let a = Annotator::new(llm, &DEFAULT_DOMAIN_LABELS).annotate(&record("When?")).unwrap();
        assert_eq!(a.domain, "film");
        assert_eq!(a.keywords, ["film", "release date"]);
    }

    #[test]
    fn unparsable_and_backend_errors_are_distinct() {
        let llm = ScriptedLlm::repeat("I think it's about film.");
        let err = Annotator::new(llm, &DEFAULT_DOMAIN_LABELS).annotate(&record("Q?")).unwrap_err();
        assert_eq!(err.code(), "annotation_unparsable");
        assert_eq!(err.record_id(), "r1");

        let llm = ScriptedLlm::repeat("{}").failing_on([1, 2, 3]);
        let err = Annotator::new(&llm, &DEFAULT_DOMAIN_LABELS).annotate(&record("Q?")).unwrap_err();
        assert_eq!(err.code(), "annotation_backend_failure");
        assert_eq!(llm.calls(), 3);

        let llm = ScriptedLlm::repeat(r#"{"domain":"music","keywords":["song"]}"#).failing_on([1]);
        let ok = Annotator::new(&llm, &DEFAULT_DOMAIN_LABELS).annotate(&record("Q?")).unwrap();
        assert_eq!(ok.domain, "music");
    }

    #[test]
    fn replayed_annotation_is_identical() {
        let llm = ScriptedLlm::repeat(r#"{"domain":"music","keywords":["song","year"]}"#);
        let annotator = Annotator::new(llm, &DEFAULT_DOMAIN_LABELS);
        let rec = record("When was the song released?");
        assert_eq!(annotator.annotate(&rec).unwrap(), annotator.annotate(&rec).unwrap());
    }
}
