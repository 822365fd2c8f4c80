/// Outcome of scanning one generation for a search request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SearchParse {
    Query(String),
    Absent,
    /// A begin token without a matching end token, or an empty query.
    Malformed,
}

impl SearchParse {
    pub fn query(&self) -> Option<&str> {
        match self {
            Self::Query(q) => Some(q),
            _ => None,
        }
    }
}

/// Returns the trimmed text between the first begin token and the next end
/// token. Later pairs in the same text are ignored.
pub fn parse_search_query(generated: &str, (begin, end): (&str, &str)) -> SearchParse {
    let Some(open) = generated.find(begin) else {
        return SearchParse::Absent;
    };
    let body_start = open + begin.len();
    let Some(close) = generated[body_start..].find(end) else {
        return SearchParse::Malformed;
    };
    let query = generated[body_start..body_start + close].trim();
    if query.is_empty() || query.contains(begin) {
        return SearchParse::Malformed;
    }
    SearchParse::Query(query.to_string())
}

/// Returns the trimmed content of the last complete `<marker>{...}` in
/// `generated`, with braces balanced. Nested boxes resolve to the innermost.
pub fn extract_final_answer(generated: &str, marker: &str) -> Option<String> {
    let opener = format!("{marker}{{");
    let mut search_end = generated.len();
    while let Some(pos) = generated[..search_end].rfind(&opener) {
        let content_start = pos + opener.len();
        if let Some(content) = balanced(&generated[content_start..]) {
            let content = content.trim();
            return (!content.is_empty()).then(|| content.to_string());
        }
        search_end = pos;
    }
    None
}

/// Content up to the brace closing an already-opened `{`.
fn balanced(s: &str) -> Option<&str> {
    let mut depth = 1usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Checks that begin/end search tokens in `text` alternate properly.
pub(crate) fn search_tokens_well_formed(text: &str, begin: &str, end: &str) -> bool {
    let mut open = false;
    let mut rest = text;
    loop {
        let b = rest.find(begin);
        let e = rest.find(end);
        match (b, e) {
            (None, None) => return !open,
            (Some(bi), Some(ei)) if bi < ei => {
                if open {
                    return false;
                }
                open = true;
                rest = &rest[bi + begin.len()..];
            }
            (Some(bi), None) => {
                if open {
                    return false;
                }
                open = true;
                rest = &rest[bi + begin.len()..];
            }
            (_, Some(ei)) => {
                if !open {
                    return false;
                }
                open = false;
                rest = &rest[ei + end.len()..];
            }
        }
    }
}
