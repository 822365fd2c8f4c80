//! Best-effort HTML to plain text conversion for retrieved web pages.

use std::borrow::Cow;

/// Default per-document character budget applied before summarization.
pub const DEFAULT_DOC_CHAR_BUDGET: usize = 4_000;

const RAW_TEXT_ELEMENTS: [&str; 4] = ["script", "style", "noscript", "template"];

/// Strips markup from `html` and returns at most `max_chars` characters of
/// whitespace-collapsed text.
///
/// Script and style bodies are dropped, comments and tags removed, and
/// character references decoded. Decoding can surface new markup (for
/// example `&lt;b&gt;`), so the cleanup repeats until the text is stable;
/// the result therefore never contains a tag and the function is idempotent.
pub fn extract_text(html: &str, max_chars: usize) -> String {
    let mut current = clean_once(html);
    loop {
        let next = clean_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    truncate_chars(&current, max_chars).trim_end().to_string()
}

fn clean_once(input: &str) -> String {
    let stripped = strip_markup(input);
    let decoded = html_escape::decode_html_entities(&stripped);
    collapse(&decoded)
}

fn collapse(text: &Cow<'_, str>) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Removes comments, raw-text elements and tags. Each removed construct is
/// replaced by a space so adjacent block contents do not run together.
fn strip_markup(input: &str) -> String {
    let mut out = String::with_capacity(input.len());
    let lower = input.to_ascii_lowercase();
    let bytes = input.as_bytes();
    let mut i = 0;
    while i < input.len() {
        if bytes[i] != b'<' {
            let next = input[i..].find('<').map_or(input.len(), |off| i + off);
            out.push_str(&input[i..next]);
            i = next;
            continue;
        }
        let rest = &lower[i..];
        if rest.starts_with("<!--") {
            i = rest.find("-->").map_or(input.len(), |end| i + end + 3);
            out.push(' ');
            continue;
        }
        if let Some(name) = RAW_TEXT_ELEMENTS
            .iter()
            .find(|name| opens_element(rest, name))
        {
            let close = format!("</{name}");
            i = match rest.find(&close) {
                Some(off) => {
                    let after = i + off;
                    lower[after..].find('>').map_or(input.len(), |gt| after + gt + 1)
                }
                None => input.len(),
            };
            out.push(' ');
            continue;
        }
        match tag_end(input, i) {
            Some(end) => {
                out.push(' ');
                i = end;
            }
            None => {
                out.push('<');
                i += 1;
            }
        }
    }
    out
}

fn opens_element(rest: &str, name: &str) -> bool {
    rest.len() > name.len() + 1
        && rest[1..].starts_with(name)
        && rest[1 + name.len()..]
            .chars()
            .next()
            .is_some_and(|c| c == '>' || c == '/' || c.is_whitespace())
}

/// Returns the byte index just past a tag starting at `start`, or `None`
/// when the `<` does not begin a well-formed tag (e.g. `a < b`).
fn tag_end(input: &str, start: usize) -> Option<usize> {
    let after = &input[start + 1..];
    let first = after.chars().next()?;
    if !(first.is_ascii_alphabetic() || matches!(first, '/' | '!' | '?')) {
        return None;
    }
    after.find('>').map(|gt| start + 1 + gt + 1)
}
