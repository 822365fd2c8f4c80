//! Small text helpers shared by the annotation, curation, reward and eval code.

use std::fmt::Debug;

/// Splits `text` into word-boundary delimited words.
///
/// A word is a maximal run of alphanumeric characters or `_`, which is the
/// same notion of "word" used by `\b` in common regex engines.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
}

/// Lowercases, trims and collapses inner whitespace runs to a single space.
pub fn normalize_phrase(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Collapses every whitespace run to a single space and trims the ends.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Counts case-insensitive, word-boundary matches of each phrase in `text`.
///
/// Phrases may span several words; a phrase matches when its words appear
/// contiguously. Punctuation between words is ignored.
pub fn count_phrases<S: AsRef<str>>(text: &str, phrases: &[S]) -> usize {
    let haystack: Vec<String> = words(text).map(str::to_lowercase).collect();
    phrases
        .iter()
        .map(|p| {
            let needle: Vec<String> = words(p.as_ref()).map(str::to_lowercase).collect();
            count_subsequences(&haystack, &needle)
        })
        .sum()
}

fn count_subsequences(haystack: &[String], needle: &[String]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

/// Counts tokens for the length limits used during curation and reward
/// scoring. Plug a model tokenizer in here when exact token counts matter.
pub trait Tokenizer: Send + Sync + Debug {
    fn count(&self, text: &str) -> usize;
}

/// Counts whitespace-separated tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Converts char offsets into byte offsets for `text`.
///
/// Returns `None` when an offset lies past the end of the string.
pub(crate) fn char_to_byte(text: &str, char_offset: usize) -> Option<usize> {
    if char_offset == 0 {
        return Some(0);
    }
    let mut seen = 0;
    for (byte, _) in text.char_indices() {
        if seen == char_offset {
            return Some(byte);
        }
        seen += 1;
    }
    (seen == char_offset).then_some(text.len())
}

/// Slices `text` by char offsets.
pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    let s = char_to_byte(text, start)?;
    let e = char_to_byte(text, end)?;
    text.get(s..e)
}
