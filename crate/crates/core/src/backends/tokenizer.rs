use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;

use super::Tokenizer;

static WORD_OR_PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[\p{Alphabetic}\p{Nd}_]+|[^\s\p{Alphabetic}\p{Nd}_]").unwrap());

/// Reference tokenizer: runs of letters/digits form one token, every other
/// non-whitespace character is a token of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceTokenizer;

impl Tokenizer for ReferenceTokenizer {
    fn name(&self) -> &str {
        "reference-word-punct"
    }

    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        WORD_OR_PUNCT.find_iter(text).map(|m| m.range()).collect()
    }
}

/// Lowercased word tokens, punctuation dropped. Shared by the hash embedder
/// and the heuristic summarizer's novelty check.
pub(crate) fn content_terms(text: &str) -> impl Iterator<Item = String> + '_ {
    WORD_OR_PUNCT
        .find_iter(text)
        .map(|m| m.as_str())
        .filter(|t| t.chars().next().is_some_and(|c| c.is_alphanumeric() || c == '_'))
        .map(str::to_lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_string_has_no_tokens() {
        assert_eq!(ReferenceTokenizer.count(""), 0);
        assert_eq!(ReferenceTokenizer.count("   \n "), 0);
    }

    #[test]
    fn whitespace_separated_words() {
        assert_eq!(ReferenceTokenizer.count("a b c"), 3);
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(
            ReferenceTokenizer.tokenize("I'm fine, thanks!"),
            vec!["I", "'", "m", "fine", ",", "thanks", "!"]
        );
        assert_eq!(ReferenceTokenizer.tokenize("[7 days ago]"), vec!["[", "7", "days", "ago", "]"]);
    }

    #[test]
    fn spans_index_into_the_text() {
        let text = "héllo  wörld.";
        let toks: Vec<&str> = ReferenceTokenizer.spans(text).into_iter().map(|r| &text[r]).collect();
        assert_eq!(toks, vec!["héllo", "wörld", "."]);
    }
}
