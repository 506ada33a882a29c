//! Reference summarizers: a rule-based first-person fact extractor and a
//! replay of gold annotations.

use std::collections::{HashMap, HashSet};

use super::tokenizer::content_terms;
use super::{SummarizeRequest, Summarizer, SummaryOutput};
use crate::chronicle::{Episode, TurnRef};
use crate::error::BackendError;

/// Verbs after "I" that express reactions rather than facts.
const NON_FACT_VERBS: &[&str] = &[
    "agree", "think", "guess", "see", "know", "mean", "hope", "bet", "understand", "wonder",
    "suppose", "believe", "imagine", "disagree", "appreciate", "apologize", "doubt",
];

/// Adjectives after "I'm"/"I am" that express reactions rather than facts.
const NON_FACT_STATES: &[&str] = &[
    "sorry", "glad", "fine", "good", "great", "ok", "okay", "sure", "happy", "well", "doing",
    "not", "so", "too", "also",
];

const ADVERBS: &[&str] = &[
    "just", "really", "also", "recently", "usually", "still", "actually", "always", "often",
    "never", "finally", "sometimes", "currently", "mostly", "definitely",
];

const IRREGULAR_PAST: &[&str] = &[
    "was", "had", "went", "got", "made", "took", "saw", "bought", "began", "came", "did", "ate",
    "found", "gave", "grew", "knew", "left", "lost", "met", "ran", "sold", "spent", "told",
    "won", "wrote", "moved", "used",
];

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "to", "of", "in", "on", "at", "for", "with", "as",
    "is", "are", "was", "were", "be", "been", "it", "its", "this", "that", "my", "i", "me",
    "we", "our", "you", "your", "so", "too", "very", "just", "really", "also", "has", "have",
    "had", "do", "does", "did", "am", "im", "m", "s", "t", "not", "no", "yes", "there", "their",
    "they", "some", "all", "about", "from", "by", "up", "out", "what", "when", "how", "like",
];

/// Deterministic stand-in summarizer. A turn yields a summary only when one of
/// its sentences is a declarative first-person statement ("I ...", "I'm ...",
/// "my ...", "we ...") that is not a reaction ("I agree", "I'm sorry") and
/// carries content words not already present in the speaker's memory.
///
/// "I work as a nurse at night" becomes "works as a nurse at night";
/// "my dog is named Max" becomes "their dog is named Max".
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicSummarizer;

pub fn heuristic_summarize(text: &str, memory: &[&str]) -> Option<String> {
    let known: HashSet<String> = memory.iter().flat_map(|m| content_terms(m)).collect();
    split_sentences(text).into_iter().find_map(|sentence| {
        let (fact, object) = rewrite_first_person(sentence)?;
        let content: Vec<String> = content_terms(&object)
            .filter(|t| t.len() >= 3 && !STOPWORDS.contains(&t.as_str()))
            .collect();
        if content.is_empty() || content.iter().all(|t| known.contains(t)) {
            return None;
        }
        Some(fact)
    })
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?' | ';') {
            // questions never state facts
            if c != '?' {
                out.push(&text[start..i]);
            }
            start = i + c.len_utf8();
        }
    }
    out.push(&text[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Returns the third-person fact and the part after its verb, which is where
/// the content words are counted.
fn rewrite_first_person(sentence: &str) -> Option<(String, String)> {
    let words: Vec<&str> = sentence
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| matches!(c, ',' | '"' | '(' | ')')))
        .filter(|w| !w.is_empty())
        .collect();
    // leading interjections like "yes, I ..." or "well I ..."
    let start = words.iter().position(|w| is_subject(w))?;
    if start > 2 {
        return None;
    }
    let subject = words[start].to_lowercase().replace('’', "'");
    let rest = &words[start + 1..];
    let (fact, object) = match subject.as_str() {
        "i" => {
            let (adverbs, rest) = split_adverbs(rest);
            let (verb, tail) = rest.split_first()?;
            let verb_lc = verb.to_lowercase();
            if NON_FACT_VERBS.contains(&verb_lc.as_str()) {
                return None;
            }
            let verb = match verb_lc.as_str() {
                "am" => {
                    if tail.first().is_some_and(|w| NON_FACT_STATES.contains(&w.to_lowercase().as_str())) {
                        return None;
                    }
                    "is".to_string()
                }
                "have" | "'ve" => "has".to_string(),
                "do" => "does".to_string(),
                v if IRREGULAR_PAST.contains(&v) || v.ends_with("ed") => v.to_string(),
                "can" | "will" | "would" | "could" | "should" | "might" | "must" => verb_lc,
                v => third_person(v),
            };
            (join(adverbs, &verb, tail), tail.join(" "))
        }
        "i'm" | "im" => {
            if rest.first().is_some_and(|w| NON_FACT_STATES.contains(&w.to_lowercase().as_str())) {
                return None;
            }
            (join(&[], "is", rest), rest.join(" "))
        }
        "i've" => (join(&[], "has", rest), rest.join(" ")),
        "my" => (join(&[], "their", rest), rest.join(" ")),
        "we" | "we're" | "we've" => (join(&[], &subject, rest), rest.join(" ")),
        _ => return None,
    };
    let fact = fact.trim_end_matches(|c: char| c.is_ascii_punctuation()).trim().to_string();
    (!fact.is_empty()).then_some((fact, object))
}

fn is_subject(word: &str) -> bool {
    matches!(
        word.to_lowercase().replace('’', "'").as_str(),
        "i" | "i'm" | "im" | "i've" | "my" | "we" | "we're" | "we've"
    )
}

fn split_adverbs<'a, 'b>(words: &'b [&'a str]) -> (&'b [&'a str], &'b [&'a str]) {
    let n = words
        .iter()
        .take_while(|w| ADVERBS.contains(&w.to_lowercase().as_str()))
        .count();
    words.split_at(n)
}

fn third_person(verb: &str) -> String {
    let bytes = verb.as_bytes();
    let consonant_y = verb.len() > 1
        && verb.ends_with('y')
        && !matches!(bytes[bytes.len() - 2], b'a' | b'e' | b'i' | b'o' | b'u');
    if consonant_y {
        format!("{}ies", &verb[..verb.len() - 1])
    } else if ["s", "sh", "ch", "x", "z", "o"].iter().any(|s| verb.ends_with(s)) {
        format!("{verb}es")
    } else {
        format!("{verb}s")
    }
}

fn join(prefix: &[&str], head: &str, tail: &[&str]) -> String {
    prefix
        .iter()
        .copied()
        .chain(std::iter::once(head))
        .chain(tail.iter().copied())
        .collect::<Vec<_>>()
        .join(" ")
}

impl Summarizer for HeuristicSummarizer {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn summarize(&self, req: &SummarizeRequest<'_>) -> Result<SummaryOutput, BackendError> {
        let memory: Vec<&str> = req
            .memory
            .iter()
            .filter(|e| e.about == req.speaker)
            .map(|e| e.text.as_str())
            .collect();
        Ok(match heuristic_summarize(req.text, &memory) {
            Some(text) => SummaryOutput::Summary { text, about: req.speaker },
            None => SummaryOutput::NoSummary,
        })
    }
}

/// Replays the gold annotations of one episode.
#[derive(Debug, Clone)]
pub struct GoldSummarizer {
    annotations: HashMap<TurnRef, SummaryOutput>,
}

impl GoldSummarizer {
    pub fn from_episode(episode: &Episode) -> Self {
        let annotations = episode
            .sessions
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(move |a| {
                    let out = if a.is_no_summary {
                        SummaryOutput::NoSummary
                    } else {
                        SummaryOutput::Summary { text: a.text.clone(), about: a.about }
                    };
                    (TurnRef::new(s.index, a.source_turn), out)
                })
            })
            .collect();
        GoldSummarizer { annotations }
    }

    pub fn covers(&self, turn: TurnRef) -> bool {
        self.annotations.contains_key(&turn)
    }

    pub fn annotated_turns(&self) -> Vec<TurnRef> {
        let mut turns: Vec<TurnRef> = self.annotations.keys().copied().collect();
        turns.sort();
        turns
    }
}

impl Summarizer for GoldSummarizer {
    fn name(&self) -> &str {
        "gold-replay"
    }

    fn summarize(&self, req: &SummarizeRequest<'_>) -> Result<SummaryOutput, BackendError> {
        self.annotations
            .get(&req.turn)
            .cloned()
            .ok_or_else(|| BackendError::Failed(format!("no gold annotation for turn {}", req.turn)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_table() {
        let cases: &[(&str, Option<&str>)] = &[
            ("haha nice", None),
            ("yes, I agree!", None),
            ("I work as a nurse at night", Some("works as a nurse at night")),
            ("I just adopted a golden retriever", Some("just adopted a golden retriever")),
            ("I'm a chef in Boston.", Some("is a chef in Boston")),
            ("I am sorry to hear that", None),
            ("I'm fine, thanks", None),
            ("my dog is named Max", Some("their dog is named Max")),
            ("Do you like hiking?", None),
            ("That sounds fun. I have two cats!", Some("has two cats")),
            ("I study biology", Some("studies biology")),
            ("I watch movies", Some("watches movies")),
            ("We moved to Ohio last year", Some("we moved to Ohio last year")),
            ("Well I think so", None),
            ("I love it", None),
        ];
        for (input, expected) in cases {
            assert_eq!(
                heuristic_summarize(input, &[]).as_deref(),
                *expected,
                "input {input:?}"
            );
        }
    }

    #[test]
    fn repeated_fact_is_not_novel() {
        let first = heuristic_summarize("I work as a nurse at night", &[]).unwrap();
        assert_eq!(heuristic_summarize("I work as a nurse at night", &[first.as_str()]), None);
        // a new content word makes it novel again
        assert!(heuristic_summarize("I work as a nurse in Denver", &[first.as_str()]).is_some());
    }
}
