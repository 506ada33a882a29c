//! Long-term memory: per-turn summarize-or-skip writes into an append-only,
//! speaker-attributed store.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backends::{SummarizeRequest, Summarizer, SummaryOutput};
use crate::chronicle::{Episode, SpeakerId, TurnRef};
use crate::context::{time_prefix, Granularity, MemoryFilter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub about: SpeakerId,
    pub text: String,
    pub source: TurnRef,
    pub written_at_session: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl MemoryEntry {
    pub fn new(about: SpeakerId, text: impl Into<String>, source: TurnRef) -> Self {
        MemoryEntry { about, text: text.into(), source, written_at_session: source.session, embedding: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WriteDecision {
    Wrote(MemoryEntry),
    Skipped,
}

impl WriteDecision {
    pub fn wrote(&self) -> bool {
        matches!(self, WriteDecision::Wrote(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    episode_id: String,
    entries: Vec<MemoryEntry>,
    processed: BTreeSet<TurnRef>,
}

impl MemoryStore {
    pub fn new(episode_id: impl Into<String>) -> Self {
        MemoryStore { episode_id: episode_id.into(), entries: Vec::new(), processed: BTreeSet::new() }
    }

    pub fn episode_id(&self) -> &str {
        &self.episode_id
    }

    /// All entries in write order.
    pub fn all(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn turns_processed(&self) -> usize {
        self.processed.len()
    }

    pub fn entries_written(&self) -> usize {
        self.entries.len()
    }

    pub fn is_processed(&self, turn: TurnRef) -> bool {
        self.processed.contains(&turn)
    }

    /// Asks the summarizer about `turn` and stores the summary, if any. A
    /// backend failure leaves the store untouched so the turn can be retried.
    pub fn write_turn(
        &mut self,
        episode: &Episode,
        turn: TurnRef,
        summarizer: &dyn Summarizer,
    ) -> Result<WriteDecision> {
        if episode.id != self.episode_id {
            return Err(Error::invalid(format!(
                "turn belongs to episode {}, store is for {}",
                episode.id, self.episode_id
            )));
        }
        let session = episode
            .session(turn.session)
            .ok_or_else(|| Error::NotFound(format!("turn {turn}")))?;
        let utterance = session
            .utterances
            .get(turn.turn as usize)
            .ok_or_else(|| Error::NotFound(format!("turn {turn}")))?;
        if self.processed.contains(&turn) {
            return Err(Error::protocol(format!("turn {turn} was already processed")));
        }
        let request = SummarizeRequest {
            turn,
            speaker: utterance.speaker,
            text: &utterance.text,
            history: &session.utterances[..=turn.turn as usize],
            memory: &self.entries,
        };
        let decision = match summarizer.summarize(&request)? {
            SummaryOutput::Summary { text, about } if !text.trim().is_empty() => {
                let entry = MemoryEntry::new(about, text.trim(), turn);
                self.entries.push(entry.clone());
                WriteDecision::Wrote(entry)
            }
            _ => WriteDecision::Skipped,
        };
        self.processed.insert(turn);
        Ok(decision)
    }

    /// Processes every turn of the episode not yet seen, in order.
    pub fn catch_up(&mut self, episode: &Episode, summarizer: &dyn Summarizer) -> Result<usize> {
        let mut written = 0;
        for s in &episode.sessions {
            for t in 0..s.utterances.len() as u32 {
                let turn = TurnRef::new(s.index, t);
                if !self.is_processed(turn) {
                    written += self.write_turn(episode, turn, summarizer)?.wrote() as usize;
                }
            }
        }
        Ok(written)
    }

    pub fn sparsity(&self) -> Result<f64> {
        if self.processed.is_empty() {
            return Err(Error::invalid("sparsity is undefined before any turn is processed"));
        }
        Ok(self.entries.len() as f64 / self.processed.len() as f64)
    }

    /// Entries passing `filter` for `perspective`, written before `up_to_session`.
    pub fn entries(&self, filter: MemoryFilter, perspective: SpeakerId, up_to_session: u32) -> Vec<&MemoryEntry> {
        visible_entries(&self.entries, filter, perspective, up_to_session)
    }

    pub fn export_jsonl<W: Write>(&self, out: W) -> Result<()> {
        export_entries(&self.entries, out)
    }
}

pub fn export_entries<W: Write>(entries: &[MemoryEntry], mut out: W) -> Result<()> {
    for e in entries {
        let line = MemoryEntry { embedding: None, ..e.clone() };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn import_entries<R: BufRead>(input: R) -> Result<Vec<MemoryEntry>> {
    let mut entries = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: MemoryEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if entry.text.trim().is_empty() {
            return Err(Error::Parse { line: i + 1, message: "empty memory text".into() });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Order-preserving filter that also drops anything written at or after
/// `up_to_session`.
pub fn visible_entries(
    entries: &[MemoryEntry],
    filter: MemoryFilter,
    perspective: SpeakerId,
    up_to_session: u32,
) -> Vec<&MemoryEntry> {
    entries
        .iter()
        .filter(|e| e.written_at_session < up_to_session && filter.admits(e.about, perspective))
        .collect()
}

/// The gold annotations of an episode as memory, in turn order.
pub fn gold_entries(episode: &Episode) -> Vec<MemoryEntry> {
    episode
        .sessions
        .iter()
        .flat_map(|s| {
            let mut annotations: Vec<_> = s.annotations.iter().filter(|a| !a.is_no_summary).collect();
            annotations.sort_by_key(|a| a.source_turn);
            annotations
                .into_iter()
                .map(|a| MemoryEntry::new(a.about, a.text.clone(), TurnRef::new(s.index, a.source_turn)))
        })
        .collect()
}

fn persona_label(about: SpeakerId, perspective: SpeakerId) -> &'static str {
    if about == perspective {
        "your persona"
    } else {
        "partner's persona"
    }
}

/// One rendered line per entry, grouped by session oldest first and, within a
/// session, the reader's own facts before the partner's.
pub fn summary_lines(
    entries: &[&MemoryEntry],
    episode: &Episode,
    current_session: u32,
    perspective: SpeakerId,
    time_features: bool,
) -> Vec<String> {
    let mut sorted: Vec<&MemoryEntry> = entries.to_vec();
    sorted.sort_by_key(|e| (e.source.session, e.about != perspective));
    sorted
        .into_iter()
        .map(|e| {
            let prefix = if time_features {
                time_prefix(episode.hours_between(e.source.session, current_session))
            } else {
                String::new()
            };
            format!("{prefix}{}: {}", persona_label(e.about, perspective), e.text)
        })
        .collect()
}

/// Memory as retrievable documents: one per session group or one per entry.
/// Returns `(session, text)` pairs.
pub fn render_memory(
    entries: &[&MemoryEntry],
    granularity: Granularity,
    time_features: bool,
    episode: &Episode,
    current_session: u32,
    perspective: SpeakerId,
) -> Vec<(u32, String)> {
    let lines = |group: &[&MemoryEntry]| summary_lines(group, episode, current_session, perspective, time_features);
    match granularity {
        Granularity::Utterance => entries
            .iter()
            .map(|e| (e.source.session, lines(&[*e]).remove(0)))
            .collect(),
        Granularity::Session => {
            let sessions: BTreeSet<u32> = entries.iter().map(|e| e.source.session).collect();
            sessions
                .into_iter()
                .map(|s| {
                    let group: Vec<&MemoryEntry> =
                        entries.iter().copied().filter(|e| e.source.session == s).collect();
                    (s, lines(&group).join("\n"))
                })
                .collect()
        }
    }
}
