//! Context construction: which long-term material goes in front of the
//! current session, how it is rendered, and how it is cut to the model's
//! token budget.
//!
//! A rendered context is, in order:
//! 1. long-term material chosen by [`ContextSource`] (previous sessions'
//!    dialogue, gold summaries or predicted memory), optionally restricted by
//!    [`MemoryFilter`] and prefixed with time features such as `[7 days ago]`;
//! 2. the current session's dialogue before the response position.
//!
//! The result is left-truncated: the oldest tokens are dropped first, so the
//! kept text is always a suffix of the full rendering.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::Tokenizer;
use crate::chronicle::{Episode, SpeakerId, TurnRef};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    None,
    DialogueHistory,
    GoldSummary,
    PredictedSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    TruncateOnly,
    Rag,
    Fid,
    FidRag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryFilter {
    Both,
    SelfOnly,
    PartnerOnly,
}

impl MemoryFilter {
    /// Whether a fact about `about` passes the filter for a reader `perspective`.
    pub fn admits(self, about: SpeakerId, perspective: SpeakerId) -> bool {
        match self {
            MemoryFilter::Both => true,
            MemoryFilter::SelfOnly => about == perspective,
            MemoryFilter::PartnerOnly => about != perspective,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Utterance,
    Session,
}

macro_rules! snake_case_enum_str {
    ($ty:ty, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
                    .map_err(|_| Error::invalid(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match serde_json::to_value(self) {
                    Ok(serde_json::Value::String(s)) => f.write_str(&s),
                    _ => Err(fmt::Error),
                }
            }
        }
    };
}

snake_case_enum_str!(ContextSource, "context source");
snake_case_enum_str!(Augmentation, "augmentation");
snake_case_enum_str!(MemoryFilter, "memory filter");
snake_case_enum_str!(Granularity, "granularity");

/// The full recipe for building a model input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    /// Row label in reports; derived from the settings when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub context_source: ContextSource,
    /// Token budget `L`.
    pub truncation: usize,
    pub augmentation: Augmentation,
    /// Documents kept after retrieval (`N`).
    pub n_docs: usize,
    pub memory_filter: MemoryFilter,
    pub time_features: bool,
    pub granularity: Granularity,
    /// Only the most recent k previous sessions are available as history.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history_sessions: Option<u32>,
}

pub const STANDARD_TRUNCATIONS: [usize; 4] = [128, 256, 512, 1024];

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            name: None,
            context_source: ContextSource::PredictedSummary,
            truncation: 1024,
            augmentation: Augmentation::TruncateOnly,
            n_docs: 5,
            memory_filter: MemoryFilter::Both,
            time_features: true,
            granularity: Granularity::Session,
            history_sessions: None,
        }
    }
}

impl StrategyConfig {
    pub fn with_source(source: ContextSource) -> Self {
        StrategyConfig { context_source: source, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.truncation == 0 {
            return Err(Error::invalid("truncation length must be at least 1"));
        }
        if self.augmentation != Augmentation::TruncateOnly && self.n_docs == 0 {
            return Err(Error::invalid("retrieval needs n_docs >= 1"));
        }
        if self.history_sessions == Some(0) {
            return Err(Error::invalid("history_sessions must be at least 1 when set"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let mut label = format!("{}/L{}", self.context_source, self.truncation);
        if self.augmentation != Augmentation::TruncateOnly {
            label += &format!("/{}-N{}-{}", self.augmentation, self.n_docs, self.granularity);
        }
        if self.memory_filter != MemoryFilter::Both {
            label += &format!("/{}", self.memory_filter);
        }
        if !self.time_features {
            label += "/no-time";
        }
        if let Some(k) = self.history_sessions {
            label += &format!("/hist{k}");
        }
        label
    }

    /// First previous session visible from `session` under `history_sessions`.
    pub(crate) fn first_visible_session(&self, session: u32) -> u32 {
        match self.history_sessions {
            Some(k) => session.saturating_sub(k).max(1),
            None => 1,
        }
    }
}

/// The response being predicted: position in the episode and who speaks.
/// The context covers everything before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResponseSlot {
    pub session: u32,
    pub turn: u32,
    pub speaker: SpeakerId,
}

impl ResponseSlot {
    /// Slot of an existing utterance.
    pub fn at(episode: &Episode, turn: TurnRef) -> Option<Self> {
        let u = episode.utterance(turn)?;
        Some(ResponseSlot { session: turn.session, turn: turn.turn, speaker: u.speaker })
    }

    pub fn turn_ref(&self) -> TurnRef {
        TurnRef::new(self.session, self.turn)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub text: String,
    pub token_count: usize,
    pub truncated: bool,
    pub dropped_tokens: usize,
}

pub fn count_tokens(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(text)
}

/// Keeps the last `limit` tokens. Returns the kept suffix and how many tokens
/// were dropped from the front.
pub fn truncate_left<T>(tokens: &[T], limit: usize) -> (&[T], usize) {
    let dropped = tokens.len().saturating_sub(limit);
    (&tokens[dropped..], dropped)
}

/// Left-truncates `text` to `limit` tokens, cutting at a token boundary so the
/// kept text is a suffix of the input.
pub fn truncate_text(text: &str, limit: usize, tokenizer: &dyn Tokenizer) -> ContextDoc {
    let spans = tokenizer.spans(text);
    let (kept, dropped) = truncate_left(&spans, limit);
    let text = match (dropped, kept.first()) {
        (0, _) => text.to_string(),
        (_, Some(first)) => text[first.start..].to_string(),
        (_, None) => String::new(),
    };
    ContextDoc { text, token_count: kept.len(), truncated: dropped > 0, dropped_tokens: dropped }
}

/// Human-readable elapsed time, e.g. `3 days` or `5 hours`.
pub fn elapsed_label(hours: u64) -> String {
    match hours {
        0 => "0 hours".into(),
        1 => "1 hour".into(),
        h if h < 24 => format!("{h} hours"),
        h if h < 48 => "1 day".into(),
        h => format!("{} days", h / 24),
    }
}

/// Time-feature line prefix, e.g. `[7 days ago] `.
pub fn time_prefix(hours: u64) -> String {
    format!("[{} ago] ", elapsed_label(hours))
}

/// Lines of the current session before the response position.
pub fn current_session_lines(episode: &Episode, slot: &ResponseSlot) -> Vec<String> {
    episode
        .session(slot.session)
        .map(|s| {
            s.utterances
                .iter()
                .take(slot.turn as usize)
                .map(|u| format!("{}: {}", u.speaker.tag(), u.text))
                .collect()
        })
        .unwrap_or_default()
}

/// Transcript lines of the previous sessions visible from `slot`, each with a
/// time prefix when `time_features` is set.
pub fn dialogue_history_lines(episode: &Episode, slot: &ResponseSlot, cfg: &StrategyConfig) -> Vec<String> {
    let first = cfg.first_visible_session(slot.session);
    episode
        .sessions
        .iter()
        .filter(|s| s.index >= first && s.index < slot.session)
        .flat_map(|s| {
            let prefix = if cfg.time_features {
                time_prefix(episode.hours_between(s.index, slot.session))
            } else {
                String::new()
            };
            s.utterances
                .iter()
                .map(move |u| format!("{prefix}{}: {}", u.speaker.tag(), u.text))
        })
        .collect()
}

/// Long-term lines for the configured source. `memory` is the predicted
/// memory of the episode and is required for `predicted_summary`.
pub fn long_term_lines(
    episode: &Episode,
    slot: &ResponseSlot,
    cfg: &StrategyConfig,
    memory: Option<&[MemoryEntry]>,
) -> Result<Vec<String>> {
    let summary_lines = |entries: &[MemoryEntry]| {
        let first = cfg.first_visible_session(slot.session);
        let visible: Vec<&MemoryEntry> = memory::visible_entries(
            entries,
            cfg.memory_filter,
            slot.speaker,
            slot.session,
        )
        .into_iter()
        .filter(|e| e.source.session >= first)
        .collect();
        memory::summary_lines(&visible, episode, slot.session, slot.speaker, cfg.time_features)
    };
    Ok(match cfg.context_source {
        ContextSource::None => Vec::new(),
        ContextSource::DialogueHistory => dialogue_history_lines(episode, slot, cfg),
        ContextSource::GoldSummary => summary_lines(&memory::gold_entries(episode)),
        ContextSource::PredictedSummary => {
            let entries = memory.ok_or_else(|| {
                Error::invalid("predicted_summary context needs the episode's memory")
            })?;
            summary_lines(entries)
        }
    })
}

/// Full rendering before truncation.
pub fn render_untruncated(
    episode: &Episode,
    slot: &ResponseSlot,
    cfg: &StrategyConfig,
    memory: Option<&[MemoryEntry]>,
) -> Result<String> {
    let mut lines = long_term_lines(episode, slot, cfg, memory)?;
    lines.extend(current_session_lines(episode, slot));
    Ok(lines.join("\n"))
}

/// Renders and left-truncates the context preceding `slot`.
pub fn render_context(
    episode: &Episode,
    slot: &ResponseSlot,
    cfg: &StrategyConfig,
    tokenizer: &dyn Tokenizer,
    memory: Option<&[MemoryEntry]>,
) -> Result<ContextDoc> {
    cfg.validate()?;
    if episode.session(slot.session).is_none() {
        return Err(Error::NotFound(format!("session {}", slot.session)));
    }
    let full = render_untruncated(episode, slot, cfg, memory)?;
    Ok(truncate_text(&full, cfg.truncation, tokenizer))
}

/// Predicted memory per episode id.
pub type MemoryViews = HashMap<String, Vec<MemoryEntry>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTruncation {
    pub responses: usize,
    pub truncated: usize,
    pub dropped_tokens: usize,
}

impl SessionTruncation {
    /// Percentage of response positions whose context was truncated.
    pub fn percent(&self) -> f64 {
        if self.responses == 0 {
            0.0
        } else {
            100.0 * self.truncated as f64 / self.responses as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub label: String,
    pub truncation: usize,
    pub sessions: BTreeMap<u32, SessionTruncation>,
}

/// Per session, the share of response positions whose rendered context
/// exceeded the budget, plus the dropped-token totals.
pub fn truncation_report(
    episodes: &[Episode],
    cfg: &StrategyConfig,
    tokenizer: &dyn Tokenizer,
    memories: Option<&MemoryViews>,
) -> Result<TruncationReport> {
    if episodes.is_empty() {
        return Err(Error::invalid("no episodes to report on"));
    }
    let mut sessions: BTreeMap<u32, SessionTruncation> = BTreeMap::new();
    for episode in episodes {
        let memory = memories.and_then(|m| m.get(&episode.id)).map(Vec::as_slice);
        for session in &episode.sessions {
            for (t, u) in session.utterances.iter().enumerate() {
                let slot = ResponseSlot { session: session.index, turn: t as u32, speaker: u.speaker };
                let doc = render_context(episode, &slot, cfg, tokenizer, memory)?;
                let row = sessions.entry(session.index).or_default();
                row.responses += 1;
                row.truncated += doc.truncated as usize;
                row.dropped_tokens += doc.dropped_tokens;
            }
        }
    }
    Ok(TruncationReport { label: cfg.label(), truncation: cfg.truncation, sessions })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityCheck {
    pub ok: bool,
    pub truncation: usize,
    /// Positions inherited unchanged from the base model.
    pub frozen_base: Range<usize>,
    /// Newly added positions that must be trained.
    pub trained_extension: Range<usize>,
}

/// Whether a model whose positional table was extended from `base` to
/// `extended` positions can encode `truncation` tokens.
pub fn check_position_capacity(truncation: usize, base: usize, extended: usize) -> Result<CapacityCheck> {
    if base == 0 || extended == 0 || truncation == 0 {
        return Err(Error::invalid("capacities and truncation must be positive"));
    }
    if extended < base {
        return Err(Error::invalid("extended capacity cannot be below the base capacity"));
    }
    Ok(CapacityCheck {
        ok: truncation <= extended,
        truncation,
        frozen_base: 0..base,
        trained_extension: base..extended,
    })
}

pub const BASE_POSITIONS: usize = 128;
