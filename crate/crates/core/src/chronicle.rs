//! Episodes, sessions, turns and summary annotations.
//!
//! An [`Episode`] is one long-term conversation between two personas. It is
//! made of [`Session`]s; every session after the first resumes after a
//! simulated [`TimeGap`]. Turn indices are positional: the n-th utterance of a
//! session has turn index n.
//!
//! The canonical on-disk format is one JSON object per line (see
//! [`to_canonical_line`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeakerId {
    SpeakerA,
    SpeakerB,
}

impl SpeakerId {
    pub const BOTH: [SpeakerId; 2] = [SpeakerId::SpeakerA, SpeakerId::SpeakerB];

    pub fn other(self) -> SpeakerId {
        match self {
            SpeakerId::SpeakerA => SpeakerId::SpeakerB,
            SpeakerId::SpeakerB => SpeakerId::SpeakerA,
        }
    }

    /// Short speaker tag used when rendering transcripts.
    pub fn tag(self) -> &'static str {
        match self {
            SpeakerId::SpeakerA => "S1",
            SpeakerId::SpeakerB => "S2",
        }
    }

    pub fn index(self) -> usize {
        match self {
            SpeakerId::SpeakerA => 0,
            SpeakerId::SpeakerB => 1,
        }
    }
}

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeakerId::SpeakerA => "SpeakerA",
            SpeakerId::SpeakerB => "SpeakerB",
        })
    }
}

impl std::str::FromStr for SpeakerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "speakera" | "a" | "s1" | "speaker 1" | "speaker_a" => Ok(SpeakerId::SpeakerA),
            "speakerb" | "b" | "s2" | "speaker 2" | "speaker_b" => Ok(SpeakerId::SpeakerB),
            other => Err(Error::invalid(format!("unknown speaker {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Hours,
    Days,
}

impl TimeUnit {
    fn hours(self) -> u64 {
        match self {
            TimeUnit::Hours => 1,
            TimeUnit::Days => 24,
        }
    }
}

/// Simulated elapsed time between two sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeGap {
    pub amount: u32,
    pub unit: TimeUnit,
}

impl TimeGap {
    pub fn new(amount: u32, unit: TimeUnit) -> Result<Self> {
        if amount == 0 {
            return Err(Error::invalid("time gap amount must be at least 1"));
        }
        Ok(TimeGap { amount, unit })
    }

    pub fn hours(amount: u32) -> Result<Self> {
        Self::new(amount, TimeUnit::Hours)
    }

    pub fn days(amount: u32) -> Result<Self> {
        Self::new(amount, TimeUnit::Days)
    }

    pub fn total_hours(&self) -> u64 {
        self.amount as u64 * self.unit.hours()
    }

    /// Collected data only uses gaps of 1-7 hours or 1-7 days.
    pub fn in_collection_range(&self) -> bool {
        (1..=7).contains(&self.amount)
    }
}

impl fmt::Display for TimeGap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match (self.unit, self.amount) {
            (TimeUnit::Hours, 1) => "hour",
            (TimeUnit::Hours, _) => "hours",
            (TimeUnit::Days, 1) => "day",
            (TimeUnit::Days, _) => "days",
        };
        write!(f, "{} {}", self.amount, unit)
    }
}

impl std::str::FromStr for TimeGap {
    type Err = Error;

    /// Parses `"3 days"`, `"1 hour"`, `"7h"`, `"2d"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s
            .find(|c: char| !c.is_ascii_digit())
            .ok_or_else(|| Error::invalid(format!("time gap {s:?} has no unit")))?;
        let amount: u32 = s[..split]
            .parse()
            .map_err(|_| Error::invalid(format!("time gap {s:?} has no amount")))?;
        let unit = match s[split..].trim().to_ascii_lowercase().as_str() {
            "h" | "hour" | "hours" => TimeUnit::Hours,
            "d" | "day" | "days" => TimeUnit::Days,
            other => return Err(Error::invalid(format!("unknown time unit {other:?}"))),
        };
        TimeGap::new(amount, unit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: SpeakerId,
    pub text: String,
}

/// A per-turn summary line, or the explicit no-summary marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryAnnotation {
    pub about: SpeakerId,
    pub source_turn: u32,
    pub text: String,
    pub is_no_summary: bool,
}

impl SummaryAnnotation {
    pub fn summary(about: SpeakerId, source_turn: u32, text: impl Into<String>) -> Self {
        SummaryAnnotation { about, source_turn, text: text.into(), is_no_summary: false }
    }

    pub fn no_summary(about: SpeakerId, source_turn: u32) -> Self {
        SummaryAnnotation { about, source_turn, text: String::new(), is_no_summary: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub index: u32,
    pub gap_before: Option<TimeGap>,
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub annotations: Vec<SummaryAnnotation>,
}

impl Session {
    pub fn annotation_for(&self, turn: u32) -> Option<&SummaryAnnotation> {
        self.annotations.iter().find(|a| a.source_turn == turn)
    }
}

/// Position of one utterance inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TurnRef {
    pub session: u32,
    pub turn: u32,
}

impl TurnRef {
    pub fn new(session: u32, turn: u32) -> Self {
        TurnRef { session, turn }
    }
}

impl fmt::Display for TurnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}t{}", self.session, self.turn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub personas: [Vec<String>; 2],
    pub sessions: Vec<Session>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Creates an empty episode with an engine-generated id.
pub fn new_episode(persona_a: Vec<String>, persona_b: Vec<String>) -> Result<Episode> {
    if persona_a.is_empty() || persona_b.is_empty() {
        return Err(Error::invalid("both persona lists must be nonempty"));
    }
    Ok(Episode {
        id: uuid::Uuid::new_v4().to_string(),
        personas: [persona_a, persona_b],
        sessions: Vec::new(),
        metadata: BTreeMap::new(),
    })
}

impl Episode {
    pub fn persona(&self, speaker: SpeakerId) -> &[String] {
        &self.personas[speaker.index()]
    }

    pub fn session(&self, index: u32) -> Option<&Session> {
        index
            .checked_sub(1)
            .and_then(|i| self.sessions.get(i as usize))
            .filter(|s| s.index == index)
            .or_else(|| self.sessions.iter().find(|s| s.index == index))
    }

    fn session_mut(&mut self, index: u32) -> Option<&mut Session> {
        self.sessions.iter_mut().find(|s| s.index == index)
    }

    pub fn latest_session(&self) -> Option<&Session> {
        self.sessions.last()
    }

    pub fn utterance(&self, turn: TurnRef) -> Option<&Utterance> {
        self.session(turn.session)?.utterances.get(turn.turn as usize)
    }

    pub fn utterance_count(&self) -> usize {
        self.sessions.iter().map(|s| s.utterances.len()).sum()
    }

    /// Appends a new session. The gap must be absent exactly for session 1.
    pub fn open_session(&mut self, gap: Option<TimeGap>) -> Result<u32> {
        let index = self.sessions.last().map_or(1, |s| s.index + 1);
        match (index, gap) {
            (1, Some(_)) => return Err(Error::protocol("session 1 cannot have a time gap")),
            (i, None) if i > 1 => {
                return Err(Error::protocol(format!("session {i} requires a time gap")))
            }
            (_, Some(g)) if !g.in_collection_range() => {
                tracing::warn!(episode = %self.id, gap = %g, "time gap outside the 1-7 range");
            }
            _ => {}
        }
        self.sessions.push(Session {
            index,
            gap_before: gap,
            utterances: Vec::new(),
            annotations: Vec::new(),
        });
        Ok(index)
    }

    /// Appends an utterance to the latest session.
    pub fn append_utterance(
        &mut self,
        session: u32,
        speaker: SpeakerId,
        text: impl Into<String>,
    ) -> Result<TurnRef> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("utterance text is empty"));
        }
        let latest = self
            .sessions
            .last_mut()
            .ok_or_else(|| Error::protocol("episode has no open session"))?;
        if latest.index != session {
            return Err(Error::protocol(format!(
                "session {session} is not the latest session ({})",
                latest.index
            )));
        }
        let turn = latest.utterances.len() as u32;
        latest.utterances.push(Utterance { speaker, text });
        Ok(TurnRef { session, turn })
    }

    /// Attaches a summary annotation to an existing turn (at most one per turn).
    pub fn annotate(&mut self, turn: TurnRef, annotation: SummaryAnnotation) -> Result<()> {
        if annotation.is_no_summary && !annotation.text.is_empty() {
            return Err(Error::invalid("no-summary annotation must have empty text"));
        }
        if !annotation.is_no_summary && annotation.text.trim().is_empty() {
            return Err(Error::invalid("summary annotation text is empty"));
        }
        let session = self
            .session_mut(turn.session)
            .ok_or_else(|| Error::NotFound(format!("session {}", turn.session)))?;
        if turn.turn as usize >= session.utterances.len() {
            return Err(Error::NotFound(format!("turn {turn}")));
        }
        if session.annotation_for(turn.turn).is_some() {
            return Err(Error::protocol(format!("turn {turn} is already annotated")));
        }
        session.annotations.push(SummaryAnnotation { source_turn: turn.turn, ..annotation });
        Ok(())
    }

    /// Gap between session `index` and the one before it.
    pub fn gap_before(&self, index: u32) -> Option<TimeGap> {
        self.session(index).and_then(|s| s.gap_before)
    }

    /// Hours elapsed from the start of session `from` to the start of session
    /// `to`, summing the gaps of the sessions in between.
    pub fn hours_between(&self, from: u32, to: u32) -> u64 {
        (from + 1..=to)
            .filter_map(|i| self.gap_before(i))
            .map(|g| g.total_hours())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    PersonaCount,
    NonContiguousSessions,
    GapOnFirstSession,
    MissingGap,
    GapOutOfRange,
    EmptySession,
    EmptyUtterance,
    NonAlternatingSpeakers,
    AnnotationOutOfRange,
    DuplicateAnnotation,
    MalformedAnnotation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub level: Level,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.level == Level::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.level == Level::Warning)
    }

    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }

    fn push(&mut self, level: Level, kind: ViolationKind, message: String) {
        self.violations.push(Violation { level, kind, message });
    }
}

/// Checks the structural conventions of an episode. Never fails; problems are
/// reported as error- or warning-level violations.
pub fn validate_episode(episode: &Episode) -> ValidationReport {
    use Level::*;
    use ViolationKind::*;

    let mut report = ValidationReport::default();
    for (i, persona) in episode.personas.iter().enumerate() {
        if persona.is_empty() {
            report.push(Warning, PersonaCount, format!("persona list {i} is empty"));
        }
    }

    let last = episode.sessions.len();
    for (pos, session) in episode.sessions.iter().enumerate() {
        let expected = pos as u32 + 1;
        if session.index != expected {
            report.push(
                Error,
                NonContiguousSessions,
                format!("session at position {pos} has index {}, expected {expected}", session.index),
            );
        }
        match (session.index, session.gap_before) {
            (1, Some(_)) => {
                report.push(Error, GapOnFirstSession, "session 1 has a time gap".into())
            }
            (i, None) if i > 1 => {
                report.push(Error, MissingGap, format!("session {i} has no time gap"))
            }
            (i, Some(g)) if !g.in_collection_range() => report.push(
                Warning,
                GapOutOfRange,
                format!("session {i} gap {g} is outside 1-7"),
            ),
            _ => {}
        }
        if session.utterances.is_empty() {
            // The latest session may still be open.
            let level = if pos + 1 == last { Warning } else { Error };
            report.push(level, EmptySession, format!("session {} has no utterances", session.index));
        }
        for (t, u) in session.utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                report.push(
                    Error,
                    EmptyUtterance,
                    format!("session {} turn {t} is empty", session.index),
                );
            }
        }
        for (t, pair) in session.utterances.windows(2).enumerate() {
            if pair[0].speaker == pair[1].speaker {
                report.push(
                    Warning,
                    NonAlternatingSpeakers,
                    format!(
                        "session {} turns {t} and {} are both by {}",
                        session.index,
                        t + 1,
                        pair[0].speaker
                    ),
                );
            }
        }
        let mut seen = std::collections::HashSet::new();
        for a in &session.annotations {
            if a.source_turn as usize >= session.utterances.len() {
                report.push(
                    Error,
                    AnnotationOutOfRange,
                    format!("session {} annotation refers to turn {}", session.index, a.source_turn),
                );
            }
            if !seen.insert(a.source_turn) {
                report.push(
                    Error,
                    DuplicateAnnotation,
                    format!("session {} turn {} annotated twice", session.index, a.source_turn),
                );
            }
            let malformed = if a.is_no_summary {
                !a.text.is_empty()
            } else {
                a.text.trim().is_empty()
            };
            if malformed {
                report.push(
                    Error,
                    MalformedAnnotation,
                    format!(
                        "session {} turn {}: no-summary flag inconsistent with text",
                        session.index, a.source_turn
                    ),
                );
            }
        }
    }
    report
}

/// Serializes an episode as one canonical JSON line (no trailing newline).
pub fn to_canonical_line(episode: &Episode) -> String {
    serde_json::to_string(episode).expect("episode serialization is infallible")
}

pub fn from_canonical_line(line: &str) -> Result<Episode> {
    Ok(serde_json::from_str(line)?)
}

pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    episodes: impl IntoIterator<Item = &'a Episode>,
) -> Result<()> {
    for e in episodes {
        out.write_all(to_canonical_line(e).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Episode>> {
    let mut episodes = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let episode = from_canonical_line(&line)
            .map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?;
        episodes.push(episode);
    }
    Ok(episodes)
}

pub fn save_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), episodes)
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path)?;
    read_jsonl(BufReader::new(file))
}

/// Thread-safe episode store. Mutations of one episode are serialized and
/// applied atomically; readers get consistent snapshots.
#[derive(Debug, Default)]
pub struct EpisodeStore {
    episodes: RwLock<HashMap<String, Arc<Mutex<Episode>>>>,
}

impl EpisodeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, episode: Episode) -> Result<String> {
        let mut map = self.episodes.write();
        if map.contains_key(&episode.id) {
            return Err(Error::protocol(format!("episode {} already exists", episode.id)));
        }
        let id = episode.id.clone();
        map.insert(id.clone(), Arc::new(Mutex::new(episode)));
        Ok(id)
    }

    pub fn create(&self, persona_a: Vec<String>, persona_b: Vec<String>) -> Result<String> {
        self.insert(new_episode(persona_a, persona_b)?)
    }

    pub fn snapshot(&self, id: &str) -> Option<Episode> {
        let entry = self.episodes.read().get(id).cloned()?;
        let episode = entry.lock().clone();
        Some(episode)
    }

    /// Runs `f` on a working copy and commits it only if `f` succeeds.
    pub fn update<T>(&self, id: &str, f: impl FnOnce(&mut Episode) -> Result<T>) -> Result<T> {
        let entry = self
            .episodes
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("episode {id}")))?;
        let mut guard = entry.lock();
        let mut working = guard.clone();
        let out = f(&mut working)?;
        *guard = working;
        Ok(out)
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.episodes.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.episodes.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All episodes ordered by id.
    pub fn snapshot_all(&self) -> Vec<Episode> {
        self.ids().iter().filter_map(|id| self.snapshot(id)).collect()
    }
}
