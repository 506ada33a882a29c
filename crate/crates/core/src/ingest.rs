//! MSC release loading, dataset statistics and summarizer training data.
//!
//! The adapter (`msc-v1`) reads one JSON object per line. Each line is one
//! episode whose final session is `dialog`; earlier sessions come from
//! `previous_dialogs` in order. Recognized fields:
//!
//! - `personas`: two lists of persona sentences (`init_personas` as fallback)
//! - `dialog[]`: `{id, text, persona_text?}`; `id` is `"Speaker 1"` / `"Speaker 2"`,
//!   anything else falls back to position parity
//! - `persona_text`: the turn's summary line; `""` or `"no_summary"` marks an
//!   explicit no-summary turn, absence means unannotated
//! - `previous_dialogs[k]`: `{dialog, time_num?, time_unit?}`; the time fields of
//!   entry `k >= 1` are the gap before that session
//! - top-level `time_num` / `time_unit`: the gap before the final session
//! - `metadata.initial_data_id`: base of the episode id
//!
//! All remaining top-level fields land in the episode metadata.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backends::Tokenizer;
use crate::chronicle::{Episode, Session, SpeakerId, SummaryAnnotation, TimeGap, TimeUnit, Utterance};
use crate::error::{Error, Result};

pub const ADAPTER_VERSION: &str = "msc-v1";
pub const NO_SUMMARY_LABEL: &str = "no_summary";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Valid => "valid.txt",
            Split::Test => "test.txt",
        }
    }
}

/// Loads a split from a single JSONL file or from an MSC release directory
/// containing `session_k/{split}.txt`.
pub fn load_msc(path: impl AsRef<Path>, split: &str) -> Result<Vec<Episode>> {
    let split: Split = split.parse()?;
    let path = path.as_ref();
    if path.is_file() {
        return read_msc_file(path);
    }
    let mut files: Vec<(u32, PathBuf)> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let k: u32 = name.strip_prefix("session_")?.parse().ok()?;
            let file = e.path().join(split.file_name());
            file.is_file().then_some((k, file))
        })
        .collect();
    if files.is_empty() {
        return Err(Error::NotFound(format!(
            "no session_k/{} under {}",
            split.file_name(),
            path.display()
        )));
    }
    files.sort();
    let mut episodes = Vec::new();
    for (_, file) in files {
        episodes.extend(read_msc_file(&file)?);
    }
    Ok(episodes)
}

pub fn read_msc_file(path: &Path) -> Result<Vec<Episode>> {
    let file = File::open(path)?;
    read_msc(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, message } => {
            Error::Parse { line, message: format!("{}: {message}", path.display()) }
        }
        other => other,
    })
}

pub fn read_msc<R: BufRead>(input: R) -> Result<Vec<Episode>> {
    let mut episodes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let record: Map<String, Value> =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        episodes.push(parse_record(record, i + 1).map_err(parse_err)?);
    }
    Ok(episodes)
}

fn parse_record(mut record: Map<String, Value>, line: usize) -> std::result::Result<Episode, String> {
    let personas = parse_personas(record.remove("personas").or_else(|| record.remove("init_personas")))?;
    let dialog = record.remove("dialog").ok_or("missing field `dialog`")?;
    let final_gap = parse_gap(record.remove("time_num"), record.remove("time_unit"))?;
    let previous = match record.remove("previous_dialogs") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items,
        Some(_) => return Err("`previous_dialogs` must be an array".into()),
    };

    let mut sessions = Vec::new();
    for (k, prev) in previous.into_iter().enumerate() {
        let Value::Object(mut prev) = prev else {
            return Err(format!("previous_dialogs[{k}] must be an object"));
        };
        let gap = parse_gap(prev.remove("time_num"), prev.remove("time_unit"))?;
        let gap = if k == 0 { None } else { Some(gap.ok_or(format!("previous_dialogs[{k}] has no time gap"))?) };
        let turns = prev.remove("dialog").ok_or(format!("previous_dialogs[{k}] has no dialog"))?;
        sessions.push(parse_session(k as u32 + 1, gap, turns)?);
    }
    let index = sessions.len() as u32 + 1;
    let gap = if index == 1 { None } else { Some(final_gap.ok_or("final session has no time gap")?) };
    sessions.push(parse_session(index, gap, dialog)?);

    let mut metadata: BTreeMap<String, Value> = record.into_iter().collect();
    let base = metadata
        .get("metadata")
        .and_then(|m| m.get("initial_data_id"))
        .and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        })
        .unwrap_or_else(|| format!("line{line}"));
    metadata.insert("adapter".into(), Value::String(ADAPTER_VERSION.into()));
    Ok(Episode { id: format!("{base}-s{index}"), personas, sessions, metadata })
}

fn parse_personas(v: Option<Value>) -> std::result::Result<[Vec<String>; 2], String> {
    let lists: Vec<Vec<String>> = match v {
        None | Some(Value::Null) => return Ok([Vec::new(), Vec::new()]),
        Some(v) => serde_json::from_value(v).map_err(|e| format!("bad personas: {e}"))?,
    };
    match <[Vec<String>; 2]>::try_from(lists) {
        Ok(pair) => Ok(pair),
        Err(lists) => Err(format!("expected 2 persona lists, got {}", lists.len())),
    }
}

fn parse_gap(num: Option<Value>, unit: Option<Value>) -> std::result::Result<Option<TimeGap>, String> {
    let (num, unit) = match (num, unit) {
        (None | Some(Value::Null), None | Some(Value::Null)) => return Ok(None),
        (Some(n), Some(Value::String(u))) => (n, u),
        _ => return Err("time_num and time_unit must appear together".into()),
    };
    let amount = num
        .as_u64()
        .or_else(|| num.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64))
        .ok_or_else(|| format!("bad time_num {num}"))?;
    let unit = match u_singular(&unit) {
        "hour" => TimeUnit::Hours,
        "day" => TimeUnit::Days,
        other => return Err(format!("unsupported time_unit {other:?}")),
    };
    TimeGap::new(amount as u32, unit).map(Some).map_err(|e| e.to_string())
}

fn u_singular(unit: &str) -> &str {
    let unit = unit.trim();
    unit.strip_suffix('s').unwrap_or(unit)
}

fn parse_session(index: u32, gap: Option<TimeGap>, turns: Value) -> std::result::Result<Session, String> {
    let Value::Array(turns) = turns else {
        return Err(format!("session {index} dialog must be an array"));
    };
    let mut utterances = Vec::with_capacity(turns.len());
    let mut annotations = Vec::new();
    for (t, turn) in turns.into_iter().enumerate() {
        let Value::Object(turn) = turn else {
            return Err(format!("session {index} turn {t} must be an object"));
        };
        let text = turn
            .get("text")
            .and_then(Value::as_str)
            .ok_or(format!("session {index} turn {t} has no text"))?
            .to_string();
        let parity = if t % 2 == 0 { SpeakerId::SpeakerA } else { SpeakerId::SpeakerB };
        let speaker = turn
            .get("id")
            .and_then(Value::as_str)
            .and_then(|id| id.parse::<SpeakerId>().ok())
            .unwrap_or(parity);
        match turn.get("persona_text") {
            None | Some(Value::Null) => {}
            Some(Value::String(s)) if s.trim().is_empty() || s.trim() == NO_SUMMARY_LABEL => {
                annotations.push(SummaryAnnotation::no_summary(speaker, t as u32));
            }
            Some(Value::String(s)) => {
                annotations.push(SummaryAnnotation::summary(speaker, t as u32, s.trim()));
            }
            Some(_) => return Err(format!("session {index} turn {t}: persona_text must be a string")),
        }
        utterances.push(Utterance { speaker, text });
    }
    Ok(Session { index, gap_before: gap, utterances, annotations })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCounts {
    pub episodes: usize,
    pub utterances: usize,
    pub summaries: usize,
}

impl std::ops::AddAssign for SessionCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.episodes += rhs.episodes;
        self.utterances += rhs.utterances;
        self.summaries += rhs.summaries;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub tokenizer: String,
    /// Keyed by session index; `episodes` counts episodes reaching that session.
    pub per_session: BTreeMap<u32, SessionCounts>,
    /// Sum of the per-session rows.
    pub totals: SessionCounts,
    pub episodes: usize,
    pub unique_tokens: usize,
    pub total_tokens: usize,
    pub avg_utterance_tokens: f64,
    pub sessions_per_episode: f64,
    pub utterances_per_episode: f64,
    pub avg_tokens_per_episode: f64,
}

fn summary_count(session: &Session) -> usize {
    session.annotations.iter().filter(|a| !a.is_no_summary).count()
}

pub fn compute_stats(episodes: &[Episode], tokenizer: &dyn Tokenizer) -> Result<DatasetStats> {
    if episodes.is_empty() {
        return Err(Error::invalid("no episodes to compute statistics over"));
    }
    let mut per_session: BTreeMap<u32, SessionCounts> = BTreeMap::new();
    let mut vocab: BTreeSet<&str> = BTreeSet::new();
    let mut total_tokens = 0usize;
    let mut sessions = 0usize;
    for e in episodes {
        for s in &e.sessions {
            sessions += 1;
            *per_session.entry(s.index).or_default() += SessionCounts {
                episodes: 1,
                utterances: s.utterances.len(),
                summaries: summary_count(s),
            };
            for u in &s.utterances {
                let tokens = tokenizer.tokenize(&u.text);
                total_tokens += tokens.len();
                vocab.extend(tokens);
            }
        }
    }
    let mut totals = SessionCounts::default();
    for row in per_session.values() {
        totals += *row;
    }
    let n = episodes.len() as f64;
    Ok(DatasetStats {
        tokenizer: tokenizer.name().to_string(),
        per_session,
        totals,
        episodes: episodes.len(),
        unique_tokens: vocab.len(),
        total_tokens,
        avg_utterance_tokens: if totals.utterances == 0 { 0.0 } else { total_tokens as f64 / totals.utterances as f64 },
        sessions_per_episode: sessions as f64 / n,
        utterances_per_episode: totals.utterances as f64 / n,
        avg_tokens_per_episode: total_tokens as f64 / n,
    })
}

/// Release-style table: each episode contributes only its final session,
/// bucketed by that session's index (one row per `session_k` file).
pub fn final_session_table(episodes: &[Episode]) -> (BTreeMap<u32, SessionCounts>, SessionCounts) {
    let mut rows: BTreeMap<u32, SessionCounts> = BTreeMap::new();
    for s in episodes.iter().filter_map(|e| e.sessions.last()) {
        *rows.entry(s.index).or_default() += SessionCounts {
            episodes: 1,
            utterances: s.utterances.len(),
            summaries: summary_count(s),
        };
    }
    let mut totals = SessionCounts::default();
    for row in rows.values() {
        totals += *row;
    }
    (rows, totals)
}

/// How the annotated turns split between summary lines and no-summary labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSparsity {
    pub annotated_turns: usize,
    pub summary_turns: usize,
    pub no_summary_turns: usize,
    pub summary_fraction: f64,
    pub no_summary_fraction: f64,
}

pub fn annotation_sparsity(episodes: &[Episode]) -> Result<AnnotationSparsity> {
    let (mut summary, mut none) = (0usize, 0usize);
    for a in episodes.iter().flat_map(|e| &e.sessions).flat_map(|s| &s.annotations) {
        if a.is_no_summary {
            none += 1;
        } else {
            summary += 1;
        }
    }
    let total = summary + none;
    if total == 0 {
        return Err(Error::invalid("no annotated turns"));
    }
    Ok(AnnotationSparsity {
        annotated_turns: total,
        summary_turns: summary,
        no_summary_turns: none,
        summary_fraction: summary as f64 / total as f64,
        no_summary_fraction: none as f64 / total as f64,
    })
}

/// Percentage of no-summary examples kept, in `(0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SubsampleRate(f64);

impl SubsampleRate {
    pub fn new(k: f64) -> Result<Self> {
        if k.is_finite() && k > 0.0 && k <= 100.0 {
            Ok(SubsampleRate(k))
        } else {
            Err(Error::invalid(format!("subsample rate must be in (0, 100], got {k}")))
        }
    }

    pub fn percent(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SubsampleRate {
    type Error = Error;
    fn try_from(k: f64) -> Result<Self> {
        Self::new(k)
    }
}

impl From<SubsampleRate> for f64 {
    fn from(k: SubsampleRate) -> f64 {
        k.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummarizerExample {
    pub episode_id: String,
    pub session: u32,
    pub turn: u32,
    pub input_context: String,
    pub target: String,
    pub about: SpeakerId,
}

impl SummarizerExample {
    pub fn is_no_summary(&self) -> bool {
        self.target == NO_SUMMARY_LABEL
    }
}

/// One example per annotated summary turn, plus each no-summary turn kept
/// independently with probability `K/100`. Draws happen in turn order, so
/// the output is a pure function of `(episodes, K, seed)`.
pub fn prepare_summarizer_examples(
    episodes: &[Episode],
    k: SubsampleRate,
    seed: u64,
) -> Result<Vec<SummarizerExample>> {
    let missing: Vec<&str> = episodes
        .iter()
        .filter(|e| e.sessions.iter().all(|s| s.annotations.is_empty()))
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("episodes without annotations: {}", missing.join(", "))));
    }
    let p = k.percent() / 100.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for e in episodes {
        for s in &e.sessions {
            let mut annotations: Vec<&SummaryAnnotation> = s.annotations.iter().collect();
            annotations.sort_by_key(|a| a.source_turn);
            for a in annotations {
                if a.is_no_summary && !rng.random_bool(p) {
                    continue;
                }
                out.push(SummarizerExample {
                    episode_id: e.id.clone(),
                    session: s.index,
                    turn: a.source_turn,
                    input_context: summarizer_input(s, a.source_turn),
                    target: if a.is_no_summary { NO_SUMMARY_LABEL.to_string() } else { a.text.clone() },
                    about: a.about,
                });
            }
        }
    }
    Ok(out)
}

/// Session dialogue up to and including `turn`, preceded by the gap line for
/// sessions after the first.
pub fn summarizer_input(session: &Session, turn: u32) -> String {
    let mut lines = Vec::new();
    if let Some(gap) = session.gap_before {
        lines.push(format!("[{gap} since the previous session]"));
    }
    lines.extend(
        session
            .utterances
            .iter()
            .take(turn as usize + 1)
            .map(|u| format!("{}: {}", u.speaker.tag(), u.text)),
    );
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ReferenceTokenizer;
    use crate::chronicle::{new_episode, validate_episode};

    const LINE: &str = r#"{"personas":[["i like cats"],["i am a chef"]],"dialog":[{"id":"Speaker 1","text":"Hi again!","persona_text":"no_summary"},{"id":"Speaker 2","text":"I opened a bakery.","persona_text":"I opened a bakery."}],"previous_dialogs":[{"dialog":[{"text":"Hello"},{"text":"Hey there"}]}],"time_num":3,"time_unit":"days","metadata":{"initial_data_id":"abc"},"extra":1}"#;

    #[test]
    fn adapter_maps_fields() {
        let eps = read_msc(LINE.as_bytes()).unwrap();
        let e = &eps[0];
        assert_eq!(e.id, "abc-s2");
        assert_eq!(e.sessions.len(), 2);
        assert_eq!(e.sessions[1].gap_before, Some(TimeGap::days(3).unwrap()));
        assert_eq!(e.sessions[0].utterances[1].speaker, SpeakerId::SpeakerB);
        assert_eq!(e.sessions[1].annotations.len(), 2);
        assert!(e.sessions[1].annotations[0].is_no_summary);
        assert_eq!(e.metadata["extra"], 1);
        assert!(validate_episode(e).is_valid());
    }

    #[test]
    fn malformed_record_names_line() {
        let input = format!("{LINE}\n\n{{\"dialog\": 5}}\n");
        match read_msc(input.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(read_msc("not json".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_split_is_invalid_input() {
        assert!(matches!(load_msc("/nonexistent", "dev"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stats_hand_case() {
        let mut e = new_episode(vec!["a".into()], vec!["b".into()]).unwrap();
        e.open_session(None).unwrap();
        e.append_utterance(1, SpeakerId::SpeakerA, "a b c").unwrap();
        e.append_utterance(1, SpeakerId::SpeakerB, "a d e").unwrap();
        let stats = compute_stats(&[e], &ReferenceTokenizer).unwrap();
        assert_eq!(stats.avg_utterance_tokens, 3.0);
        assert_eq!(stats.utterances_per_episode, 2.0);
        assert_eq!(stats.unique_tokens, 5);
        assert_eq!(stats.tokenizer, "reference-word-punct");
        assert!(matches!(compute_stats(&[], &ReferenceTokenizer), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn subsample_rate_bounds() {
        assert!(SubsampleRate::new(0.0).is_err());
        assert!(SubsampleRate::new(100.5).is_err());
        assert!(SubsampleRate::new(100.0).is_ok());
    }

    #[test]
    fn examples_and_missing_annotations() {
        let eps = read_msc(LINE.as_bytes()).unwrap();
        let all = prepare_summarizer_examples(&eps, SubsampleRate::new(100.0).unwrap(), 1).unwrap();
        assert_eq!(all.len(), 2);
        assert!(all[0].is_no_summary());
        assert_eq!(all[1].input_context, "[3 days since the previous session]\nS1: Hi again!\nS2: I opened a bakery.");
        let mut bare = new_episode(vec!["a".into()], vec!["b".into()]).unwrap();
        bare.id = "bare-1".into();
        match prepare_summarizer_examples(&[bare], SubsampleRate::new(5.0).unwrap(), 1) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("bare-1")),
            other => panic!("{other:?}"),
        }
    }
}
