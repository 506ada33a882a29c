//! Evaluation harness: per-session and session-opening perplexity tables,
//! ablations, a synthetic corpus with known structure, and human-evaluation
//! logging.
//!
//! Perplexity is `exp(mean per-token nll)` with natural logs. The openings
//! column pools the tokens of every opening turn of sessions 2 and later
//! into a single mean, rather than averaging per-session opening scores.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use parking_lot::Mutex;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backends::{Backends, SequenceScorer, Summarizer};
use crate::chronicle::{Episode, Session, SpeakerId, SummaryAnnotation, TimeGap, TimeUnit, TurnRef, Utterance};
use crate::context::{
    truncation_report, Augmentation, ContextSource, MemoryFilter, MemoryViews, ResponseSlot,
    StrategyConfig, TruncationReport,
};
use crate::error::{BackendError, Error, Result};
use crate::ingest::{annotation_sparsity, AnnotationSparsity};
use crate::memory::MemoryStore;
use crate::pipeline::prepare_with;

pub const SESSION_COLUMNS: u32 = 5;

pub const OPENINGS_NOTE: &str =
    "openings: all opening-turn tokens of sessions >= 2 pooled into one mean";
pub const QUERY_NOTE: &str = "retrieval query: post-truncation current-session context";

/// First utterance of every session after the first.
pub fn openings_subset(episodes: &[Episode]) -> Vec<(String, TurnRef)> {
    episodes
        .iter()
        .flat_map(|e| {
            e.sessions
                .iter()
                .filter(|s| s.index >= 2 && !s.utterances.is_empty())
                .map(|s| (e.id.clone(), TurnRef::new(s.index, 0)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Cell {
    Value(f64),
    Empty,
    Error(String),
}

impl Cell {
    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Value(v) => Some(*v),
            _ => None,
        }
    }

    fn render(&self) -> String {
        match self {
            Cell::Value(v) => format!("{v:.3}"),
            Cell::Empty => "-".into(),
            Cell::Error(_) => "ERR".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub config: StrategyConfig,
    /// Sessions 1..=5.
    pub sessions: Vec<Cell>,
    pub openings: Cell,
    pub session_tokens: Vec<usize>,
    pub opening_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub scorer: String,
    pub columns: Vec<String>,
    pub rows: Vec<EvalRow>,
    pub notes: Vec<String>,
}

impl EvalTable {
    pub fn row(&self, label: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plain-text table with one line per strategy.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(8).max(8);
        let mut out = format!("{:<width$}", "strategy");
        for c in &self.columns {
            let _ = write!(out, " {c:>10}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<width$}", r.label);
            for c in r.sessions.iter().chain(std::iter::once(&r.openings)) {
                let _ = write!(out, " {:>10}", c.render());
            }
            out.push('\n');
        }
        for (r, c) in self.rows.iter().flat_map(|r| {
            r.sessions.iter().chain(std::iter::once(&r.openings)).map(move |c| (r, c))
        }) {
            if let Cell::Error(msg) = c {
                let _ = writeln!(out, "error in {}: {msg}", r.label);
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "# {n}");
        }
        out
    }
}

/// Which response turns a table scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    AllTurns,
    /// Only session openings; the per-session columns stay empty.
    OpeningsOnly,
}

#[derive(Debug, Clone, Default)]
struct Acc {
    nll: f64,
    tokens: usize,
    error: Option<String>,
}

impl Acc {
    fn add(&mut self, lps: &std::result::Result<Vec<f64>, String>) {
        match lps {
            Ok(lps) => {
                self.nll -= lps.iter().sum::<f64>();
                self.tokens += lps.len();
            }
            Err(e) => {
                self.error.get_or_insert_with(|| e.clone());
            }
        }
    }

    fn merge(&mut self, other: &Acc) {
        self.nll += other.nll;
        self.tokens += other.tokens;
        if self.error.is_none() {
            self.error.clone_from(&other.error);
        }
    }

    fn cell(&self) -> Cell {
        match (&self.error, self.tokens) {
            (Some(e), _) => Cell::Error(e.clone()),
            (None, 0) => Cell::Empty,
            (None, n) => Cell::Value((self.nll / n as f64).exp()),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct RowAcc {
    sessions: Vec<Acc>,
    openings: Acc,
}

/// Log-probabilities of `target` under mixture weights: per token,
/// `log Σ w_i p_i / Σ w_i`.
fn mix_log_probs(per_item: &[Vec<f64>], weights: &[f64]) -> std::result::Result<Vec<f64>, String> {
    let len = per_item.first().map(Vec::len).unwrap_or(0);
    if per_item.iter().any(|v| v.len() != len) {
        return Err("RAG items scored different token counts".into());
    }
    let wsum: f64 = weights.iter().sum();
    Ok((0..len)
        .map(|t| {
            let max = per_item.iter().map(|v| v[t]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = per_item.iter().zip(weights).map(|(v, w)| w * (v[t] - max).exp()).sum();
            max + (s / wsum).ln()
        })
        .collect())
}

fn score_slot(
    episode: &Episode,
    slot: &ResponseSlot,
    cfg: &StrategyConfig,
    target: &str,
    scorer: &dyn SequenceScorer,
    backends: &Backends,
    memory: Option<&[crate::memory::MemoryEntry]>,
) -> std::result::Result<Vec<f64>, String> {
    let prepared = prepare_with(backends, episode, slot, cfg, memory).map_err(|e| e.to_string())?;
    let cue = format!("{}:", slot.speaker.tag());
    let cued = |text: &str| if text.is_empty() { cue.clone() } else { format!("{text}\n{cue}") };
    let items: Vec<_> = prepared
        .input
        .items
        .iter()
        .map(|i| crate::retrieval::AugmentedItem { text: cued(&i.text), ..i.clone() })
        .collect();
    let lps = match cfg.augmentation {
        Augmentation::Rag if !prepared.input.unaugmented => {
            let per_item = items
                .iter()
                .map(|i| scorer.token_log_probs(&i.text, target))
                .collect::<std::result::Result<Vec<_>, BackendError>>()
                .map_err(|e| e.to_string())?;
            let weights: Vec<f64> = items.iter().map(|i| i.weight.unwrap_or(1.0)).collect();
            mix_log_probs(&per_item, &weights)?
        }
        Augmentation::Fid | Augmentation::FidRag if !prepared.input.unaugmented => {
            let texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
            scorer.fused_token_log_probs(&texts, target).map_err(|e| e.to_string())?
        }
        _ => scorer.token_log_probs(&items[0].text, target).map_err(|e| e.to_string())?,
    };
    if lps.iter().any(|lp| !lp.is_finite()) {
        return Err("scorer returned a non-finite log-probability".into());
    }
    Ok(lps)
}

/// Perplexity of every response turn under each strategy. Episodes are
/// scored in parallel; partial sums are merged in episode-id order so the
/// table does not depend on input order. A failing turn marks its cells as
/// errors without aborting the table.
pub fn perplexity_table(
    episodes: &[Episode],
    configs: &[StrategyConfig],
    scorer: &dyn SequenceScorer,
    backends: &Backends,
    memories: Option<&MemoryViews>,
    scope: Scope,
) -> Result<EvalTable> {
    if configs.is_empty() {
        return Err(Error::invalid("no strategies to evaluate"));
    }
    for cfg in configs {
        cfg.validate()?;
        if cfg.context_source == ContextSource::PredictedSummary && memories.is_none() {
            return Err(Error::invalid(format!("{} needs predicted memories", cfg.label())));
        }
    }
    let mut partials: Vec<(&str, Vec<RowAcc>)> = episodes
        .par_iter()
        .map(|episode| {
            let memory = memories.and_then(|m| m.get(&episode.id)).map(Vec::as_slice);
            let rows = configs
                .iter()
                .map(|cfg| {
                    let mut row = RowAcc { sessions: vec![Acc::default(); SESSION_COLUMNS as usize], ..Default::default() };
                    for s in episode.sessions.iter().filter(|s| s.index <= SESSION_COLUMNS) {
                        for (t, u) in s.utterances.iter().enumerate() {
                            let opening = s.index >= 2 && t == 0;
                            if scope == Scope::OpeningsOnly && !opening {
                                continue;
                            }
                            let slot = ResponseSlot { session: s.index, turn: t as u32, speaker: u.speaker };
                            let lps = score_slot(episode, &slot, cfg, &u.text, scorer, backends, memory);
                            if scope == Scope::AllTurns {
                                row.sessions[s.index as usize - 1].add(&lps);
                            }
                            if opening {
                                row.openings.add(&lps);
                            }
                        }
                    }
                    row
                })
                .collect();
            (episode.id.as_str(), rows)
        })
        .collect();
    partials.sort_by(|a, b| a.0.cmp(b.0));

    let mut totals: Vec<RowAcc> = configs
        .iter()
        .map(|_| RowAcc { sessions: vec![Acc::default(); SESSION_COLUMNS as usize], ..Default::default() })
        .collect();
    for (_, rows) in &partials {
        for (total, row) in totals.iter_mut().zip(rows) {
            for (a, b) in total.sessions.iter_mut().zip(&row.sessions) {
                a.merge(b);
            }
            total.openings.merge(&row.openings);
        }
    }
    let mut columns: Vec<String> = (1..=SESSION_COLUMNS).map(|s| format!("S{s}")).collect();
    columns.push("Openings".into());
    Ok(EvalTable {
        scorer: scorer.name().to_string(),
        columns,
        rows: configs
            .iter()
            .zip(totals)
            .map(|(cfg, acc)| EvalRow {
                label: cfg.label(),
                config: cfg.clone(),
                session_tokens: acc.sessions.iter().map(|a| a.tokens).collect(),
                sessions: acc.sessions.iter().map(Acc::cell).collect(),
                opening_tokens: acc.openings.tokens,
                openings: acc.openings.cell(),
            })
            .collect(),
        notes: vec![OPENINGS_NOTE.into(), QUERY_NOTE.into()],
    })
}

/// Runs a summarizer over every turn of every episode.
pub fn predict_memories(episodes: &[Episode], summarizer: &dyn Summarizer) -> Result<MemoryViews> {
    episodes
        .par_iter()
        .map(|e| {
            let mut store = MemoryStore::new(&e.id);
            store.catch_up(e, summarizer)?;
            Ok((e.id.clone(), store.all().to_vec()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySparsity {
    pub turns: usize,
    pub written: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base: StrategyConfig,
    /// One table per axis, keyed by axis name.
    pub axes: BTreeMap<String, EvalTable>,
    pub predicted_sparsity: MemorySparsity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_sparsity: Option<AnnotationSparsity>,
    pub truncation: Vec<TruncationReport>,
}

pub const ABLATION_TRUNCATIONS: [usize; 3] = [128, 512, 1024];

/// Varies one setting at a time around `base`: time features, memory filter,
/// context source, truncation length and sessions available.
pub fn ablation_report(
    episodes: &[Episode],
    base: &StrategyConfig,
    scorer: &dyn SequenceScorer,
    backends: &Backends,
    scope: Scope,
) -> Result<AblationReport> {
    base.validate()?;
    let memories = predict_memories(episodes, backends.summarizer.as_ref())?;
    let turns: usize = episodes.iter().map(Episode::utterance_count).sum();
    let written: usize = memories.values().map(Vec::len).sum();
    if turns == 0 {
        return Err(Error::invalid("no turns to evaluate"));
    }
    let variant = |f: &dyn Fn(&mut StrategyConfig)| {
        let mut c = base.clone();
        c.name = None;
        f(&mut c);
        c
    };
    let axes: Vec<(&str, Vec<StrategyConfig>)> = vec![
        ("time_features", [true, false].iter().map(|&t| variant(&|c| c.time_features = t)).collect()),
        (
            "memory_filter",
            [MemoryFilter::Both, MemoryFilter::SelfOnly, MemoryFilter::PartnerOnly]
                .iter()
                .map(|&f| variant(&|c| c.memory_filter = f))
                .collect(),
        ),
        (
            "context_source",
            [
                ContextSource::None,
                ContextSource::DialogueHistory,
                ContextSource::GoldSummary,
                ContextSource::PredictedSummary,
            ]
            .iter()
            .map(|&s| variant(&|c| c.context_source = s))
            .collect(),
        ),
        (
            "truncation",
            ABLATION_TRUNCATIONS.iter().map(|&l| variant(&|c| c.truncation = l)).collect(),
        ),
        (
            "sessions_available",
            (1..=4).map(|k| variant(&|c| c.history_sessions = Some(k))).collect(),
        ),
    ];
    let mut tables = BTreeMap::new();
    for (name, configs) in axes {
        let table = perplexity_table(episodes, &configs, scorer, backends, Some(&memories), scope)?;
        tables.insert(name.to_string(), table);
    }
    let truncation = ABLATION_TRUNCATIONS
        .iter()
        .map(|&l| {
            let cfg = StrategyConfig { truncation: l, ..base.clone() };
            truncation_report(episodes, &cfg, backends.tokenizer.as_ref(), Some(&memories))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        base: base.clone(),
        axes: tables,
        predicted_sparsity: MemorySparsity { turns, written, fraction: written as f64 / turns as f64 },
        gold_sparsity: annotation_sparsity(episodes).ok(),
        truncation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub episodes: usize,
    pub sessions: u32,
    pub turns_per_session: usize,
    /// Size of the filler vocabulary.
    pub vocab_size: usize,
    /// Size of the rare-token pool facts are drawn from.
    pub topic_pool: usize,
    /// Probability that a session opening refers back to earlier facts.
    pub carryover: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            episodes: 100,
            sessions: 5,
            turns_per_session: 8,
            vocab_size: 200,
            topic_pool: 4000,
            carryover: 0.9,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.carryover) {
            return Err(Error::invalid("carryover must lie in [0, 1]"));
        }
        if self.sessions == 0 || self.turns_per_session < 4 || self.vocab_size == 0 {
            return Err(Error::invalid("need >= 1 session, >= 4 turns per session and a vocabulary"));
        }
        // every episode draws at most 4 topics per session plus fresh ones
        if self.topic_pool < 8 * self.sessions as usize + 8 {
            return Err(Error::invalid("topic pool too small for the session count"));
        }
        Ok(())
    }
}

const FACT_VERBS: [&str; 4] = ["adopted", "bought", "visited", "studied"];

fn topic(i: usize) -> String {
    format!("topic{i}")
}

fn filler(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> String {
    (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect::<Vec<_>>().join(" ")
}

/// Seeded corpus whose facts are rare `topicN` tokens. Each session has one
/// fact turn per speaker, annotated with a gold summary; every other turn is
/// annotated no-summary. Openings of later sessions mention one earlier fact
/// of each speaker with probability `carryover`, otherwise topics that never
/// appear in the episode's summaries.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Episode>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut episodes = Vec::with_capacity(spec.episodes);
    for e in 0..spec.episodes {
        let personas = [
            (0..3).map(|_| format!("i like {}", filler(&mut rng, spec.vocab_size, 1))).collect(),
            (0..3).map(|_| format!("i like {}", filler(&mut rng, spec.vocab_size, 1))).collect(),
        ];
        let mut facts: [Vec<String>; 2] = [Vec::new(), Vec::new()];
        let mut used: std::collections::HashSet<usize> = std::collections::HashSet::new();
        let fresh = |rng: &mut ChaCha8Rng, used: &mut std::collections::HashSet<usize>| loop {
            let t = rng.random_range(0..spec.topic_pool);
            if used.insert(t) {
                return topic(t);
            }
        };
        let mut sessions = Vec::new();
        for s in 1..=spec.sessions {
            let gap = (s > 1).then(|| {
                let unit = if rng.random_bool(0.5) { TimeUnit::Hours } else { TimeUnit::Days };
                TimeGap { amount: rng.random_range(1..=7), unit }
            });
            let mut utterances = Vec::new();
            let mut annotations = Vec::new();
            let n = spec.turns_per_session;
            // fact turns for A (even) and B (odd), never the opening
            let fact_a = 2 * rng.random_range(1..n / 2);
            let fact_b = 2 * rng.random_range(0..n / 2) + 1;
            let mut echo: Option<String> = None;
            for t in 0..n {
                let speaker = if t % 2 == 0 { SpeakerId::SpeakerA } else { SpeakerId::SpeakerB };
                let text = if t == 0 {
                    let carry = s > 1
                        && !facts[0].is_empty()
                        && !facts[1].is_empty()
                        && rng.random_bool(spec.carryover);
                    let (partner, own) = if carry {
                        (facts[1].choose(&mut rng).cloned().unwrap(), facts[0].choose(&mut rng).cloned().unwrap())
                    } else {
                        (fresh(&mut rng, &mut used), fresh(&mut rng, &mut used))
                    };
                    if s == 1 {
                        format!("hello {}", filler(&mut rng, spec.vocab_size, 4))
                    } else {
                        format!("how is your {partner} ? my {own} is great")
                    }
                } else if t == fact_a || t == fact_b {
                    let verb = FACT_VERBS.choose(&mut rng).unwrap();
                    let (x, y) = (fresh(&mut rng, &mut used), fresh(&mut rng, &mut used));
                    let summary = format!("{verb} {x} {y}");
                    facts[speaker.index()].extend([x.clone(), y]);
                    annotations.push(SummaryAnnotation::summary(speaker, t as u32, summary.clone()));
                    echo = Some(x);
                    format!("i {summary}")
                } else if let Some(x) = echo.take() {
                    format!("nice {x} {}", filler(&mut rng, spec.vocab_size, 3))
                } else {
                    let len = rng.random_range(4..=8);
                    filler(&mut rng, spec.vocab_size, len)
                };
                if !annotations.iter().any(|a: &SummaryAnnotation| a.source_turn == t as u32) {
                    annotations.push(SummaryAnnotation::no_summary(speaker, t as u32));
                }
                utterances.push(Utterance { speaker, text });
            }
            annotations.sort_by_key(|a| a.source_turn);
            sessions.push(Session { index: s, gap_before: gap, utterances, annotations });
        }
        episodes.push(Episode {
            id: format!("syn-{:016x}-{e:04}", spec.seed),
            personas,
            sessions,
            metadata: BTreeMap::new(),
        });
    }
    Ok(episodes)
}

/// Training texts for a scorer: each session transcript as one sequence,
/// each gold summary line, and one lexicon line so every word of the
/// synthetic language is in vocabulary.
pub fn scorer_corpus(episodes: &[Episode], spec: &SyntheticSpec) -> Vec<String> {
    let mut corpus: Vec<String> = Vec::new();
    for e in episodes {
        for s in &e.sessions {
            corpus.push(
                s.utterances
                    .iter()
                    .map(|u| format!("{}: {}", u.speaker.tag(), u.text))
                    .collect::<Vec<_>>()
                    .join("\n"),
            );
            corpus.extend(
                s.annotations
                    .iter()
                    .filter(|a| !a.is_no_summary)
                    .map(|a| format!("your persona: {}", a.text)),
            );
        }
    }
    let lexicon: Vec<String> = (0..spec.vocab_size)
        .map(|i| format!("w{i}"))
        .chain((0..spec.topic_pool).map(topic))
        .collect();
    corpus.push(lexicon.join(" "));
    corpus
}

/// Per-turn annotation of one bot reply.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnFlags {
    pub reference_own_topic: bool,
    pub reference_others_topic: bool,
    pub new_topic: bool,
    pub engaging: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanEvalRecord {
    pub conversation_id: String,
    pub model: String,
    pub turns: Vec<TurnFlags>,
    pub rating: u8,
}

impl HumanEvalRecord {
    pub fn new(
        conversation_id: impl Into<String>,
        model: impl Into<String>,
        turns: Vec<TurnFlags>,
        rating: u8,
    ) -> Result<Self> {
        let r = HumanEvalRecord { conversation_id: conversation_id.into(), model: model.into(), turns, rating };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.rating) {
            return Err(Error::invalid(format!("rating must be 1-5, got {}", self.rating)));
        }
        if self.turns.is_empty() {
            return Err(Error::invalid("a record needs flags for at least one bot turn"));
        }
        if self.conversation_id.trim().is_empty() {
            return Err(Error::invalid("conversation id is empty"));
        }
        Ok(())
    }
}

/// Append-only JSONL log; each append writes one whole line under a lock.
#[derive(Debug)]
pub struct HumanEvalLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl HumanEvalLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        HumanEvalLog { path: path.into(), lock: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &HumanEvalRecord) -> Result<()> {
        record.validate()?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let _guard = self.lock.lock();
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.write_all(&line)?;
        file.flush()?;
        Ok(())
    }

    pub fn read(&self) -> Result<Vec<HumanEvalRecord>> {
        let _guard = self.lock.lock();
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let file = std::fs::File::open(&self.path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: HumanEvalRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            out.push(r);
        }
        Ok(out)
    }
}

/// Exact per-model aggregates; fractions are over bot turns, the rating mean
/// over conversations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub model: String,
    pub conversations: u64,
    pub turns: u64,
    pub engaging: Ratio<u64>,
    pub own_topic: Ratio<u64>,
    pub others_topic: Ratio<u64>,
    pub new_topic: Ratio<u64>,
    pub mean_rating: Ratio<u64>,
}

/// `r * 100` rounded half-up to `decimals` places using integer arithmetic.
pub fn percent(r: Ratio<u64>, decimals: u32) -> f64 {
    round_exact(r * 100, decimals)
}

pub fn round_exact(r: Ratio<u64>, decimals: u32) -> f64 {
    let scale = 10u64.pow(decimals);
    let scaled = r * scale;
    let rounded = (scaled.numer() * 2 + scaled.denom()) / (scaled.denom() * 2);
    rounded as f64 / scale as f64
}

impl ModelAggregate {
    pub fn summary_line(&self) -> String {
        format!(
            "{}: conversations {} turns {} engaging {:.1}% own {:.1}% other {:.1}% new {:.1}% rating {:.2}",
            self.model,
            self.conversations,
            self.turns,
            percent(self.engaging, 1),
            percent(self.own_topic, 1),
            percent(self.others_topic, 1),
            percent(self.new_topic, 1),
            round_exact(self.mean_rating, 2),
        )
    }
}

pub fn aggregate(records: &[HumanEvalRecord]) -> Vec<ModelAggregate> {
    let mut by_model: BTreeMap<&str, Vec<&HumanEvalRecord>> = BTreeMap::new();
    for r in records {
        by_model.entry(&r.model).or_default().push(r);
    }
    by_model
        .into_iter()
        .map(|(model, rs)| {
            let turns: u64 = rs.iter().map(|r| r.turns.len() as u64).sum();
            let count = |f: fn(&TurnFlags) -> bool| -> Ratio<u64> {
                Ratio::new(rs.iter().flat_map(|r| &r.turns).filter(|t| f(t)).count() as u64, turns)
            };
            let rating_sum: u64 = rs.iter().map(|r| r.rating as u64).sum();
            ModelAggregate {
                model: model.to_string(),
                conversations: rs.len() as u64,
                turns,
                engaging: count(|t| t.engaging),
                own_topic: count(|t| t.reference_own_topic),
                others_topic: count(|t| t.reference_others_topic),
                new_topic: count(|t| t.new_topic),
                mean_rating: Ratio::new(rating_sum, rs.len() as u64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

impl TTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Two-sided Welch two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("each sample needs at least two observations"));
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (sa, sb) = (va / na, vb / nb);
    if sa + sb == 0.0 {
        return Err(Error::invalid("both samples have zero variance"));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa.powi(2) / (na - 1.0) + sb.powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TTest { t, df, p_value: 2.0 * dist.cdf(-t.abs()) })
}

/// Ratings of one model, for t-tests between models.
pub fn ratings_of(records: &[HumanEvalRecord], model: &str) -> Vec<f64> {
    records.iter().filter(|r| r.model == model).map(|r| r.rating as f64).collect()
}

/// Groups per-episode memories from a store map, for callers that hold
/// [`MemoryStore`]s rather than entry lists.
pub fn views_from_stores(stores: &HashMap<String, MemoryStore>) -> MemoryViews {
    stores.iter().map(|(id, s)| (id.clone(), s.all().to_vec())).collect()
}
