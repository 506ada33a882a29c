//! Exact dense retrieval over previous-session material and assembly of the
//! retrieved documents with the dialogue context.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backends::{dot, Embedder, Tokenizer};
use crate::chronicle::{Episode, SpeakerId};
use crate::context::{
    time_prefix, truncate_text, Augmentation, ContextDoc, ContextSource, Granularity, ResponseSlot,
    StrategyConfig,
};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    SessionDialogue { session: u32 },
    SessionSummary { session: u32 },
    Utterance { session: u32, turn: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub doc_id: String,
    pub text: String,
    pub origin: Origin,
}

/// Transcript chunks of the sessions in `sessions` (a half-open range of
/// session indices), one per session or one per utterance.
pub fn chunk_dialogue(
    episode: &Episode,
    sessions: std::ops::Range<u32>,
    granularity: Granularity,
    time_prefix_until: Option<u32>,
) -> Vec<DocumentChunk> {
    let mut out = Vec::new();
    for s in episode.sessions.iter().filter(|s| sessions.contains(&s.index)) {
        let prefix = time_prefix_until
            .map(|now| time_prefix(episode.hours_between(s.index, now)))
            .unwrap_or_default();
        let lines: Vec<String> = s
            .utterances
            .iter()
            .map(|u| format!("{prefix}{}: {}", u.speaker.tag(), u.text))
            .collect();
        match granularity {
            Granularity::Session if !lines.is_empty() => out.push(DocumentChunk {
                doc_id: format!("dlg-s{:03}", s.index),
                text: lines.join("\n"),
                origin: Origin::SessionDialogue { session: s.index },
            }),
            Granularity::Session => {}
            Granularity::Utterance => {
                out.extend(lines.into_iter().enumerate().map(|(t, text)| DocumentChunk {
                    doc_id: format!("dlg-s{:03}-t{:03}", s.index, t),
                    text,
                    origin: Origin::Utterance { session: s.index, turn: t as u32 },
                }))
            }
        }
    }
    out
}

/// Memory chunks rendered for a reader, one per session group or per entry.
pub fn chunk_memory(
    entries: &[&MemoryEntry],
    episode: &Episode,
    current_session: u32,
    perspective: SpeakerId,
    granularity: Granularity,
    time_features: bool,
) -> Vec<DocumentChunk> {
    match granularity {
        Granularity::Session => {
            memory::render_memory(entries, granularity, time_features, episode, current_session, perspective)
                .into_iter()
                .map(|(session, text)| DocumentChunk {
                    doc_id: format!("mem-s{session:03}"),
                    text,
                    origin: Origin::SessionSummary { session },
                })
                .collect()
        }
        Granularity::Utterance => entries
            .iter()
            .map(|e| DocumentChunk {
                doc_id: format!("mem-s{:03}-t{:03}", e.source.session, e.source.turn),
                text: memory::summary_lines(&[*e], episode, current_session, perspective, time_features)
                    .remove(0),
                origin: Origin::Utterance { session: e.source.session, turn: e.source.turn },
            })
            .collect(),
    }
}

/// Retrievable documents for a response slot under a strategy: previous
/// sessions only, drawn from the configured long-term source.
pub fn chunk_documents(
    episode: &Episode,
    slot: &ResponseSlot,
    cfg: &StrategyConfig,
    memory: Option<&[MemoryEntry]>,
) -> Result<Vec<DocumentChunk>> {
    let first = cfg.first_visible_session(slot.session);
    let from_memory = |entries: &[MemoryEntry]| {
        let visible: Vec<&MemoryEntry> =
            memory::visible_entries(entries, cfg.memory_filter, slot.speaker, slot.session)
                .into_iter()
                .filter(|e| e.source.session >= first)
                .collect();
        chunk_memory(&visible, episode, slot.session, slot.speaker, cfg.granularity, cfg.time_features)
    };
    Ok(match cfg.context_source {
        ContextSource::None => Vec::new(),
        ContextSource::DialogueHistory => chunk_dialogue(
            episode,
            first..slot.session,
            cfg.granularity,
            cfg.time_features.then_some(slot.session),
        ),
        ContextSource::GoldSummary => from_memory(&memory::gold_entries(episode)),
        ContextSource::PredictedSummary => from_memory(memory.ok_or_else(|| {
            Error::invalid("predicted_summary retrieval needs the episode's memory")
        })?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub origin: Origin,
    pub text: String,
    pub score: f64,
    pub weight: f64,
}

/// Immutable snapshot of embedded chunks scored by exhaustive inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryIndex {
    dimension: usize,
    chunks: Vec<DocumentChunk>,
    vectors: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct DumpLine<'a> {
    doc_id: &'a str,
    origin: Origin,
    text: &'a str,
    embedding: &'a [f32],
}

impl MemoryIndex {
    pub fn empty(dimension: usize) -> Self {
        MemoryIndex { dimension, chunks: Vec::new(), vectors: Vec::new() }
    }

    pub fn from_vectors(dimension: usize, items: Vec<(DocumentChunk, Vec<f32>)>) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::invalid("index dimension must be positive"));
        }
        let mut seen = HashSet::new();
        for (chunk, v) in &items {
            if v.len() != dimension {
                return Err(Error::invalid(format!(
                    "embedding for {} has dimension {}, index has {dimension}",
                    chunk.doc_id,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("embedding for {} is not finite", chunk.doc_id)));
            }
            if !seen.insert(chunk.doc_id.as_str()) {
                return Err(Error::invalid(format!("duplicate doc_id {}", chunk.doc_id)));
            }
        }
        let (chunks, vectors) = items.into_iter().unzip();
        Ok(MemoryIndex { dimension, chunks, vectors })
    }

    pub fn build(chunks: Vec<DocumentChunk>, embedder: &dyn Embedder) -> Result<Self> {
        let vectors = embed_chunks(&chunks, embedder)?;
        Self::from_vectors(embedder.dimension(), chunks.into_iter().zip(vectors).collect())
    }

    /// New snapshot with `chunks` added; chunks whose doc_id already exists
    /// replace the old entry. Only the given chunks are embedded.
    pub fn with_added(&self, chunks: Vec<DocumentChunk>, embedder: &dyn Embedder) -> Result<Self> {
        if embedder.dimension() != self.dimension {
            return Err(Error::invalid("embedder dimension differs from the index"));
        }
        let vectors = embed_chunks(&chunks, embedder)?;
        let replaced: HashSet<&str> = chunks.iter().map(|c| c.doc_id.as_str()).collect();
        let mut items: Vec<(DocumentChunk, Vec<f32>)> = self
            .chunks
            .iter()
            .zip(&self.vectors)
            .filter(|(c, _)| !replaced.contains(c.doc_id.as_str()))
            .map(|(c, v)| (c.clone(), v.clone()))
            .collect();
        items.extend(chunks.into_iter().zip(vectors));
        Self::from_vectors(self.dimension, items)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[DocumentChunk] {
        &self.chunks
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i]
    }

    /// The `n` best chunks by inner product with `query`, ties broken by
    /// ascending doc_id, with softmax weights over the returned scores.
    pub fn search(&self, query: &[f32], n: usize) -> Result<Vec<ScoredDoc>> {
        if n == 0 {
            return Err(Error::invalid("retrieval needs N >= 1"));
        }
        if query.len() != self.dimension {
            return Err(Error::invalid(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dimension
            )));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("query embedding is not finite"));
        }
        let mut heap: BinaryHeap<Reverse<Candidate<'_>>> = BinaryHeap::with_capacity(n + 1);
        for (i, v) in self.vectors.iter().enumerate() {
            let cand = Candidate { score: dot(query, v), doc_id: &self.chunks[i].doc_id, index: i };
            if heap.len() < n {
                heap.push(Reverse(cand));
            } else if heap.peek().is_some_and(|worst| cand > worst.0) {
                heap.pop();
                heap.push(Reverse(cand));
            }
        }
        let mut best: Vec<Candidate<'_>> = heap.into_iter().map(|r| r.0).collect();
        best.sort_by(|a, b| b.cmp(a));
        let weights = softmax(&best.iter().map(|c| c.score).collect::<Vec<_>>());
        Ok(best
            .into_iter()
            .zip(weights)
            .map(|(c, weight)| {
                let chunk = &self.chunks[c.index];
                ScoredDoc {
                    doc_id: chunk.doc_id.clone(),
                    origin: chunk.origin,
                    text: chunk.text.clone(),
                    score: c.score,
                    weight,
                }
            })
            .collect())
    }

    pub fn retrieve(&self, query: &str, n: usize, embedder: &dyn Embedder) -> Result<Vec<ScoredDoc>> {
        if n == 0 {
            return Err(Error::invalid("retrieval needs N >= 1"));
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let q = embedder.embed(&[query])?.pop().ok_or_else(|| {
            Error::Backend(crate::BackendError::SchemaMismatch("embedder returned no vector".into()))
        })?;
        self.search(&q, n)
    }

    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (c, v) in self.chunks.iter().zip(&self.vectors) {
            let line = DumpLine { doc_id: &c.doc_id, origin: c.origin, text: &c.text, embedding: v };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn embed_chunks(chunks: &[DocumentChunk], embedder: &dyn Embedder) -> Result<Vec<Vec<f32>>> {
    if chunks.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let vectors = embedder.embed(&texts)?;
    if vectors.len() != chunks.len() {
        return Err(Error::Backend(crate::BackendError::SchemaMismatch(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            chunks.len()
        ))));
    }
    Ok(vectors)
}

/// Heap entry; `Ord` puts better candidates higher.
#[derive(Debug, Clone, Copy)]
struct Candidate<'a> {
    score: f64,
    doc_id: &'a str,
    index: usize,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.doc_id.cmp(self.doc_id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let Some(max) = scores.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedItem {
    pub text: String,
    /// Marginalization weight; set for RAG only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInput {
    pub mode: Augmentation,
    pub items: Vec<AugmentedItem>,
    /// No document was available, so the only item is the bare context.
    pub unaugmented: bool,
}

impl AugmentedInput {
    pub fn bare(mode: Augmentation, context: &ContextDoc) -> Self {
        AugmentedInput {
            mode,
            items: vec![AugmentedItem {
                text: context.text.clone(),
                weight: None,
                doc_id: None,
                truncated: context.truncated,
            }],
            unaugmented: true,
        }
    }
}

pub const DOC_SEPARATOR: &str = "\n";

/// Prepends each document to the context and truncates every input to
/// `truncation` tokens independently. RAG items carry the softmax weight.
pub fn assemble(
    mode: Augmentation,
    context: &ContextDoc,
    docs: &[ScoredDoc],
    truncation: usize,
    tokenizer: &dyn Tokenizer,
) -> AugmentedInput {
    if docs.is_empty() || mode == Augmentation::TruncateOnly {
        return AugmentedInput::bare(mode, context);
    }
    let items = docs
        .iter()
        .map(|d| {
            let joined = if context.text.is_empty() {
                d.text.clone()
            } else {
                format!("{}{DOC_SEPARATOR}{}", d.text, context.text)
            };
            let cut = truncate_text(&joined, truncation, tokenizer);
            AugmentedItem {
                text: cut.text,
                weight: (mode == Augmentation::Rag).then_some(d.weight),
                doc_id: Some(d.doc_id.clone()),
                truncated: cut.truncated || context.truncated,
            }
        })
        .collect();
    AugmentedInput { mode, items, unaugmented: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{hash_embed, HashEmbedder, ReferenceTokenizer};
    use crate::chronicle::{new_episode, TimeGap};
    use proptest::prelude::*;

    fn chunk(id: &str, text: &str) -> DocumentChunk {
        DocumentChunk { doc_id: id.into(), text: text.into(), origin: Origin::SessionDialogue { session: 1 } }
    }

    fn three_session_episode(per_session: usize) -> Episode {
        let mut e = new_episode(vec!["a".into()], vec!["b".into()]).unwrap();
        for s in 1..=4u32 {
            e.open_session((s > 1).then(|| TimeGap::days(1).unwrap())).unwrap();
            for t in 0..per_session {
                let who = if t % 2 == 0 { SpeakerId::SpeakerA } else { SpeakerId::SpeakerB };
                e.append_utterance(s, who, format!("session {s} line {t}")).unwrap();
            }
        }
        e
    }

    #[test]
    fn chunk_counts_exclude_current_session() {
        let e = three_session_episode(12);
        let cfg = StrategyConfig::with_source(ContextSource::DialogueHistory);
        let slot = ResponseSlot { session: 4, turn: 0, speaker: SpeakerId::SpeakerA };
        assert_eq!(chunk_documents(&e, &slot, &cfg, None).unwrap().len(), 3);
        let cfg = StrategyConfig { granularity: Granularity::Utterance, ..cfg };
        assert_eq!(chunk_documents(&e, &slot, &cfg, None).unwrap().len(), 36);
    }

    #[test]
    fn chunks_concatenate_to_transcript() {
        let e = three_session_episode(5);
        let chunks = chunk_dialogue(&e, 1..4, Granularity::Session, None);
        let transcript: Vec<String> = e.sessions[..3]
            .iter()
            .flat_map(|s| s.utterances.iter().map(|u| format!("{}: {}", u.speaker.tag(), u.text)))
            .collect();
        let joined: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(joined.join("\n"), transcript.join("\n"));
    }

    #[test]
    fn build_shapes_and_determinism() {
        let embedder = HashEmbedder::new(64).unwrap();
        assert!(MemoryIndex::build(Vec::new(), &embedder).unwrap().is_empty());
        let chunks: Vec<_> = (0..100).map(|i| chunk(&format!("d{i:03}"), &format!("text {i}"))).collect();
        let index = MemoryIndex::build(chunks, &embedder).unwrap();
        assert_eq!(index.len(), 100);
        assert!((0..100).all(|i| index.vector(i).len() == 64));
        assert_eq!(index.vector(7), hash_embed("text 7", 64).as_slice());
    }

    #[test]
    fn degenerate_and_tie_cases() {
        let embedder = HashEmbedder::new(16).unwrap();
        let one = MemoryIndex::build(vec![chunk("only", "dog")], &embedder).unwrap();
        let got = one.retrieve("dog", 3, &embedder).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].weight, 1.0);
        let twins = MemoryIndex::build(vec![chunk("b", "same text"), chunk("a", "same text")], &embedder).unwrap();
        let got = twins.retrieve("same", 2, &embedder).unwrap();
        assert_eq!(got.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(matches!(one.retrieve("x", 0, &embedder), Err(Error::InvalidInput(_))));
        assert!(MemoryIndex::empty(16).retrieve("x", 3, &embedder).unwrap().is_empty());
    }

    #[test]
    fn invalid_indices_rejected() {
        let dup = MemoryIndex::from_vectors(2, vec![(chunk("a", ""), vec![0.0, 1.0]), (chunk("a", ""), vec![1.0, 0.0])]);
        assert!(dup.is_err());
        assert!(MemoryIndex::from_vectors(2, vec![(chunk("a", ""), vec![f32::NAN, 1.0])]).is_err());
        assert!(MemoryIndex::from_vectors(2, vec![(chunk("a", ""), vec![1.0])]).is_err());
    }

    #[test]
    fn with_added_replaces_and_extends() {
        let embedder = HashEmbedder::new(32).unwrap();
        let index = MemoryIndex::build(vec![chunk("a", "cats"), chunk("b", "dogs")], &embedder).unwrap();
        let next = index.with_added(vec![chunk("b", "birds"), chunk("c", "fish")], &embedder).unwrap();
        assert_eq!(index.len(), 2);
        assert_eq!(next.len(), 3);
        let b = next.chunks().iter().position(|c| c.doc_id == "b").unwrap();
        assert_eq!(next.vector(b), hash_embed("birds", 32).as_slice());
    }

    #[test]
    fn rag_weights_match_hand_softmax() {
        let w = softmax(&[2.0, 1.0]);
        assert!((w[0] - 0.7311).abs() < 1e-4);
        assert!((w[1] - 0.2689).abs() < 1e-4);
        let docs: Vec<ScoredDoc> = [("x", 2.0), ("y", 1.0)]
            .iter()
            .zip(&w)
            .map(|((id, s), w)| ScoredDoc {
                doc_id: id.to_string(),
                origin: Origin::SessionSummary { session: 1 },
                text: format!("doc {id}"),
                score: *s,
                weight: *w,
            })
            .collect();
        let ctx = ContextDoc { text: "S1: hi".into(), token_count: 3, truncated: false, dropped_tokens: 0 };
        let rag = assemble(Augmentation::Rag, &ctx, &docs, 1024, &ReferenceTokenizer);
        assert_eq!(rag.items.len(), 2);
        assert_eq!(rag.items[0].text, "doc x\nS1: hi");
        assert_eq!(rag.items.iter().map(|i| i.weight.unwrap()).sum::<f64>(), 1.0);
        let fid = assemble(Augmentation::Fid, &ctx, &docs, 1024, &ReferenceTokenizer);
        assert!(fid.items.iter().all(|i| i.weight.is_none() && i.text.ends_with(&ctx.text)));
        let bare = assemble(Augmentation::Fid, &ctx, &[], 1024, &ReferenceTokenizer);
        assert!(bare.unaugmented);
        assert_eq!(bare.items.len(), 1);
        assert_eq!(bare.items[0].text, ctx.text);
    }

    #[test]
    fn dump_has_one_line_per_chunk() {
        let embedder = HashEmbedder::new(4).unwrap();
        let index = MemoryIndex::build(vec![chunk("a", "x"), chunk("b", "y")], &embedder).unwrap();
        let mut buf = Vec::new();
        index.dump_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"doc_id":"a","origin":{"kind":"session_dialogue","session":1},"text":"x","embedding":["#));
    }

    proptest! {
        #[test]
        fn insertion_order_does_not_matter(
            scores in proptest::collection::vec(-3i32..3, 1..40),
            n in 1usize..8,
            seed in any::<u64>(),
        ) {
            let items: Vec<_> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| (chunk(&format!("d{i:02}"), ""), vec![*s as f32, 1.0]))
                .collect();
            let mut shuffled = items.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = MemoryIndex::from_vectors(2, items).unwrap().search(&[1.0, 0.5], n).unwrap();
            let b = MemoryIndex::from_vectors(2, shuffled).unwrap().search(&[1.0, 0.5], n).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), n.min(scores.len()));
            prop_assert!((a.iter().map(|d| d.weight).sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn assembly_keeps_context_suffix(
            ctx_words in proptest::collection::vec("[a-z]{1,6}", 0..30),
            doc_words in proptest::collection::vec("[a-z]{1,6}", 1..30),
            limit in 30usize..80,
        ) {
            let ctx = truncate_text(&ctx_words.join(" "), 30, &ReferenceTokenizer);
            let doc = ScoredDoc {
                doc_id: "d".into(),
                origin: Origin::SessionSummary { session: 1 },
                text: doc_words.join(" "),
                score: 0.0,
                weight: 1.0,
            };
            let out = assemble(Augmentation::Fid, &ctx, &[doc], limit, &ReferenceTokenizer);
            prop_assert!(out.items[0].text.ends_with(&ctx.text));
            prop_assert!(ReferenceTokenizer.count(&out.items[0].text) <= limit);
        }
    }
}
