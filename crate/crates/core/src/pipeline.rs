//! The chat turn pipeline: append the human utterance, write memory, retrieve,
//! render, assemble, generate, append the reply.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Embedder, Tokenizer};
use crate::chronicle::{Episode, SpeakerId, TimeGap, TurnRef};
use crate::context::{render_context, Augmentation, ContextDoc, ContextSource, ResponseSlot, StrategyConfig};
use crate::error::{BackendError, Error, Result};
use crate::memory::{MemoryEntry, MemoryStore, WriteDecision};
use crate::retrieval::{assemble, chunk_documents, AugmentedInput, MemoryIndex, ScoredDoc};

/// Everything a generator or scorer sees for one response slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedInput {
    pub context: ContextDoc,
    pub retrieved: Vec<ScoredDoc>,
    pub input: AugmentedInput,
}

/// Builds the model input for `slot`. Without augmentation the context holds
/// the long-term source inline; with augmentation it holds the current
/// session only, the long-term source is retrieved, and the post-truncation
/// context is the retrieval query.
pub fn prepare_input(
    episode: &Episode,
    slot: &ResponseSlot,
    cfg: &StrategyConfig,
    tokenizer: &dyn Tokenizer,
    retriever: &dyn Embedder,
    memory: Option<&[MemoryEntry]>,
) -> Result<PreparedInput> {
    cfg.validate()?;
    if cfg.augmentation == Augmentation::TruncateOnly {
        let context = render_context(episode, slot, cfg, tokenizer, memory)?;
        let mut input = AugmentedInput::bare(cfg.augmentation, &context);
        input.unaugmented = false;
        return Ok(PreparedInput { context, retrieved: Vec::new(), input });
    }
    let current_only = StrategyConfig { context_source: ContextSource::None, ..cfg.clone() };
    let context = render_context(episode, slot, &current_only, tokenizer, None)?;
    let docs = chunk_documents(episode, slot, cfg, memory)?;
    let index = MemoryIndex::build(docs, retriever)?;
    let retrieved = index.retrieve(&context.text, cfg.n_docs, retriever)?;
    let input = assemble(cfg.augmentation, &context, &retrieved, cfg.truncation, tokenizer);
    Ok(PreparedInput { context, retrieved, input })
}

/// [`prepare_input`] with the retriever chosen from a backend bundle.
pub fn prepare_with(
    backends: &Backends,
    episode: &Episode,
    slot: &ResponseSlot,
    cfg: &StrategyConfig,
    memory: Option<&[MemoryEntry]>,
) -> Result<PreparedInput> {
    let retriever = backends.retriever_for(cfg.augmentation);
    prepare_input(episode, slot, cfg, backends.tokenizer.as_ref(), retriever.as_ref(), memory)
}

/// Pipeline stage named in failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Append,
    Memory,
    Retrieval,
    Context,
    Generate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Append => "append",
            Stage::Memory => "memory",
            Stage::Retrieval => "retrieval",
            Stage::Context => "context",
            Stage::Generate => "generate",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct TurnError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

fn at(stage: Stage) -> impl FnOnce(Error) -> TurnError {
    move |source| TurnError { stage, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum MemoryDecisionView {
    Wrote { entry: MemoryEntry },
    Skipped,
    /// No human turn in this request.
    NotRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Exactly the documents handed to assembly.
    pub retrieved: Vec<ScoredDoc>,
    pub memory: MemoryDecisionView,
    pub context_truncated: bool,
    pub context_tokens: usize,
    pub dropped_tokens: usize,
    pub unaugmented: bool,
    pub config: StrategyConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub human_turn: Option<TurnRef>,
    pub bot_turn: TurnRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurnResponse {
    pub reply: String,
    pub diagnostics: Diagnostics,
}

/// One human message. The bot answers as the other speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub speaker: SpeakerId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<StrategyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

/// A bot message with no preceding human message, such as a session opening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyRequest {
    pub speaker: SpeakerId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<StrategyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

/// An episode with its predicted memory and idempotency bookkeeping.
#[derive(Debug, Clone)]
pub struct Conversation {
    pub episode: Episode,
    pub memory: MemoryStore,
    completed: HashMap<String, ChatTurnResponse>,
    /// Human turns appended under a key whose pipeline has not finished.
    pending: HashMap<String, TurnRef>,
}

impl Conversation {
    pub fn new(episode: Episode) -> Self {
        let memory = MemoryStore::new(&episode.id);
        Conversation { episode, memory, completed: HashMap::new(), pending: HashMap::new() }
    }

    pub fn open_session(&mut self, gap: Option<TimeGap>) -> Result<u32> {
        self.episode.open_session(gap)
    }

    fn current_session(&self) -> std::result::Result<u32, TurnError> {
        self.episode
            .latest_session()
            .map(|s| s.index)
            .ok_or_else(|| at(Stage::Append)(Error::protocol("no session is open")))
    }

    /// Runs the full pipeline for one human message. Replaying a completed
    /// idempotency key returns the stored response without side effects; a
    /// key whose earlier attempt failed resumes after the append.
    pub fn turn(
        &mut self,
        req: &TurnRequest,
        backends: &Backends,
        default_cfg: &StrategyConfig,
    ) -> std::result::Result<ChatTurnResponse, TurnError> {
        if let Some(done) = req.idempotency_key.as_ref().and_then(|k| self.completed.get(k)) {
            return Ok(done.clone());
        }
        let cfg = req.config.clone().unwrap_or_else(|| default_cfg.clone());
        cfg.validate().map_err(at(Stage::Context))?;
        let human = match req.idempotency_key.as_ref().and_then(|k| self.pending.get(k)) {
            Some(turn) => *turn,
            None => {
                let session = self.current_session()?;
                let turn = self
                    .episode
                    .append_utterance(session, req.speaker, req.text.clone())
                    .map_err(at(Stage::Append))?;
                if let Some(k) = &req.idempotency_key {
                    self.pending.insert(k.clone(), turn);
                }
                turn
            }
        };
        let decision = if self.memory.is_processed(human) {
            self.memory
                .all()
                .iter()
                .find(|e| e.source == human)
                .map(|e| MemoryDecisionView::Wrote { entry: e.clone() })
                .unwrap_or(MemoryDecisionView::Skipped)
        } else {
            match self
                .memory
                .write_turn(&self.episode, human, backends.summarizer.as_ref())
                .map_err(at(Stage::Memory))?
            {
                WriteDecision::Wrote(entry) => MemoryDecisionView::Wrote { entry },
                WriteDecision::Skipped => MemoryDecisionView::Skipped,
            }
        };
        let responder = self.episode.utterance(human).map(|u| u.speaker.other()).unwrap_or(req.speaker.other());
        let response = self.respond(responder, &cfg, backends, decision, Some(human))?;
        if let Some(k) = &req.idempotency_key {
            self.pending.remove(k);
            self.completed.insert(k.clone(), response.clone());
        }
        Ok(response)
    }

    /// Generates a bot message for `req.speaker` without a human message first.
    pub fn reply(
        &mut self,
        req: &ReplyRequest,
        backends: &Backends,
        default_cfg: &StrategyConfig,
    ) -> std::result::Result<ChatTurnResponse, TurnError> {
        if let Some(done) = req.idempotency_key.as_ref().and_then(|k| self.completed.get(k)) {
            return Ok(done.clone());
        }
        let cfg = req.config.clone().unwrap_or_else(|| default_cfg.clone());
        cfg.validate().map_err(at(Stage::Context))?;
        let response = self.respond(req.speaker, &cfg, backends, MemoryDecisionView::NotRun, None)?;
        if let Some(k) = &req.idempotency_key {
            self.completed.insert(k.clone(), response.clone());
        }
        Ok(response)
    }

    fn respond(
        &mut self,
        speaker: SpeakerId,
        cfg: &StrategyConfig,
        backends: &Backends,
        memory: MemoryDecisionView,
        human_turn: Option<TurnRef>,
    ) -> std::result::Result<ChatTurnResponse, TurnError> {
        let session = self.current_session()?;
        let turn = self.episode.session(session).map(|s| s.utterances.len() as u32).unwrap_or(0);
        let slot = ResponseSlot { session, turn, speaker };
        let prepared = prepare_with(backends, &self.episode, &slot, cfg, Some(self.memory.all()))
            .map_err(|e| match e {
                Error::Backend(_) => at(Stage::Retrieval)(e),
                other => at(Stage::Context)(other),
            })?;
        let reply = backends
            .generator
            .generate(&prepared.input, &backends.decoding)
            .map_err(|e| at(Stage::Generate)(e.into()))?;
        let reply = reply.trim().to_string();
        if reply.is_empty() {
            return Err(at(Stage::Generate)(Error::Backend(BackendError::SchemaMismatch(
                "generator returned an empty reply".into(),
            ))));
        }
        let bot_turn = self
            .episode
            .append_utterance(session, speaker, reply.clone())
            .map_err(at(Stage::Append))?;
        Ok(ChatTurnResponse {
            reply,
            diagnostics: Diagnostics {
                retrieved: prepared.retrieved,
                memory,
                context_truncated: prepared.context.truncated,
                context_tokens: prepared.context.token_count,
                dropped_tokens: prepared.context.dropped_tokens,
                unaugmented: prepared.input.unaugmented,
                config: cfg.clone(),
                human_turn,
                bot_turn,
            },
        })
    }
}

/// Conversations keyed by episode id; turns within one conversation are
/// serialized by its mutex, different conversations run independently.
#[derive(Debug, Default)]
pub struct ConversationStore {
    inner: RwLock<HashMap<String, Arc<Mutex<Conversation>>>>,
}

impl ConversationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, episode: Episode) -> String {
        let id = episode.id.clone();
        self.inner.write().insert(id.clone(), Arc::new(Mutex::new(Conversation::new(episode))));
        id
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Conversation>>> {
        self.inner
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("episode {id}")))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.inner.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.read().is_empty()
    }
}
