//! Pluggable model backends and their desk-scale reference implementations.
//!
//! | kind       | reference                     | remote                 |
//! |------------|-------------------------------|------------------------|
//! | tokenizer  | [`ReferenceTokenizer`]        | -                      |
//! | embedder   | [`HashEmbedder`]              | [`RemoteClient`]       |
//! | summarizer | [`HeuristicSummarizer`]       | [`RemoteClient`]       |
//! | generator  | [`EchoGenerator`]             | [`RemoteClient`]       |
//! | scorer     | [`CachedNgramScorer`], [`UniformScorer`] | [`RemoteClient`] |
//!
//! Reference backends are pure functions of their inputs.

mod embed;
mod generate;
mod ngram;
mod remote;
mod summarize;
mod tokenizer;

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use embed::{dot, hash_embed, HashEmbedder};
pub use generate::EchoGenerator;
pub use ngram::{
    train_ngram, CachedNgramScorer, NgramModel, UniformScorer, DEFAULT_ALPHA, DEFAULT_CACHE_WEIGHT,
};
pub use remote::{RemoteClient, RemoteSettings, WireRequest, WireResponse, WIRE_VERSION};
pub use summarize::{heuristic_summarize, GoldSummarizer, HeuristicSummarizer};
pub use tokenizer::ReferenceTokenizer;

use crate::chronicle::{SpeakerId, TurnRef, Utterance};
use crate::error::{BackendError, Error, Result};
use crate::memory::MemoryEntry;
use crate::retrieval::AugmentedInput;

pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    /// Byte ranges of the tokens of `text`, in order.
    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.spans(text).into_iter().map(|r| &text[r]).collect()
    }

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, BackendError>;
}

/// What a summarizer sees for one turn.
#[derive(Debug, Clone, Copy)]
pub struct SummarizeRequest<'a> {
    pub turn: TurnRef,
    pub speaker: SpeakerId,
    pub text: &'a str,
    /// Current-session dialogue up to and including the turn.
    pub history: &'a [Utterance],
    /// Everything already in long-term memory.
    pub memory: &'a [MemoryEntry],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SummaryOutput {
    Summary { text: String, about: SpeakerId },
    NoSummary,
}

pub trait Summarizer: Send + Sync {
    fn name(&self) -> &str;
    fn summarize(&self, req: &SummarizeRequest<'_>) -> Result<SummaryOutput, BackendError>;
}

/// Decoding parameters forwarded to generative backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub beam_size: u32,
    pub min_length: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams { beam_size: 3, min_length: 10 }
    }
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, input: &AugmentedInput, params: &DecodingParams)
        -> Result<String, BackendError>;
}

/// Total negative log-likelihood (nats) of a target and its token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nll {
    pub total: f64,
    pub tokens: usize,
}

impl Nll {
    pub fn perplexity(&self) -> f64 {
        (self.total / self.tokens as f64).exp()
    }
}

pub trait SequenceScorer: Send + Sync {
    fn name(&self) -> &str;

    /// Natural-log probability of every target token given the context and
    /// the preceding target tokens.
    fn token_log_probs(&self, context: &str, target: &str) -> Result<Vec<f64>, BackendError>;

    /// Scores a target against several separately assembled inputs (FiD).
    /// Desk-scale scorers cannot fuse in a decoder, so the default
    /// concatenates the inputs in the given order into one context.
    fn fused_token_log_probs(
        &self,
        contexts: &[&str],
        target: &str,
    ) -> Result<Vec<f64>, BackendError> {
        self.token_log_probs(&contexts.join("\n"), target)
    }

    fn sequence_nll(&self, context: &str, target: &str) -> Result<Nll> {
        let lps = self.token_log_probs(context, target)?;
        if lps.is_empty() {
            return Err(Error::invalid("target has no tokens"));
        }
        let total = -lps.iter().sum::<f64>();
        if !total.is_finite() {
            return Err(BackendError::Failed(format!("{} produced a non-finite nll", self.name())).into());
        }
        Ok(Nll { total, tokens: lps.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Tokenizer,
    Embedder,
    Summarizer,
    Generator,
    Scorer,
}

/// One configured backend: its kind, implementation name and settings.
///
/// Implementation names: `reference` (tokenizer), `hash` (embedder),
/// `heuristic` (summarizer), `echo` (generator), `cached-ngram`, `ngram`,
/// `uniform` (scorers) and `remote` for every kind but the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<DecodingParams>,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind, name: impl Into<String>) -> Self {
        BackendDescriptor {
            kind,
            name: name.into(),
            dimension: None,
            order: None,
            alpha: None,
            cache_weight: None,
            vocab_size: None,
            endpoint: None,
            decoding: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == Some(0) {
            return Err(Error::invalid("embedder dimension must be positive"));
        }
        if self.order == Some(0) {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if self.name == "remote" && self.endpoint.is_none() {
            return Err(Error::invalid(format!("remote {:?} backend has no endpoint", self.kind)));
        }
        if self.kind == BackendKind::Generator && self.name == "remote" && self.decoding.is_none() {
            return Err(Error::invalid("generative backend needs decoding params"));
        }
        Ok(())
    }
}

/// Backend selection as read from a TOML config file.
///
/// ```toml
/// [embedder]
/// name = "hash"
/// dimension = 256
///
/// [generator]
/// name = "remote"
/// endpoint = "http://localhost:9000/v1/infer"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    pub embedder: NamedBackend,
    pub rag_embedder: Option<NamedBackend>,
    pub summarizer: NamedBackend,
    pub generator: NamedBackend,
    pub scorer: NamedBackend,
    pub remote: RemoteSettings,
}

/// Descriptor body without the `kind`, which the config table name supplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedBackend {
    pub name: String,
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub cache_weight: Option<f64>,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub endpoint: Option<String>,
}

impl NamedBackend {
    pub fn named(name: &str) -> Self {
        NamedBackend {
            name: name.to_string(),
            dimension: None,
            order: None,
            alpha: None,
            cache_weight: None,
            vocab_size: None,
            endpoint: None,
        }
    }

    pub fn descriptor(&self, kind: BackendKind, remote: &RemoteSettings) -> BackendDescriptor {
        let endpoint = self.endpoint.clone().or_else(|| {
            (self.name == "remote").then(|| remote.endpoint.clone()).flatten()
        });
        BackendDescriptor {
            kind,
            name: self.name.clone(),
            dimension: self.dimension,
            order: self.order,
            alpha: self.alpha,
            cache_weight: self.cache_weight,
            vocab_size: self.vocab_size,
            endpoint,
            decoding: (kind == BackendKind::Generator).then_some(remote.decoding),
        }
    }
}

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_NGRAM_ORDER: usize = 3;

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            embedder: NamedBackend { dimension: Some(DEFAULT_EMBED_DIM), ..NamedBackend::named("hash") },
            rag_embedder: None,
            summarizer: NamedBackend::named("heuristic"),
            generator: NamedBackend::named("echo"),
            scorer: NamedBackend { order: Some(DEFAULT_NGRAM_ORDER), ..NamedBackend::named("cached-ngram") },
            remote: RemoteSettings::default(),
        }
    }
}

impl BackendsConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("backend config: {e}")))
    }

    /// Applies `LONGMEM_ENDPOINT`, `LONGMEM_EMBED_DIM` and
    /// `LONGMEM_NGRAM_ORDER` from the process environment.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn apply_overrides(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(url) = get("LONGMEM_ENDPOINT") {
            self.remote.endpoint = Some(url);
        }
        if let Some(dim) = get("LONGMEM_EMBED_DIM") {
            let dim = dim
                .parse()
                .map_err(|_| Error::invalid(format!("LONGMEM_EMBED_DIM={dim:?} is not a number")))?;
            self.embedder.dimension = Some(dim);
        }
        if let Some(order) = get("LONGMEM_NGRAM_ORDER") {
            let order = order.parse().map_err(|_| {
                Error::invalid(format!("LONGMEM_NGRAM_ORDER={order:?} is not a number"))
            })?;
            self.scorer.order = Some(order);
        }
        Ok(())
    }

    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        let mut out = vec![
            self.embedder.descriptor(BackendKind::Embedder, &self.remote),
            self.summarizer.descriptor(BackendKind::Summarizer, &self.remote),
            self.generator.descriptor(BackendKind::Generator, &self.remote),
            self.scorer.descriptor(BackendKind::Scorer, &self.remote),
        ];
        if let Some(rag) = &self.rag_embedder {
            out.push(rag.descriptor(BackendKind::Embedder, &self.remote));
        }
        out
    }

    /// Instantiates the runtime backends (everything but the scorer, which
    /// needs training data; see [`build_scorer`]).
    pub fn build(&self) -> Result<Backends> {
        for d in self.descriptors() {
            d.validate()?;
        }
        let remote = || -> Result<Arc<RemoteClient>> {
            Ok(Arc::new(RemoteClient::new(self.remote.clone())?))
        };
        let embedder = |nb: &NamedBackend| -> Result<Arc<dyn Embedder>> {
            match nb.name.as_str() {
                "hash" => Ok(Arc::new(HashEmbedder::new(nb.dimension.unwrap_or(DEFAULT_EMBED_DIM))?)),
                "remote" => {
                    let mut settings = self.remote.clone();
                    settings.endpoint = nb.endpoint.clone().or(settings.endpoint);
                    settings.embed_dimension = nb.dimension.unwrap_or(settings.embed_dimension);
                    Ok(Arc::new(RemoteClient::new(settings)?))
                }
                other => Err(Error::invalid(format!("unknown embedder {other:?}"))),
            }
        };
        let summarizer: Arc<dyn Summarizer> = match self.summarizer.name.as_str() {
            "heuristic" => Arc::new(HeuristicSummarizer),
            "remote" => remote()?,
            other => return Err(Error::invalid(format!("unknown summarizer {other:?}"))),
        };
        let generator: Arc<dyn Generator> = match self.generator.name.as_str() {
            "echo" => Arc::new(EchoGenerator),
            "remote" => remote()?,
            other => return Err(Error::invalid(format!("unknown generator {other:?}"))),
        };
        Ok(Backends {
            tokenizer: Arc::new(ReferenceTokenizer),
            embedder: embedder(&self.embedder)?,
            rag_embedder: self.rag_embedder.as_ref().map(embedder).transpose()?,
            summarizer,
            generator,
            decoding: self.remote.decoding,
        })
    }
}

/// Builds the configured scorer. N-gram scorers are trained on `corpus`.
pub fn build_scorer<S: AsRef<str>>(
    config: &BackendsConfig,
    corpus: &[S],
) -> Result<Arc<dyn SequenceScorer>> {
    let nb = &config.scorer;
    let order = nb.order.unwrap_or(DEFAULT_NGRAM_ORDER);
    let alpha = nb.alpha.unwrap_or(DEFAULT_ALPHA);
    Ok(match nb.name.as_str() {
        "cached-ngram" => Arc::new(CachedNgramScorer::new(
            train_ngram(corpus, order, alpha)?,
            nb.cache_weight.unwrap_or(DEFAULT_CACHE_WEIGHT),
        )?),
        "ngram" => Arc::new(train_ngram(corpus, order, alpha)?),
        "uniform" => Arc::new(UniformScorer::new(nb.vocab_size.unwrap_or(1000))?),
        "remote" => {
            let mut settings = config.remote.clone();
            settings.endpoint = nb.endpoint.clone().or(settings.endpoint);
            Arc::new(RemoteClient::new(settings)?)
        }
        other => return Err(Error::invalid(format!("unknown scorer {other:?}"))),
    })
}

/// The runtime backend bundle used by the chat pipeline.
#[derive(Clone)]
pub struct Backends {
    pub tokenizer: Arc<dyn Tokenizer>,
    pub embedder: Arc<dyn Embedder>,
    /// Retriever used for FiD-RAG scoring; falls back to `embedder`.
    pub rag_embedder: Option<Arc<dyn Embedder>>,
    pub summarizer: Arc<dyn Summarizer>,
    pub generator: Arc<dyn Generator>,
    pub decoding: DecodingParams,
}

impl Backends {
    /// All-reference bundle: word/punct tokenizer, 256-d hash embedder,
    /// heuristic summarizer, echo generator.
    pub fn reference() -> Self {
        BackendsConfig::default().build().expect("default backend config is valid")
    }

    pub fn retriever_for(&self, mode: crate::context::Augmentation) -> &Arc<dyn Embedder> {
        match mode {
            crate::context::Augmentation::FidRag => self.rag_embedder.as_ref().unwrap_or(&self.embedder),
            _ => &self.embedder,
        }
    }
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("tokenizer", &self.tokenizer.name())
            .field("embedder", &self.embedder.name())
            .field("rag_embedder", &self.rag_embedder.as_ref().map(|e| e.name().to_string()))
            .field("summarizer", &self.summarizer.name())
            .field("generator", &self.generator.name())
            .field("decoding", &self.decoding)
            .finish()
    }
}
