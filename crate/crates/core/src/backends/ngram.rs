//! Add-α smoothed n-gram language model and the desk-scale scorers built on
//! it.

use std::collections::HashMap;

use super::tokenizer::ReferenceTokenizer;
use super::{SequenceScorer, Tokenizer};
use crate::error::{BackendError, Error, Result};

const BOS: u32 = u32::MAX;

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Add-α smoothed n-gram model over the training vocabulary plus `<unk>`.
///
/// `P(w | ctx) = (count(ctx, w) + α) / (count(ctx) + α·V)` where `V` counts
/// the vocabulary and the unknown token. Contexts shorter than `order - 1`
/// are left-padded with a sentence-start marker that is never predicted.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    alpha: f64,
    vocab: HashMap<String, u32>,
    counts: HashMap<Vec<u32>, ContextCounts>,
    /// Counts for every shorter context length, used by [`NgramModel::interpolated_prob`].
    lower: HashMap<Vec<u32>, ContextCounts>,
}

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Trains a model on `corpus`, one text per item.
pub fn train_ngram<S: AsRef<str>>(corpus: &[S], order: usize, alpha: f64) -> Result<NgramModel> {
    if order == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("smoothing constant must be positive"));
    }
    let mut vocab: HashMap<String, u32> = HashMap::new();
    let mut sentences = Vec::with_capacity(corpus.len());
    for text in corpus {
        let ids: Vec<u32> = normalized_tokens(text.as_ref())
            .map(|t| {
                let next = vocab.len() as u32;
                *vocab.entry(t).or_insert(next)
            })
            .collect();
        if !ids.is_empty() {
            sentences.push(ids);
        }
    }
    if sentences.is_empty() {
        return Err(Error::invalid("training corpus has no tokens"));
    }

    let mut model = NgramModel { order, alpha, vocab, counts: HashMap::new(), lower: HashMap::new() };
    for ids in &sentences {
        let mut history: Vec<u32> = vec![BOS; order - 1];
        for &w in ids {
            for k in 0..order {
                let ctx = history[history.len() - k..].to_vec();
                let table = if k + 1 == order { &mut model.counts } else { &mut model.lower };
                let entry = table.entry(ctx).or_default();
                entry.total += 1;
                *entry.next.entry(w).or_default() += 1;
            }
            history.push(w);
        }
    }
    Ok(model)
}

fn normalized_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    ReferenceTokenizer.tokenize(text).into_iter().map(str::to_lowercase)
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Vocabulary size including `<unk>`.
    pub fn support_size(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn unk_id(&self) -> u32 {
        self.vocab.len() as u32
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.vocab.get(&token.to_lowercase()).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalized_tokens(text)
            .map(|t| self.vocab.get(&t).copied().unwrap_or(self.vocab.len() as u32))
            .collect()
    }

    /// Training contexts seen by the model (each of length `order - 1`).
    pub fn contexts(&self) -> impl Iterator<Item = &[u32]> {
        self.counts.keys().map(Vec::as_slice)
    }

    /// Smoothed conditional probability. `history` may be any length; only
    /// its last `order - 1` ids are used and missing positions count as
    /// sentence start.
    pub fn prob(&self, history: &[u32], word: u32) -> f64 {
        let ctx = self.context_key(history);
        let v = self.support_size() as f64;
        match self.counts.get(&ctx) {
            Some(c) => {
                let hits = c.next.get(&word).copied().unwrap_or(0) as f64;
                (hits + self.alpha) / (c.total as f64 + self.alpha * v)
            }
            None => 1.0 / v,
        }
    }

    /// Jelinek-Mercer interpolation of the add-α estimates of every order:
    /// `P_k = β·P̂_k + (1-β)·P_{k-1}` when the length-`k` context was seen in
    /// training and `P_k = P_{k-1}` otherwise, starting from the add-α
    /// unigram. Each step is a convex combination of distributions, so the
    /// result stays normalized.
    pub fn interpolated_prob(&self, history: &[u32], word: u32, beta: f64) -> f64 {
        let key = self.context_key(history);
        let v = self.support_size() as f64;
        let mut p = 1.0 / v;
        for k in 0..self.order {
            let ctx = &key[key.len() - k..];
            let table = if k + 1 == self.order { &self.counts } else { &self.lower };
            if let Some(c) = table.get(ctx) {
                let hits = c.next.get(&word).copied().unwrap_or(0) as f64;
                let est = (hits + self.alpha) / (c.total as f64 + self.alpha * v);
                p = if k == 0 { est } else { beta * est + (1.0 - beta) * p };
            }
        }
        p
    }

    /// Full distribution over ids `0..support_size()` for one history.
    pub fn distribution(&self, history: &[u32]) -> Vec<f64> {
        (0..self.support_size() as u32).map(|w| self.prob(history, w)).collect()
    }

    fn context_key(&self, history: &[u32]) -> Vec<u32> {
        let need = self.order - 1;
        let take = history.len().min(need);
        let mut ctx = vec![BOS; need - take];
        ctx.extend_from_slice(&history[history.len() - take..]);
        ctx
    }
}

impl SequenceScorer for NgramModel {
    fn name(&self) -> &str {
        "ngram"
    }

    fn token_log_probs(&self, context: &str, target: &str) -> Result<Vec<f64>, BackendError> {
        let mut history = self.encode(context);
        let target = self.encode(target);
        let mut out = Vec::with_capacity(target.len());
        for w in target {
            out.push(self.prob(&history, w).ln());
            history.push(w);
        }
        Ok(out)
    }
}

/// Interpolated n-gram model mixed with a unigram cache over the scoring
/// context: `P(w) = (1-λ)·P_interp(w | last n-1) + λ·count_hist(w)/|hist|`, where the
/// history is the whole context plus the target prefix. With an empty
/// history the n-gram probability is used alone.
///
/// The cache is what lets a short-order model profit from long contexts.
#[derive(Debug, Clone)]
pub struct CachedNgramScorer {
    model: NgramModel,
    cache_weight: f64,
}

pub const DEFAULT_CACHE_WEIGHT: f64 = 0.2;
/// Weight of each order over the next lower one in the interpolated model.
pub const INTERPOLATION_BETA: f64 = 0.7;

impl CachedNgramScorer {
    pub fn new(model: NgramModel, cache_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&cache_weight) {
            return Err(Error::invalid("cache weight must lie in [0, 1]"));
        }
        Ok(CachedNgramScorer { model, cache_weight })
    }

    pub fn model(&self) -> &NgramModel {
        &self.model
    }

    /// Interpolated distribution over all ids for the given history.
    pub fn distribution(&self, history: &[u32]) -> Vec<f64> {
        let mut dist: Vec<f64> = (0..self.model.support_size() as u32)
            .map(|w| self.model.interpolated_prob(history, w, INTERPOLATION_BETA))
            .collect();
        if history.is_empty() {
            return dist;
        }
        let n = history.len() as f64;
        for p in &mut dist {
            *p *= 1.0 - self.cache_weight;
        }
        for &w in history {
            dist[w as usize] += self.cache_weight / n;
        }
        dist
    }
}

impl SequenceScorer for CachedNgramScorer {
    fn name(&self) -> &str {
        "cached-ngram"
    }

    fn token_log_probs(&self, context: &str, target: &str) -> Result<Vec<f64>, BackendError> {
        let mut history = self.model.encode(context);
        let mut cache: HashMap<u32, u64> = HashMap::new();
        for &w in &history {
            *cache.entry(w).or_default() += 1;
        }
        let target = self.model.encode(target);
        let mut out = Vec::with_capacity(target.len());
        for w in target {
            let base = self.model.interpolated_prob(&history, w, INTERPOLATION_BETA);
            let p = if history.is_empty() {
                base
            } else {
                let hits = cache.get(&w).copied().unwrap_or(0) as f64;
                (1.0 - self.cache_weight) * base + self.cache_weight * hits / history.len() as f64
            };
            out.push(p.ln());
            history.push(w);
            *cache.entry(w).or_default() += 1;
        }
        Ok(out)
    }
}

/// Context-blind scorer assigning `1/V` to every token.
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer {
    vocab_size: usize,
}

impl UniformScorer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid("uniform scorer needs a vocabulary of at least 2"));
        }
        Ok(UniformScorer { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

impl SequenceScorer for UniformScorer {
    fn name(&self) -> &str {
        "uniform"
    }

    fn token_log_probs(&self, _context: &str, target: &str) -> Result<Vec<f64>, BackendError> {
        let lp = -(self.vocab_size as f64).ln();
        Ok(vec![lp; ReferenceTokenizer.count(target)])
    }
}
