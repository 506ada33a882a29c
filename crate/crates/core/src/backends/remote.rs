//! JSON-over-HTTP client for remote inference servers.
//!
//! Every call is a `POST` of
//! `{"version": "v1", "task": ..., "inputs": [...], "params": {...}}`
//! answered by `{"outputs": [...]}`. Tasks and their payloads:
//!
//! | task        | inputs                          | outputs                              |
//! |-------------|---------------------------------|--------------------------------------|
//! | `generate`  | augmented input strings         | `[reply]`                            |
//! | `embed`     | texts                           | one float array per text             |
//! | `summarize` | `[dialogue history]`            | `[{"summary": str or null, "about"}]`|
//! | `score`     | `[{"context", "target"}]`       | `[[log p per target token]]`         |
//! | `score_fid` | `[{"contexts": [..], "target"}]`| `[[log p per target token]]`         |

use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{
    DecodingParams, Embedder, Generator, ReferenceTokenizer, SequenceScorer, SummarizeRequest,
    Summarizer, SummaryOutput, Tokenizer,
};
use crate::chronicle::SpeakerId;
use crate::error::{BackendError, Error, Result};
use crate::retrieval::AugmentedInput;

pub const WIRE_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub version: String,
    pub task: String,
    pub inputs: Vec<Value>,
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub outputs: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSettings {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub decoding: DecodingParams,
    pub embed_dimension: usize,
    /// Inputs longer than this many reference tokens are refused locally.
    pub max_input_tokens: Option<usize>,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        RemoteSettings {
            endpoint: None,
            timeout_ms: 30_000,
            max_in_flight: 4,
            decoding: DecodingParams::default(),
            embed_dimension: super::DEFAULT_EMBED_DIM,
            max_input_tokens: None,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock();
        while *active >= self.limit {
            self.freed.wait(&mut active);
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone)]
pub struct RemoteClient {
    agent: ureq::Agent,
    settings: RemoteSettings,
    endpoint: String,
    in_flight: Arc<InFlight>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("settings", &self.settings).finish()
    }
}

impl RemoteClient {
    pub fn new(settings: RemoteSettings) -> Result<Self> {
        let endpoint = settings
            .endpoint
            .clone()
            .ok_or_else(|| Error::invalid("remote backend has no endpoint"))?;
        if settings.max_in_flight == 0 {
            return Err(Error::invalid("max_in_flight must be at least 1"));
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(settings.timeout_ms)))
            .http_status_as_error(true)
            .build();
        Ok(RemoteClient {
            agent: ureq::Agent::new_with_config(config),
            in_flight: Arc::new(InFlight {
                limit: settings.max_in_flight,
                active: Mutex::new(0),
                freed: Condvar::new(),
            }),
            endpoint,
            settings,
        })
    }

    pub fn settings(&self) -> &RemoteSettings {
        &self.settings
    }

    fn check_budget<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<(), BackendError> {
        if let Some(limit) = self.settings.max_input_tokens {
            for t in texts {
                let tokens = ReferenceTokenizer.count(t);
                if tokens > limit {
                    return Err(BackendError::OverBudget { tokens, limit });
                }
            }
        }
        Ok(())
    }

    /// Sends one wire request and returns its `outputs`.
    pub fn call(
        &self,
        task: &str,
        inputs: Vec<Value>,
        params: Map<String, Value>,
    ) -> Result<Vec<Value>, BackendError> {
        let request = WireRequest {
            version: WIRE_VERSION.to_string(),
            task: task.to_string(),
            inputs,
            params,
        };
        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let elapsed_ms = || started.elapsed().as_millis() as u64;
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(&request)
            .map_err(|e| map_transport(e, elapsed_ms()))?;
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| match map_transport(e, elapsed_ms()) {
                BackendError::Transport(msg) => BackendError::SchemaMismatch(msg),
                other => other,
            })?;
        let parsed: WireResponse = serde_json::from_value(body)
            .map_err(|e| BackendError::SchemaMismatch(e.to_string()))?;
        Ok(parsed.outputs)
    }

    fn decoding_params(&self) -> Map<String, Value> {
        let mut params = Map::new();
        params.insert("beam_size".into(), json!(self.settings.decoding.beam_size));
        params.insert("min_length".into(), json!(self.settings.decoding.min_length));
        params
    }
}

fn map_transport(err: ureq::Error, elapsed_ms: u64) -> BackendError {
    match err {
        ureq::Error::StatusCode(413) => BackendError::OverBudget { tokens: 0, limit: 0 },
        ureq::Error::StatusCode(status) => BackendError::Http { status },
        ureq::Error::Timeout(_) => BackendError::Timeout { elapsed_ms },
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => {
            BackendError::Timeout { elapsed_ms }
        }
        ureq::Error::Json(e) => BackendError::SchemaMismatch(e.to_string()),
        other => BackendError::Transport(other.to_string()),
    }
}

fn schema(msg: impl Into<String>) -> BackendError {
    BackendError::SchemaMismatch(msg.into())
}

fn float_array(v: &Value) -> Result<Vec<f64>, BackendError> {
    v.as_array()
        .ok_or_else(|| schema("expected an array of numbers"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| schema("expected a number")))
        .collect()
}

fn single_output(outputs: Vec<Value>) -> Result<Value, BackendError> {
    let mut it = outputs.into_iter();
    match (it.next(), it.next()) {
        (Some(v), None) => Ok(v),
        _ => Err(schema("expected exactly one output")),
    }
}

impl Generator for RemoteClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate(
        &self,
        input: &AugmentedInput,
        params: &DecodingParams,
    ) -> Result<String, BackendError> {
        self.check_budget(input.items.iter().map(|i| i.text.as_str()))?;
        let mut p = Map::new();
        p.insert("beam_size".into(), json!(params.beam_size));
        p.insert("min_length".into(), json!(params.min_length));
        p.insert("mode".into(), serde_json::to_value(input.mode).unwrap_or(Value::Null));
        if input.items.iter().any(|i| i.weight.is_some()) {
            p.insert("weights".into(), json!(input.items.iter().map(|i| i.weight).collect::<Vec<_>>()));
        }
        let inputs = input.items.iter().map(|i| Value::String(i.text.clone())).collect();
        let out = single_output(self.call("generate", inputs, p)?)?;
        match out {
            Value::String(s) if !s.trim().is_empty() => Ok(s),
            _ => Err(schema("generate output must be a nonempty string")),
        }
    }
}

impl Embedder for RemoteClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn dimension(&self) -> usize {
        self.settings.embed_dimension
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.check_budget(texts.iter().copied())?;
        let mut p = Map::new();
        p.insert("dimension".into(), json!(self.settings.embed_dimension));
        let inputs = texts.iter().map(|t| Value::String(t.to_string())).collect();
        let outputs = self.call("embed", inputs, p)?;
        if outputs.len() != texts.len() {
            return Err(schema(format!("expected {} embeddings, got {}", texts.len(), outputs.len())));
        }
        outputs
            .iter()
            .map(|v| {
                let xs = float_array(v)?;
                if xs.len() != self.settings.embed_dimension {
                    return Err(schema(format!(
                        "embedding has dimension {}, expected {}",
                        xs.len(),
                        self.settings.embed_dimension
                    )));
                }
                Ok(xs.into_iter().map(|x| x as f32).collect())
            })
            .collect()
    }
}

impl Summarizer for RemoteClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn summarize(&self, req: &SummarizeRequest<'_>) -> Result<SummaryOutput, BackendError> {
        let history = req
            .history
            .iter()
            .map(|u| format!("{}: {}", u.speaker.tag(), u.text))
            .collect::<Vec<_>>()
            .join("\n");
        self.check_budget([history.as_str()])?;
        let mut p = self.decoding_params();
        p.insert("speaker".into(), json!(req.speaker));
        p.insert(
            "memory".into(),
            json!(req.memory.iter().map(|e| e.text.as_str()).collect::<Vec<_>>()),
        );
        let out = single_output(self.call("summarize", vec![Value::String(history)], p)?)?;
        let obj = out.as_object().ok_or_else(|| schema("summarize output must be an object"))?;
        let about = match obj.get("about") {
            None | Some(Value::Null) => req.speaker,
            Some(v) => serde_json::from_value::<SpeakerId>(v.clone())
                .map_err(|e| schema(format!("bad speaker: {e}")))?,
        };
        match obj.get("summary") {
            Some(Value::Null) | None => Ok(SummaryOutput::NoSummary),
            Some(Value::String(s)) if s.trim().is_empty() => Ok(SummaryOutput::NoSummary),
            Some(Value::String(s)) => Ok(SummaryOutput::Summary { text: s.clone(), about }),
            Some(_) => Err(schema("summary must be a string or null")),
        }
    }
}

impl SequenceScorer for RemoteClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn token_log_probs(&self, context: &str, target: &str) -> Result<Vec<f64>, BackendError> {
        self.check_budget([context])?;
        let input = json!({ "context": context, "target": target });
        float_array(&single_output(self.call("score", vec![input], Map::new())?)?)
    }

    fn fused_token_log_probs(
        &self,
        contexts: &[&str],
        target: &str,
    ) -> Result<Vec<f64>, BackendError> {
        self.check_budget(contexts.iter().copied())?;
        let input = json!({ "contexts": contexts, "target": target });
        float_array(&single_output(self.call("score_fid", vec![input], Map::new())?)?)
    }
}
