//! Long-term conversational memory engine.
//!
//! Stores multi-session dialogues ([`chronicle`]), loads and profiles the
//! Multi-Session Chat release ([`ingest`]), renders and truncates model
//! contexts ([`context`]), keeps a summarize-or-skip long-term memory
//! ([`memory`]), runs exact dense retrieval with RAG/FiD assembly
//! ([`retrieval`]) and evaluates context strategies per session
//! ([`eval`]). Every neural component sits behind a trait in
//! [`backends`], with deterministic desk-scale reference implementations.

pub mod backends;
pub mod chronicle;
pub mod context;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod memory;
pub mod pipeline;
pub mod retrieval;

pub use error::{BackendError, Error, Result};
