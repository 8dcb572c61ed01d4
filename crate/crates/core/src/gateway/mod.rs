//! Uniform access to a chat model and an embedding model.
//!
//! Every LLM call in the engine goes through [`Gateway::complete`], which adds
//! per-call timeouts, transport retries, a content-addressed response cache
//! and token accounting on top of a pluggable [`ChatBackend`]. Embeddings go
//! through [`Gateway::embed_batch`] and come back unit-normalized.
//!
//! Backends:
//! - [`ScriptedBackend`]: rule table keyed on prompt substrings, for tests.
//! - [`SyntheticBackend`]: deterministic replies derived from the prompt's
//!   machine-readable header lines; exercises every stage without a model.
//! - [`HttpChatBackend`] / [`HttpEmbeddingBackend`]: chat-completions style
//!   HTTP endpoints.
//! - [`HashEmbedder`]: seeded token hashing into a fixed-size vector.

pub(crate) mod cache;
mod hashing;
mod http;
mod scripted;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use cache::{CachedReply, ResponseCache};
pub use hashing::HashEmbedder;
pub use http::{HttpChatBackend, HttpConfig, HttpEmbeddingBackend};
pub use scripted::{Script, ScriptRule, ScriptedBackend};
pub use synthetic::SyntheticBackend;

use crate::error::{Error, Result};

/// What a chat call is for; part of the cache key and the default timeout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TreeSummary,
    Relation,
    Differentiation,
    Decision,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::TreeSummary => "tree_summary",
            Role::Relation => "relation",
            Role::Differentiation => "differentiation",
            Role::Decision => "decision",
        }
    }

    pub fn default_timeout(self) -> Duration {
        match self {
            Role::TreeSummary => Duration::from_secs(90),
            Role::Relation => Duration::from_secs(75),
            Role::Differentiation => Duration::from_secs(45),
            Role::Decision => Duration::from_secs(90),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ChatCall {
    pub role: Role,
    pub prompt: String,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl ChatCall {
    pub fn new(role: Role, prompt: impl Into<String>) -> Self {
        ChatCall {
            role,
            prompt: prompt.into(),
            timeout: role.default_timeout(),
            max_retries: 1,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Seconds.
    pub latency: f64,
    pub cache_hit: bool,
}

impl ChatReply {
    /// Tokens this reply added to the account (zero for cache hits).
    pub fn billed_tokens(&self) -> u64 {
        if self.cache_hit {
            0
        } else {
            self.prompt_tokens + self.completion_tokens
        }
    }
}

/// Raw backend output before accounting.
#[derive(Clone, Debug, Default)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    /// Latency to report instead of wall-clock time (deterministic backends).
    pub simulated_latency: Option<Duration>,
}

pub trait ChatBackend: Send + Sync {
    /// Stable identifier; part of the cache key.
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, timeout: Duration) -> Result<BackendReply>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Unit-normalized embedding. `norm` is the length before normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    /// Normalize a raw vector. `None` for zero or non-finite input.
    pub fn from_raw(raw: Vec<f64>) -> Option<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        Some(EmbeddingVector {
            values: raw.into_iter().map(|v| v / norm).collect(),
            norm,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity; a dot product since both sides are unit length.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Snapshot of the gateway's counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub attempts: u64,
    pub cache_hits: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub embedding_batches: u64,
}

impl Usage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Default)]
struct Accounting {
    calls: AtomicU64,
    attempts: AtomicU64,
    cache_hits: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    embedding_batches: AtomicU64,
}

/// One backend attempt, as recorded in the call log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub role: Role,
    pub attempt: u32,
    pub outcome: AttemptOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Ok,
    Timeout,
    Failed(String),
}

pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbeddingBackend>,
    cache: Option<ResponseCache>,
    accounting: Accounting,
    log: Mutex<Vec<Attempt>>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Gateway {
    /// Gateway with an in-memory response cache.
    pub fn new(chat: Arc<dyn ChatBackend>, embedder: Arc<dyn EmbeddingBackend>) -> Self {
        Gateway {
            chat,
            embedder,
            cache: Some(ResponseCache::in_memory()),
            accounting: Accounting::default(),
            log: Mutex::new(Vec::new()),
            inflight: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cache(mut self, cache: Option<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn without_cache(self) -> Self {
        self.with_cache(None)
    }

    pub fn chat_backend_id(&self) -> String {
        self.chat.id()
    }

    pub fn usage(&self) -> Usage {
        let a = &self.accounting;
        Usage {
            calls: a.calls.load(Ordering::SeqCst),
            attempts: a.attempts.load(Ordering::SeqCst),
            cache_hits: a.cache_hits.load(Ordering::SeqCst),
            prompt_tokens: a.prompt_tokens.load(Ordering::SeqCst),
            completion_tokens: a.completion_tokens.load(Ordering::SeqCst),
            embedding_batches: a.embedding_batches.load(Ordering::SeqCst),
        }
    }

    pub fn attempts(&self) -> Vec<Attempt> {
        self.log.lock().expect("call log poisoned").clone()
    }

    pub fn cache_key(&self, call: &ChatCall) -> String {
        ResponseCache::key(&self.chat.id(), call.role, &call.prompt)
    }

    pub fn complete(&self, call: &ChatCall) -> Result<ChatReply> {
        if call.timeout.is_zero() {
            return Err(Error::InvalidParams("timeout must be positive".into()));
        }
        self.accounting.calls.fetch_add(1, Ordering::SeqCst);
        let Some(cache) = &self.cache else {
            return self.call_backend(call);
        };

        let key = self.cache_key(call);
        let slot = {
            let mut inflight = self.inflight.lock().expect("inflight map poisoned");
            inflight.entry(key.clone()).or_default().clone()
        };
        let _guard = slot.lock().expect("inflight slot poisoned");
        if let Some(hit) = cache.get(&key)? {
            self.accounting.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(ChatReply {
                text: hit.text,
                prompt_tokens: hit.prompt_tokens,
                completion_tokens: hit.completion_tokens,
                latency: 0.0,
                cache_hit: true,
            });
        }
        let reply = self.call_backend(call)?;
        cache.put(
            &key,
            CachedReply {
                backend: self.chat.id(),
                role: call.role,
                text: reply.text.clone(),
                prompt_tokens: reply.prompt_tokens,
                completion_tokens: reply.completion_tokens,
            },
        )?;
        Ok(reply)
    }

    fn call_backend(&self, call: &ChatCall) -> Result<ChatReply> {
        let attempts = call.max_retries + 1;
        let mut last = Error::Timeout { attempts: 0 };
        for attempt in 1..=attempts {
            self.accounting.attempts.fetch_add(1, Ordering::SeqCst);
            let started = Instant::now();
            let outcome = self.attempt(call, attempt);
            let (logged, result) = match outcome {
                Ok(reply) => (AttemptOutcome::Ok, Ok(reply)),
                Err(e @ Error::Timeout { .. }) => (AttemptOutcome::Timeout, Err(e)),
                Err(e) => (AttemptOutcome::Failed(e.to_string()), Err(e)),
            };
            self.log.lock().expect("call log poisoned").push(Attempt {
                role: call.role,
                attempt,
                outcome: logged,
            });
            match result {
                Ok(raw) => return self.account(call, raw, started.elapsed()),
                Err(e) if e.is_retryable() => {
                    log::warn!("{} call attempt {attempt}/{attempts} failed: {e}", call.role);
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(match last {
            Error::Timeout { .. } => Error::Timeout { attempts },
            other => other,
        })
    }

    fn attempt(&self, call: &ChatCall, attempt: u32) -> Result<BackendReply> {
        let (tx, rx) = mpsc::channel();
        let backend = Arc::clone(&self.chat);
        let prompt = call.prompt.clone();
        let timeout = call.timeout;
        std::thread::spawn(move || {
            let _ = tx.send(backend.complete(&prompt, timeout));
        });
        match rx.recv_timeout(timeout) {
            Ok(result) => result,
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout { attempts: attempt }),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Transport("backend worker exited without a reply".into()))
            }
        }
    }

    fn account(&self, call: &ChatCall, raw: BackendReply, elapsed: Duration) -> Result<ChatReply> {
        if raw.text.trim().is_empty() {
            return Err(Error::EmptyReply);
        }
        let prompt_tokens = raw.prompt_tokens.unwrap_or_else(|| estimate_tokens(&call.prompt));
        let completion_tokens = raw.completion_tokens.unwrap_or_else(|| estimate_tokens(&raw.text));
        self.accounting
            .prompt_tokens
            .fetch_add(prompt_tokens, Ordering::SeqCst);
        self.accounting
            .completion_tokens
            .fetch_add(completion_tokens, Ordering::SeqCst);
        Ok(ChatReply {
            text: raw.text,
            prompt_tokens,
            completion_tokens,
            latency: raw.simulated_latency.unwrap_or(elapsed).as_secs_f64(),
            cache_hit: false,
        })
    }

    /// Embed texts, one unit vector per input in input order.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.accounting
            .embedding_batches
            .fetch_add(1, Ordering::SeqCst);
        let raw = self.embedder.embed(texts)?;
        if raw.len() != texts.len() {
            return Err(Error::Transport(format!(
                "embedding backend returned {} vectors for {} inputs",
                raw.len(),
                texts.len()
            )));
        }
        let dim = raw[0].len();
        raw.into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                EmbeddingVector::from_raw(v)
                    .ok_or_else(|| Error::Transport("zero or non-finite embedding".into()))
            })
            .collect()
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }
}

/// Whitespace token count; used when a backend does not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
