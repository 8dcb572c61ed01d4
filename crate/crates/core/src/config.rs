//! Layered run configuration: defaults, then a JSON file, then environment
//! variables (secrets and endpoints only), then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    ChatBackend, EmbeddingBackend, Gateway, HashEmbedder, HttpChatBackend, HttpConfig, HttpEmbeddingBackend,
    ResponseCache, Script, ScriptedBackend, SyntheticBackend,
};
use crate::graph::DEFAULT_TAU;
use crate::pipeline::PipelineConfig;
use crate::tree::TreeParams;

pub const ENV_API_KEY: &str = "CTXMATCH_API_KEY";
pub const ENV_BASE_URL: &str = "CTXMATCH_BASE_URL";
const ENV_API_KEY_FALLBACK: &str = "OPENAI_API_KEY";

/// Which chat backend to use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Scripted(PathBuf),
    Synthetic,
    Live,
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(BackendSpec::Synthetic),
            "live" => Ok(BackendSpec::Live),
            other => match other.strip_prefix("scripted:") {
                Some(path) if !path.is_empty() => Ok(BackendSpec::Scripted(PathBuf::from(path))),
                _ => Err(Error::InvalidParams(format!(
                    "unknown backend {other:?}; expected scripted:<path>, synthetic or live"
                ))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Seeded token hashing; no network.
    Hash,
    /// The HTTP embedding endpoint.
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSettings {
    pub tau_source: f64,
    pub tau_target: f64,
    pub include_table: bool,
}

impl Default for GraphSettings {
    fn default() -> Self {
        GraphSettings {
            tau_source: DEFAULT_TAU,
            tau_target: DEFAULT_TAU,
            include_table: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `scripted:<path>`, `synthetic` or `live`.
    pub backend: String,
    pub embedder: EmbedderKind,
    pub hash_dim: usize,
    pub hash_seed: u64,
    pub http: HttpConfig,
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; 0 picks one per core.
    pub workers: usize,
    pub mask: bool,
    pub tree: TreeParams,
    pub graph: GraphSettings,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: "synthetic".into(),
            embedder: EmbedderKind::Hash,
            hash_dim: 64,
            hash_seed: 0,
            http: HttpConfig::default(),
            cache_dir: None,
            workers: 0,
            mask: false,
            tree: TreeParams::default(),
            graph: GraphSettings::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a JSON file; missing fields keep defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Apply environment overrides through `lookup` (usually `std::env::var`).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(key) = lookup(ENV_API_KEY).or_else(|| lookup(ENV_API_KEY_FALLBACK)) {
            self.http.api_key = Some(key);
        }
        if let Some(url) = lookup(ENV_BASE_URL) {
            self.http.base_url = url;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backend_spec()?;
        self.tree.validate()?;
        self.pipeline.validate()?;
        if self.hash_dim == 0 {
            return Err(Error::InvalidParams("hash_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn backend_spec(&self) -> Result<BackendSpec> {
        self.backend.parse()
    }

    /// Serialized form written next to outputs; the API key is never included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Gateway for this configuration.
    pub fn gateway(&self) -> Result<Gateway> {
        let chat: Arc<dyn ChatBackend> = match self.backend_spec()? {
            BackendSpec::Scripted(path) => Arc::new(ScriptedBackend::new(Script::load(path)?)),
            BackendSpec::Synthetic => Arc::new(SyntheticBackend::new(self.hash_seed)),
            BackendSpec::Live => Arc::new(HttpChatBackend::new(self.http.clone())),
        };
        let embedder: Arc<dyn EmbeddingBackend> = match self.embedder {
            EmbedderKind::Hash => Arc::new(HashEmbedder::new(self.hash_dim, self.hash_seed)),
            EmbedderKind::Live => Arc::new(HttpEmbeddingBackend::new(self.http.clone())),
        };
        let cache = match &self.cache_dir {
            Some(dir) => ResponseCache::on_disk(dir)?,
            None => ResponseCache::in_memory(),
        };
        Ok(Gateway::new(chat, embedder).with_cache(Some(cache)))
    }
}
