use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cache::hex;
use super::{BackendReply, ChatBackend};
use crate::error::{Error, Result};

/// A rule matches when the prompt contains every `all` substring, at least
/// one `any` substring (if any are listed) and none of the `none` substrings.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub all: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub any: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub none: Vec<String>,
    pub reply: String,
}

impl ScriptRule {
    pub fn contains(needle: impl Into<String>, reply: impl Into<String>) -> Self {
        ScriptRule {
            all: vec![needle.into()],
            reply: reply.into(),
            ..Default::default()
        }
    }

    pub fn all_of<I, S>(needles: I, reply: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptRule {
            all: needles.into_iter().map(Into::into).collect(),
            reply: reply.into(),
            ..Default::default()
        }
    }

    pub fn unless<I, S>(mut self, needles: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.none.extend(needles.into_iter().map(Into::into));
        self
    }

    pub fn matches(&self, prompt: &str) -> bool {
        self.all.iter().all(|n| prompt.contains(n.as_str()))
            && (self.any.is_empty() || self.any.iter().any(|n| prompt.contains(n.as_str())))
            && !self.none.iter().any(|n| prompt.contains(n.as_str()))
    }
}

/// Ordered rule table; the first matching rule wins.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
    /// Reply when no rule matches. Without it, unmatched prompts are errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    /// Injected delay per call, in milliseconds.
    #[serde(default)]
    pub delay_ms: u64,
}

impl Script {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Script {
            rules,
            ..Default::default()
        }
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default = Some(reply.into());
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn reply_for(&self, prompt: &str) -> Option<&str> {
        self.rules
            .iter()
            .find(|r| r.matches(prompt))
            .map(|r| r.reply.as_str())
            .or(self.default.as_deref())
    }
}

/// Test backend whose reply depends only on the prompt and the script.
pub struct ScriptedBackend {
    script: Script,
    id: String,
    received: AtomicU64,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let digest = Sha256::digest(serde_json::to_vec(&script).expect("script serializes"));
        ScriptedBackend {
            id: format!("scripted:{}", &hex(&digest)[..16]),
            script,
            received: AtomicU64::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    /// Number of prompts that reached the backend.
    pub fn received(&self) -> u64 {
        self.received.load(Ordering::SeqCst)
    }

    /// Every prompt received so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, prompt: &str, _timeout: Duration) -> Result<BackendReply> {
        self.received.fetch_add(1, Ordering::SeqCst);
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(prompt.to_string());
        let delay = Duration::from_millis(self.script.delay_ms);
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        let text = self
            .script
            .reply_for(prompt)
            .ok_or_else(|| Error::NoScriptRule(prompt.chars().take(80).collect()))?;
        Ok(BackendReply {
            text: text.to_string(),
            prompt_tokens: None,
            completion_tokens: None,
            simulated_latency: Some(delay),
        })
    }
}
