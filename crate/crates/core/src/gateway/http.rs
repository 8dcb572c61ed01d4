use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{BackendReply, ChatBackend, EmbeddingBackend};
use crate::error::{Error, Result};

/// Endpoint settings for chat-completions style HTTP backends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    /// Never serialized into traces.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    /// Extra body fields passed through verbatim (decoding parameters etc).
    pub decoding: Map<String, Value>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-5".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key: None,
            decoding: Map::new(),
        }
    }
}

fn post(config: &HttpConfig, path: &str, body: &Value, timeout: Duration) -> Result<Value> {
    let url = format!("{}/{path}", config.base_url.trim_end_matches('/'));
    let mut request = ureq::post(&url)
        .config()
        .timeout_global(Some(timeout))
        .build()
        .header("Content-Type", "application/json");
    if let Some(key) = &config.api_key {
        request = request.header("Authorization", &format!("Bearer {key}"));
    }
    let mut response = request.send_json(body).map_err(|e| match e {
        ureq::Error::Timeout(_) => Error::Timeout { attempts: 1 },
        other => Error::Transport(format!("{url}: {other}")),
    })?;
    response
        .body_mut()
        .read_json::<Value>()
        .map_err(|e| Error::Transport(format!("{url}: unreadable body: {e}")))
}

pub struct HttpChatBackend {
    config: HttpConfig,
}

impl HttpChatBackend {
    pub fn new(config: HttpConfig) -> Self {
        HttpChatBackend { config }
    }

    pub(crate) fn request_body(&self, prompt: &str) -> Value {
        let mut body = Map::new();
        body.insert("model".into(), json!(self.config.chat_model));
        body.insert(
            "messages".into(),
            json!([{ "role": "user", "content": prompt }]),
        );
        for (k, v) in &self.config.decoding {
            body.insert(k.clone(), v.clone());
        }
        Value::Object(body)
    }
}

pub(crate) fn parse_chat_response(value: &Value) -> Result<BackendReply> {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))?;
    let usage = |field: &str| value.pointer(&format!("/usage/{field}")).and_then(Value::as_u64);
    Ok(BackendReply {
        text: text.to_string(),
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
        simulated_latency: None,
    })
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.chat_model)
    }

    fn complete(&self, prompt: &str, timeout: Duration) -> Result<BackendReply> {
        let started = Instant::now();
        let value = post(&self.config, "chat/completions", &self.request_body(prompt), timeout)?;
        let reply = parse_chat_response(&value)?;
        log::debug!("chat call took {:?}", started.elapsed());
        Ok(reply)
    }
}

pub struct HttpEmbeddingBackend {
    config: HttpConfig,
    timeout: Duration,
}

impl HttpEmbeddingBackend {
    pub fn new(config: HttpConfig) -> Self {
        HttpEmbeddingBackend {
            config,
            timeout: Duration::from_secs(60),
        }
    }
}

pub(crate) fn parse_embedding_response(value: &Value, expected: usize) -> Result<Vec<Vec<f64>>> {
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Transport("response has no data array".into()))?;
    let mut rows: Vec<(usize, Vec<f64>)> = data
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let index = item.get("index").and_then(Value::as_u64).map_or(i, |x| x as usize);
            let values = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Transport(format!("data[{i}] has no embedding")))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| Error::Transport("non-numeric embedding".into())))
                .collect::<Result<Vec<_>>>()?;
            Ok((index, values))
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|(i, _)| *i);
    if rows.len() != expected {
        return Err(Error::Transport(format!(
            "expected {expected} embeddings, got {}",
            rows.len()
        )));
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.embedding_model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = json!({ "model": self.config.embedding_model, "input": texts });
        let value = post(&self.config, "embeddings", &body, self.timeout)?;
        parse_embedding_response(&value, texts.len())
    }
}
