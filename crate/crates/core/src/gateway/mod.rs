//! Chat and embedding backends behind one interface: a remote
//! OpenAI-compatible HTTP client and a deterministic rule-based mock, with a
//! response cache keyed by request hash.

mod mock;
mod remote;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rerag::EmbeddingVector;

pub use mock::MockBackend;
pub use remote::RemoteBackend;

pub const DEFAULT_API_KEY_ENV: &str = "REG_TSC_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out after {0:.1} s")]
    Timeout(f64),
    #[error("api error (status {status}): {body}")]
    Api { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("cache i/o error on {path}: {msg}")]
    Cache { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Single user-message request at temperature 0.
    pub fn user(model: impl Into<String>, content: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: content.into(),
            }],
            temperature: 0.0,
            max_tokens: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "messages must be non-empty".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding of every field.
    pub fn request_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Concatenated message contents, for rule-based backends.
    pub fn prompt_text(&self) -> String {
        let parts: Vec<&str> = self.messages.iter().map(|m| m.content.as_str()).collect();
        parts.join("\n")
    }
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;
    /// Model id used when this backend builds its own requests.
    fn model(&self) -> &str;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub retry_base_ms: u64,
    pub cache_dir: Option<PathBuf>,
    pub chat_model: String,
    pub embedding_model: String,
    pub embedding_dim: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 60.0,
            max_retries: 2,
            retry_base_ms: 250,
            cache_dir: None,
            chat_model: "gpt-4o-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            embedding_dim: crate::rerag::MOCK_EMBEDDING_DIM,
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        BackendConfig::default()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.kind == BackendKind::Remote && self.base_url.as_deref().is_none_or(str::is_empty) {
            return Err(GatewayError::Config(
                "remote backend requires base_url".into(),
            ));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Response cache: in memory always, mirrored to one JSON file per key under
/// `dir` when configured. Files are written to a temporary name and renamed.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    response: String,
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        ResponseCache {
            dir,
            memory: Mutex::new(HashMap::new()),
        }
    }

    fn path(dir: &Path, key: &str) -> PathBuf {
        dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.memory.lock().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let dir = self.dir.as_ref()?;
        let text = fs::read_to_string(Self::path(dir, key)).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.key == key).then(|| {
            self.memory
                .lock()
                .expect("cache lock")
                .insert(key.to_string(), entry.response.clone());
            entry.response
        })
    }

    pub fn put(&self, key: &str, response: &str) -> Result<(), GatewayError> {
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), response.to_string());
        let Some(dir) = &self.dir else { return Ok(()) };
        let cache_err = |path: &Path, e: std::io::Error| GatewayError::Cache {
            path: path.display().to_string(),
            msg: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| cache_err(dir, e))?;
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let tmp = dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let entry = CacheEntry {
            key: key.to_string(),
            response: response.to_string(),
        };
        fs::write(
            &tmp,
            serde_json::to_string(&entry).expect("entry serializes"),
        )
        .map_err(|e| cache_err(&tmp, e))?;
        let dst = Self::path(dir, key);
        fs::rename(&tmp, &dst).map_err(|e| cache_err(&dst, e))
    }
}

/// Backend pair plus response cache. Implements both backend traits, so it
/// can be handed to anything that needs a chat or embedding backend.
pub struct Gateway {
    chat: Box<dyn ChatBackend>,
    embedder: Box<dyn EmbeddingBackend>,
    cache: Option<ResponseCache>,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(
        chat: Box<dyn ChatBackend>,
        embedder: Box<dyn EmbeddingBackend>,
        cache: Option<ResponseCache>,
    ) -> Self {
        Gateway {
            chat,
            embedder,
            cache,
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let cache = Some(ResponseCache::new(config.cache_dir.clone()));
        Ok(match config.kind {
            BackendKind::Mock => Gateway::new(
                Box::new(MockBackend::new(config.embedding_dim)),
                Box::new(MockBackend::new(config.embedding_dim)),
                cache,
            ),
            BackendKind::Remote => Gateway::new(
                Box::new(RemoteBackend::new(config.clone())?),
                Box::new(RemoteBackend::new(config.clone())?),
                cache,
            ),
        })
    }

    /// Calls that reached the underlying backends (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }
}

impl ChatBackend for Gateway {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let key = format!("chat-{}", request.request_hash());
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        let response = self.chat.chat(request)?;
        if let Some(c) = &self.cache {
            c.put(&key, &response)?;
        }
        Ok(response)
    }

    fn model(&self) -> &str {
        self.chat.model()
    }
}

impl EmbeddingBackend for Gateway {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "texts must be non-empty".into(),
            ));
        }
        let Some(cache) = &self.cache else {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            return self.embedder.embed_texts(texts);
        };
        let keys: Vec<String> = texts
            .iter()
            .map(|t| format!("embed-{}", text_hash(t)))
            .collect();
        let mut out: Vec<Option<EmbeddingVector>> = keys
            .iter()
            .map(|k| cache.get(k).and_then(|s| serde_json::from_str(&s).ok()))
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.embedder.embed_texts(&batch)?;
            if fresh.len() != batch.len() {
                return Err(GatewayError::Malformed(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    fresh.len()
                )));
            }
            for (&i, v) in missing.iter().zip(fresh) {
                cache.put(
                    &keys[i],
                    &serde_json::to_string(&v).expect("vector serializes"),
                )?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_hash_is_stable_and_field_sensitive() {
        let a = ChatRequest::user("m", "hello");
        assert_eq!(
            a.request_hash(),
            ChatRequest::user("m", "hello").request_hash()
        );
        let mut b = a.clone();
        b.temperature = 0.5;
        let mut c = a.clone();
        c.max_tokens = 7;
        let d = ChatRequest::user("m2", "hello");
        let hashes = [
            a.request_hash(),
            b.request_hash(),
            c.request_hash(),
            d.request_hash(),
        ];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(hashes[i], hashes[j]);
            }
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let gw = Gateway::from_config(&BackendConfig::mock()).unwrap();
        let mut r = ChatRequest::user("m", "x");
        r.messages.clear();
        assert!(matches!(gw.chat(&r), Err(GatewayError::InvalidRequest(_))));
        let mut r = ChatRequest::user("m", "x");
        r.temperature = -1.0;
        assert!(gw.chat(&r).is_err());
        assert!(gw.embed_texts(&[]).is_err());
    }

    #[test]
    fn remote_config_requires_url() {
        let cfg = BackendConfig {
            kind: BackendKind::Remote,
            ..BackendConfig::default()
        };
        assert!(matches!(
            Gateway::from_config(&cfg),
            Err(GatewayError::Config(_))
        ));
    }

    #[test]
    fn second_identical_request_is_a_cache_hit() {
        let gw = Gateway::from_config(&BackendConfig::mock()).unwrap();
        let r = ChatRequest::user("m", "anything at all");
        let a = gw.chat(&r).unwrap();
        assert_eq!(gw.backend_calls(), 1);
        let b = gw.chat(&r).unwrap();
        assert_eq!(gw.backend_calls(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn disk_cache_survives_a_new_gateway() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BackendConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..BackendConfig::mock()
        };
        let r = ChatRequest::user("m", "persist me");
        let first = Gateway::from_config(&cfg).unwrap().chat(&r).unwrap();
        let gw = Gateway::from_config(&cfg).unwrap();
        assert_eq!(gw.chat(&r).unwrap(), first);
        assert_eq!(gw.backend_calls(), 0);
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn embedding_batch_keeps_order() {
        let gw = Gateway::from_config(&BackendConfig::mock()).unwrap();
        let texts: Vec<String> = ["queue", "emergency", "phase"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let v = gw.embed_texts(&texts).unwrap();
        assert_eq!(v.len(), 3);
        let rev: Vec<String> = texts.iter().rev().cloned().collect();
        let w = Gateway::from_config(&BackendConfig::mock())
            .unwrap()
            .embed_texts(&rev)
            .unwrap();
        assert_eq!(v[0], w[2]);
        assert_eq!(v[2], w[0]);
        assert_ne!(v[0], v[1]);
    }
}
