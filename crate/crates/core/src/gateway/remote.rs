use std::time::Duration;

use log::{debug, warn};
use serde_json::{json, Value};

use super::{BackendConfig, ChatBackend, ChatRequest, EmbeddingBackend, GatewayError};
use crate::rerag::EmbeddingVector;

/// OpenAI-compatible HTTP backend (`/v1/chat/completions`, `/v1/embeddings`).
///
/// Server errors (5xx, 429) and connection failures are retried up to
/// `max_retries` times with exponential backoff; other non-2xx statuses fail
/// immediately with [`GatewayError::Api`].
pub struct RemoteBackend {
    config: BackendConfig,
    base_url: String,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Done(Value),
    Retry(GatewayError),
    Fail(GatewayError),
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let base_url = config
            .base_url
            .clone()
            .unwrap_or_default()
            .trim_end_matches('/')
            .to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(RemoteBackend {
            config,
            base_url,
            client,
        })
    }

    fn attempt(&self, url: &str, body: &Value) -> Attempt {
        let mut req = self.client.post(url).json(body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        match req.send() {
            Err(e) if e.is_timeout() => {
                Attempt::Retry(GatewayError::Timeout(self.config.timeout_secs))
            }
            Err(e) => Attempt::Retry(GatewayError::Transport(e.to_string())),
            Ok(resp) => {
                let status = resp.status();
                let text = resp.text().unwrap_or_default();
                if status.is_success() {
                    match serde_json::from_str(&text) {
                        Ok(v) => Attempt::Done(v),
                        Err(e) => Attempt::Fail(GatewayError::Malformed(e.to_string())),
                    }
                } else if status.is_server_error() || status.as_u16() == 429 {
                    Attempt::Retry(GatewayError::Transport(format!(
                        "status {}: {}",
                        status.as_u16(),
                        text
                    )))
                } else {
                    Attempt::Fail(GatewayError::Api {
                        status: status.as_u16(),
                        body: text,
                    })
                }
            }
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}{}", self.base_url, path);
        let attempts = self.config.max_retries + 1;
        let mut last = GatewayError::Transport("no attempt made".into());
        for k in 0..attempts {
            if k > 0 {
                let delay = self
                    .config
                    .retry_base_ms
                    .saturating_mul(1u64 << (k - 1).min(16));
                debug!("retrying {url} in {delay} ms (attempt {})", k + 1);
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&url, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    warn!("{url}: {e}");
                    last = e;
                }
            }
        }
        Err(match last {
            GatewayError::Timeout(t) => GatewayError::Timeout(t),
            other => GatewayError::Transport(format!("{other} (after {attempts} attempts)")),
        })
    }
}

impl ChatBackend for RemoteBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let v = self.post("/v1/chat/completions", &body)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Malformed("missing choices[0].message.content".into()))
    }

    fn model(&self) -> &str {
        &self.config.chat_model
    }
}

impl EmbeddingBackend for RemoteBackend {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let body = json!({ "model": self.config.embedding_model, "input": texts });
        let v = self.post("/v1/embeddings", &body)?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| GatewayError::Malformed("missing data array".into()))?;
        let mut rows: Vec<(usize, EmbeddingVector)> = data
            .iter()
            .enumerate()
            .map(|(pos, d)| {
                let idx = d["index"].as_u64().map_or(pos, |i| i as usize);
                let values = d["embedding"]
                    .as_array()
                    .ok_or_else(|| GatewayError::Malformed("missing embedding".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| GatewayError::Malformed("non-numeric embedding".into()))
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                Ok((idx, EmbeddingVector(values)))
            })
            .collect::<Result<_, GatewayError>>()?;
        rows.sort_by_key(|r| r.0);
        if rows.len() != texts.len() {
            return Err(GatewayError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                rows.len()
            )));
        }
        Ok(rows.into_iter().map(|r| r.1).collect())
    }
}
