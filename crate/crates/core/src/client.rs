//! Blocking chat-completion client shared by the remote extractor and the
//! remote reasoner.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "GMEM_ENDPOINT";
pub const ENV_MODEL: &str = "GMEM_MODEL";
pub const ENV_API_KEY: &str = "GMEM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub max_retries: usize,
    pub retry_backoff: Duration,
    pub max_in_flight: usize,
    pub max_tokens: usize,
    /// Prompts longer than this many engine tokens are rejected locally.
    pub max_prompt_tokens: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            retry_backoff: Duration::from_millis(250),
            max_in_flight: 4,
            max_tokens: 256,
            max_prompt_tokens: None,
        }
    }
}

impl ServiceConfig {
    /// Defaults overridden by `GMEM_ENDPOINT`, `GMEM_MODEL` and `GMEM_API_KEY`.
    pub fn from_env() -> Self {
        let mut cfg = ServiceConfig::default();
        if let Ok(v) = std::env::var(ENV_ENDPOINT) {
            cfg.endpoint = v;
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            cfg.model = v;
        }
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: "assistant".into(), content: content.into() }
    }
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

pub struct ServiceClient {
    config: ServiceConfig,
    agent: ureq::Agent,
    retries: AtomicUsize,
}

impl std::fmt::Debug for ServiceClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceClient")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

impl ServiceClient {
    pub fn new(config: ServiceConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        ServiceClient {
            config,
            agent,
            retries: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Total retries performed by this client so far.
    pub fn retries(&self) -> usize {
        self.retries.load(Ordering::Relaxed)
    }

    /// Greedy completion for `messages`; returns the raw completion text.
    pub fn chat(&self, messages: &[Message]) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": 0,
            "max_tokens": self.config.max_tokens,
        });
        let response = self.post_with_retries(&body)?;
        completion_text(&response)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse("response has no completion text".into()))
    }

    /// Per-token log-probabilities of `answer` as an assistant continuation of
    /// `messages`, for services that echo prompt log-probabilities.
    pub fn answer_logprobs(&self, messages: &[Message], answer: &str, answer_tokens: usize) -> Result<Vec<f64>> {
        let mut all = messages.to_vec();
        all.push(Message::assistant(answer));
        let body = json!({
            "model": self.config.model,
            "messages": all,
            "temperature": 0,
            "max_tokens": 0,
            "echo": true,
            "logprobs": true,
        });
        let response = self.post_with_retries(&body)?;
        let entries = response
            .pointer("/choices/0/logprobs/content")
            .and_then(Value::as_array)
            .ok_or(Error::Capability("per-token log-probabilities"))?;
        let values: Vec<f64> = entries
            .iter()
            .filter_map(|e| e.get("logprob").and_then(Value::as_f64))
            .collect();
        if values.len() < answer_tokens {
            return Err(Error::Parse(format!(
                "service returned {} log-probabilities for {answer_tokens} answer tokens",
                values.len()
            )));
        }
        Ok(values[values.len() - answer_tokens..].to_vec())
    }

    fn post_with_retries(&self, body: &Value) -> Result<Value> {
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(message)) => return Err(Error::Transport { attempts: attempt, message }),
                Err(Failure::Retryable(message)) => {
                    last = message;
                    if attempt < attempts {
                        self.retries.fetch_add(1, Ordering::Relaxed);
                        log::warn!("request to {} failed (attempt {attempt}/{attempts}): {last}", self.config.endpoint);
                        thread::sleep(self.config.retry_backoff * attempt as u32);
                    }
                }
            }
        }
        Err(Error::Transport { attempts, message: last })
    }

    fn post_once(&self, body: &Value) -> Result<Value, Failure> {
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Failure::Fatal(format!("HTTP {status}")));
        }
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| Failure::Retryable(format!("invalid JSON body: {e}")))
    }
}

fn completion_text(response: &Value) -> Option<&str> {
    response
        .pointer("/choices/0/message/content")
        .or_else(|| response.pointer("/choices/0/text"))
        .and_then(Value::as_str)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completion_text_shapes() {
        let chat = json!({"choices": [{"message": {"role": "assistant", "content": "hi"}}]});
        assert_eq!(completion_text(&chat), Some("hi"));
        let legacy = json!({"choices": [{"text": "yo"}]});
        assert_eq!(completion_text(&legacy), Some("yo"));
        assert_eq!(completion_text(&json!({})), None);
    }

    #[test]
    fn unreachable_service_exhausts_retries() {
        let client = ServiceClient::new(ServiceConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            max_retries: 2,
            retry_backoff: Duration::from_millis(1),
            timeout: Duration::from_millis(500),
            ..Default::default()
        });
        match client.chat(&[Message::user("hi")]) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(client.retries(), 2);
    }
}
