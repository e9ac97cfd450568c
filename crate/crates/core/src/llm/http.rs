use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_request, truncate_at_stop, LlmBackend, LlmError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpConfig {
    /// Full URL of the completion endpoint.
    pub endpoint: String,
    pub model: String,
    /// Sent as `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
    pub timeout_secs: f64,
    /// Attempts after the first one.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "llama-2-7b".into(),
            auth_token: None,
            timeout_secs: 60.0,
            max_retries: 4,
            backoff_base_ms: 250,
            backoff_cap_ms: 8000,
        }
    }
}

/// Greedy completions from a server speaking a minimal JSON protocol.
///
/// Request body: `{"model", "prompt", "max_tokens", "stop", "temperature": 0}`.
/// The completion is read from the first of `choices[0].text`,
/// `choices[0].message.content`, `content`, `text` or `response` that is a
/// string. Connection failures, 429 and 5xx are retried with capped
/// exponential backoff; other statuses fail immediately.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        if !(config.endpoint.starts_with("http://") || config.endpoint.starts_with("https://")) {
            return Err(LlmError::InvalidRequest(format!(
                "endpoint must be an http(s) URL, got {:?}",
                config.endpoint
            )));
        }
        if !(config.timeout_secs > 0.0 && config.timeout_secs.is_finite()) {
            return Err(LlmError::InvalidRequest("timeout_secs must be positive".into()));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// Request body for a call, exactly as sent.
    pub fn request_body(&self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Value {
        json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "stop": stop,
            "temperature": 0,
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.backoff_cap_ms);
        Duration::from_millis(ms)
    }

    fn send_once(&self, body: &Value) -> Result<String, (bool, LlmError)> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.auth_token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_json(body) {
            Ok(resp) => resp.into_string().map_err(|e| {
                (
                    true,
                    LlmError::Transport {
                        attempts: 1,
                        message: format!("reading body: {e}"),
                    },
                )
            }),
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let retry = status == 429 || status >= 500;
                Err((retry, LlmError::Status { status, body }))
            }
            Err(ureq::Error::Transport(t)) => Err((
                true,
                LlmError::Transport {
                    attempts: 1,
                    message: t.to_string(),
                },
            )),
        }
    }
}

pub(crate) fn extract_completion(raw: &str) -> Result<String, LlmError> {
    let v: Value = serde_json::from_str(raw).map_err(|e| LlmError::Malformed {
        detail: format!("not JSON: {e}"),
        raw: raw.to_string(),
    })?;
    let candidates = [
        v.pointer("/choices/0/text"),
        v.pointer("/choices/0/message/content"),
        v.get("content"),
        v.get("text"),
        v.get("response"),
    ];
    let found = candidates.into_iter().flatten().find_map(Value::as_str).map(str::to_string);
    found.ok_or_else(|| LlmError::Malformed {
        detail: "no completion text field".into(),
        raw: raw.to_string(),
    })
}

impl LlmBackend for HttpBackend {
    fn complete(&self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Result<String, LlmError> {
        check_request(prompt, max_tokens)?;
        let body = self.request_body(prompt, max_tokens, stop);
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(raw) => {
                    let text = extract_completion(&raw)?;
                    return Ok(truncate_at_stop(&text, stop).to_string());
                }
                Err((true, _)) if attempt < self.config.max_retries => {
                    thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                Err((_, LlmError::Transport { message, .. })) => {
                    return Err(LlmError::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err((_, err)) => return Err(err),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completion_field_variants() {
        assert_eq!(extract_completion(r#"{"choices":[{"text":"a b"}]}"#).unwrap(), "a b");
        assert_eq!(
            extract_completion(r#"{"choices":[{"message":{"content":"x"}}]}"#).unwrap(),
            "x"
        );
        assert_eq!(extract_completion(r#"{"content":"y"}"#).unwrap(), "y");
        assert!(matches!(
            extract_completion(r#"{"choices":[]}"#),
            Err(LlmError::Malformed { raw, .. }) if raw == r#"{"choices":[]}"#
        ));
        assert!(extract_completion("oops").is_err());
    }

    #[test]
    fn backoff_is_capped() {
        let b = HttpBackend::new(HttpConfig {
            endpoint: "http://127.0.0.1:1/x".into(),
            backoff_base_ms: 100,
            backoff_cap_ms: 1000,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(b.backoff(0), Duration::from_millis(100));
        assert_eq!(b.backoff(3), Duration::from_millis(800));
        assert_eq!(b.backoff(30), Duration::from_millis(1000));
        assert!(HttpBackend::new(HttpConfig::default()).is_err());
    }
}
