//! Chat-completion style JSON-over-HTTP client for the text model.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Environment variable holding the bearer token, when the endpoint needs one.
pub const DEFAULT_API_KEY_ENV: &str = "MULTIMATCH_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextModelConfig {
    pub endpoint: String,
    pub model_name: String,
    pub n: u32,
    /// Per-record budget; a batch request asks for `max_tokens * batch_len`.
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub batch_size: usize,
    /// Batches in flight at once.
    pub max_in_flight: usize,
    pub timeout_secs: f64,
    /// Retries after the first failed attempt.
    pub retry_limit: u32,
    pub retry_backoff_ms: u64,
    pub api_key_env: String,
}

impl Default for TextModelConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model_name: "qwen2.5-7b-instruct".to_string(),
            n: 1,
            max_tokens: 64,
            temperature: 0.0,
            top_p: 0.95,
            batch_size: 16,
            max_in_flight: 4,
            timeout_secs: 60.0,
            retry_limit: 2,
            retry_backoff_ms: 200,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
        }
    }
}

impl TextModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("text model: {m}")));
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.n < 1 {
            return bad("n must be >= 1");
        }
        if self.batch_size == 0 || self.max_in_flight == 0 {
            return bad("batch_size and max_in_flight must be positive");
        }
        if !(self.timeout_secs > 0.0) {
            return bad("timeout must be positive");
        }
        Ok(())
    }
}

/// Anything that turns a system prompt plus a block of input lines into text.
pub trait TextModel: Sync {
    fn complete(&self, system: &str, user: &str, expected_lines: usize) -> Result<String>;
}

pub struct HttpTextModel {
    config: TextModelConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTextModel {
    pub fn new(config: TextModelConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            config,
            agent,
            api_key,
        })
    }

    pub fn config(&self) -> &TextModelConfig {
        &self.config
    }

    pub(crate) fn request_body(config: &TextModelConfig, system: &str, user: &str, expected_lines: usize) -> Value {
        json!({
            "model": config.model_name,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "n": config.n,
            "max_tokens": config.max_tokens.saturating_mul(expected_lines.max(1) as u32),
            "temperature": config.temperature,
            "top_p": config.top_p,
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, String> {
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| format!("bad response body: {e}"))?;
        first_choice_text(&value).ok_or_else(|| "response has no choices[0] text".to_string())
    }
}

impl TextModel for HttpTextModel {
    fn complete(&self, system: &str, user: &str, expected_lines: usize) -> Result<String> {
        let body = Self::request_body(&self.config, system, user, expected_lines);
        let attempts = self.config.retry_limit + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.retry_backoff_ms * u64::from(attempt),
                ));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("text model attempt {}/{attempts} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Gateway {
            attempts,
            message: last,
        })
    }
}

/// `choices[0].message.content`, or `choices[0].text` for completion-style servers.
pub(crate) fn first_choice_text(value: &Value) -> Option<String> {
    let choice = value.get("choices")?.get(0)?;
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

/// Splits model output into lines, dropping trailing blank lines.
pub(crate) fn response_lines(text: &str) -> Vec<String> {
    let mut lines: Vec<String> = text
        .split('\n')
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_decoding_settings() {
        let c = TextModelConfig::default();
        assert_eq!(c.n, 1);
        assert_eq!(c.max_tokens, 64);
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.top_p, 0.95);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_top_p() {
        let c = TextModelConfig {
            top_p: 0.0,
            ..TextModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn request_shape() {
        let body = HttpTextModel::request_body(&TextModelConfig::default(), "sys", "a\nb", 2);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "a\nb");
        assert_eq!(body["max_tokens"], 128);
        assert_eq!(body["top_p"], 0.95);
        assert_eq!(body["n"], 1);
    }

    #[test]
    fn parses_chat_and_completion_shapes() {
        let chat = json!({"choices": [{"message": {"role": "assistant", "content": "x"}}]});
        let completion = json!({"choices": [{"text": "y"}]});
        assert_eq!(first_choice_text(&chat).as_deref(), Some("x"));
        assert_eq!(first_choice_text(&completion).as_deref(), Some("y"));
        assert_eq!(first_choice_text(&json!({})), None);
    }

    #[test]
    fn trailing_blank_lines_dropped() {
        assert_eq!(response_lines("a\r\nb\n\n"), vec!["a", "b"]);
    }
}
