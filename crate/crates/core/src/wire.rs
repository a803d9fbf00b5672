//! Blocking client for chat-completions style endpoints.
//!
//! Requests are `{model, messages: [{role, content: [text, image?]}]}`;
//! replies are read from `choices[0].message.content` with token usage from
//! `usage.prompt_tokens` / `usage.completion_tokens`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_API_KEY_ENV: &str = "PRMNAV_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected reply shape: {0}")]
    BadReply(String),
}

impl WireError {
    /// Transport-level failures are worth retrying; protocol errors are not.
    fn retryable(&self) -> bool {
        match self {
            WireError::Transport { .. } => true,
            WireError::Status { status, .. } => *status == 429 || *status >= 500,
            WireError::BadReply(_) => false,
        }
    }
}

/// Token counts for one or more model calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Usage) {
        *self = *self + rhs;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

impl WireConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        WireConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            api_key_env: default_key_env(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub usage: Usage,
}

pub struct ChatClient {
    cfg: WireConfig,
    agent: ureq::Agent,
}

impl ChatClient {
    pub fn new(cfg: WireConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build()
            .into();
        ChatClient { cfg, agent }
    }

    pub fn config(&self) -> &WireConfig {
        &self.cfg
    }

    pub fn request_body(&self, prompt: &str, image_b64: Option<&str>) -> Value {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        if let Some(img) = image_b64 {
            content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{img}")}}));
        }
        json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": content}],
        })
    }

    /// Sends one user turn, retrying transport failures `retries` times.
    pub fn complete(&self, prompt: &str, image_b64: Option<&str>) -> Result<ChatReply, WireError> {
        let body = self.request_body(prompt, image_b64);
        let attempts = self.cfg.retries + 1;
        let mut last = None;
        for attempt in 1..=attempts {
            match self.send_once(&body) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.retryable() && attempt < attempts => {
                    log::warn!("chat call attempt {attempt}/{attempts} failed: {e}");
                    last = Some(e);
                }
                Err(WireError::Transport { message, .. }) => {
                    return Err(WireError::Transport { attempts: attempt, message });
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or(WireError::Transport { attempts, message: "no attempt made".into() }))
    }

    fn send_once(&self, body: &Value) -> Result<ChatReply, WireError> {
        let mut req = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            if !key.is_empty() {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
        }
        let mut resp = req.send_json(body).map_err(|e| WireError::Transport { attempts: 1, message: e.to_string() })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| WireError::Transport { attempts: 1, message: e.to_string() })?;
        if !(200..300).contains(&status) {
            return Err(WireError::Status { status, body: text });
        }
        parse_chat_reply(&text)
    }
}

/// Extracts the message text and usage from a chat-completions reply body.
pub fn parse_chat_reply(body: &str) -> Result<ChatReply, WireError> {
    let v: Value = serde_json::from_str(body).map_err(|e| WireError::BadReply(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    let text = match content {
        Value::String(s) => s.clone(),
        // some servers return a list of content parts
        Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
        _ => return Err(WireError::BadReply("missing choices[0].message.content".into())),
    };
    let usage = Usage {
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(ChatReply { text, usage })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_parsing() {
        let r = parse_chat_reply(
            r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#,
        )
        .unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.usage, Usage { prompt_tokens: 12, completion_tokens: 3 });
        let parts = parse_chat_reply(r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#).unwrap();
        assert_eq!(parts.text, "ab");
        assert_eq!(parts.usage.total(), 0);
        assert!(matches!(parse_chat_reply(r#"{"choices":[]}"#), Err(WireError::BadReply(_))));
        assert!(matches!(parse_chat_reply("nope"), Err(WireError::BadReply(_))));
    }

    #[test]
    fn request_shape() {
        let c = ChatClient::new(WireConfig::new("http://127.0.0.1:1/v1/chat/completions", "m"));
        let body = c.request_body("p", Some("AAAA"));
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0]["text"], "p");
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AAAA");
        assert_eq!(c.request_body("p", None)["messages"][0]["content"].as_array().unwrap().len(), 1);
    }
}
