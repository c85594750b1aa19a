//! Client for an OpenAI-compatible chat-completions endpoint.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::backend::{BackendError, BackendKind, PolicyBackend};
use crate::agent::prompt::PromptContext;
use crate::grid::{Action, GridSpec};

pub const API_KEY_VAR: &str = "AGENT_UNLEARN_API_KEY";

const REPROMPT: &str = "\nYour previous reply did not contain a move. Answer with a single letter: U, D, L or R.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 30.0,
            max_retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

/// Clones share one in-flight limit.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: Client,
    api_key: Option<String>,
    in_flight: Arc<InFlight>,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

/// First standalone `U`, `D`, `L` or `R` in a reply, case-insensitive.
pub fn parse_action(reply: &str) -> Option<Action> {
    reply
        .split(|c: char| !c.is_ascii_alphanumeric())
        .find_map(Action::from_token)
}

impl RemoteBackend {
    /// Reads the API key from the environment.
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_VAR).ok();
        Self::with_key(config, key)
    }

    pub fn with_key(config: RemoteConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() || config.model.is_empty() {
            return Err(BackendError::Transport(
                "remote backend needs an endpoint and a model".into(),
            ));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            in_flight: Arc::new(InFlight::new(config.max_in_flight)),
            config,
            client,
            api_key,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    /// One completion, retried on transport errors, 429 and 5xx.
    fn complete(&self, content: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        });
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.in_flight.acquire();
                let mut req = self.client.post(self.url()).json(&body);
                if let Some(key) = &self.api_key {
                    req = req.bearer_auth(key);
                }
                req.send()
            };
            let retryable = match result {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: Completion = resp
                        .json()
                        .map_err(|e| BackendError::Transport(format!("bad completion body: {e}")))?;
                    return Ok(parsed
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .unwrap_or_default());
                }
                Ok(resp) => {
                    let status = resp.status();
                    let err = BackendError::Status {
                        status: status.as_u16(),
                        body: resp.text().unwrap_or_default(),
                    };
                    if status != StatusCode::TOO_MANY_REQUESTS && !status.is_server_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) => BackendError::Transport(e.to_string()),
            };
            if attempt >= self.config.max_retries {
                return Err(retryable);
            }
            thread::sleep(Duration::from_millis(self.config.backoff_ms << attempt));
            attempt += 1;
        }
    }
}

impl PolicyBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn identity(&self) -> String {
        format!("remote({} @ {})", self.config.model, self.config.endpoint)
    }

    fn decide(&mut self, prompt: &PromptContext, _spec: &GridSpec) -> Result<Action, BackendError> {
        let text = prompt.render();
        let reply = self.complete(&text)?;
        if let Some(a) = parse_action(&reply) {
            return Ok(a);
        }
        let retry = self.complete(&format!("{text}{REPROMPT}"))?;
        parse_action(&retry).ok_or(BackendError::Unparseable(retry))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_action_token_wins() {
        assert_eq!(parse_action("I think r, then U"), Some(Action::Right));
        assert_eq!(parse_action("Move: d."), Some(Action::Down));
        assert_eq!(parse_action("Right away"), None);
        assert_eq!(parse_action(""), None);
    }
}
