//! HTTP backend speaking a chat-completion style JSON protocol.
//!
//! Endpoints (relative to the configured base URL):
//!
//! - `POST /v1/chat/completions` with `{model, messages, temperature}`,
//!   answering `{choices: [{message: {content}}], usage: {prompt_tokens,
//!   completion_tokens}}`
//! - `POST /v1/embeddings` with `{model, input}`, answering
//!   `{data: [{embedding: [..]}]}`
//!
//! Transport failures and 5xx responses are retried up to the configured
//! count; every error carries the number of attempts made.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    AbstractionLevel, ChatReply, ChatRequest, EmbeddingVector, ModelBackend, ModelRole,
};
use crate::error::{BackendError, Error, Result};

/// Remote endpoint configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Model name per role; roles absent here fall back to `default_model`.
    #[serde(default)]
    pub models: BTreeMap<ModelRole, String>,
    pub default_model: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Extra attempts after the first failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_retries() -> u32 {
    2
}

/// Client over the remote protocol.
pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f32,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: WireUsage,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Serialize)]
struct WireEmbeddingRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct WireEmbeddingResponse {
    data: Vec<WireEmbeddingRow>,
}

#[derive(Deserialize)]
struct WireEmbeddingRow {
    embedding: Vec<f32>,
}

impl RemoteBackend {
    /// Build a client, resolving the API key from the configured environment
    /// variable.
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let api_key = match &config.api_key_env {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| {
                Error::Backend(BackendError::Transport {
                    detail: e.to_string(),
                    attempts: 0,
                })
            })?;
        Ok(RemoteBackend {
            config,
            api_key,
            client,
        })
    }

    fn model_for(&self, role: ModelRole) -> &str {
        self.config
            .models
            .get(&role)
            .map(String::as_str)
            .unwrap_or(&self.config.default_model)
    }

    fn post_json<B: Serialize>(&self, path: &str, body: &B) -> Result<serde_json::Value> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let total_attempts = self.config.retries + 1;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut request = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response.json::<serde_json::Value>().map_err(|e| {
                            Error::Backend(BackendError::Malformed {
                                detail: format!("invalid json body: {e}"),
                            })
                        });
                    }
                    // Retry server-side failures; client errors are final.
                    if status.is_server_error() && attempts < total_attempts {
                        continue;
                    }
                    return Err(Error::Backend(BackendError::Http {
                        status: status.as_u16(),
                        attempts,
                    }));
                }
                Err(e) if e.is_timeout() => {
                    if attempts < total_attempts {
                        continue;
                    }
                    return Err(Error::Backend(BackendError::Timeout { attempts }));
                }
                Err(e) => {
                    if attempts < total_attempts {
                        continue;
                    }
                    return Err(Error::Backend(BackendError::Transport {
                        detail: e.to_string(),
                        attempts,
                    }));
                }
            }
        }
    }
}

impl ModelBackend for RemoteBackend {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let body = WireEmbeddingRequest {
            model: self.model_for(ModelRole::Embedder),
            input: vec![text],
        };
        let value = self.post_json("v1/embeddings", &body)?;
        let parsed: WireEmbeddingResponse = serde_json::from_value(value).map_err(|e| {
            Error::Backend(BackendError::Malformed {
                detail: format!("embedding reply schema: {e}"),
            })
        })?;
        let row = parsed.data.into_iter().next().ok_or_else(|| {
            Error::Backend(BackendError::Malformed {
                detail: "embedding reply carried no rows".into(),
            })
        })?;
        EmbeddingVector::normalized(row.embedding)
    }

    fn summarize(&self, children: &[String], level: AbstractionLevel) -> Result<String> {
        if children.is_empty() {
            return Err(Error::invalid("cannot summarize an empty child list"));
        }
        let guidance = match level {
            AbstractionLevel::Mid => "a single entity-and-relation abstraction",
            AbstractionLevel::High => "a single topic-level abstraction",
            AbstractionLevel::Root => "a single corpus-level abstraction",
        };
        let mut user = format!(
            "Condense the passages below into {guidance}. Preserve key entity names.\n\nPassages:\n"
        );
        for (i, child) in children.iter().enumerate() {
            user.push_str(&format!("[{}] {}\n", i + 1, child));
        }
        let reply = self.chat(&ChatRequest::new(ModelRole::Summarizer, user))?;
        let text = reply.text.trim().to_string();
        if text.is_empty() {
            return Err(Error::Backend(BackendError::Malformed {
                detail: "summarizer returned empty text".into(),
            }));
        }
        Ok(text)
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatReply> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(WireMessage {
                role: "system",
                content: system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &request.user,
        });
        let body = WireChatRequest {
            model: self.model_for(request.role),
            messages,
            temperature: request.temperature,
        };
        let value = self.post_json("v1/chat/completions", &body)?;
        let parsed: WireChatResponse = serde_json::from_value(value).map_err(|e| {
            Error::Backend(BackendError::Malformed {
                detail: format!("chat reply schema: {e}"),
            })
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            Error::Backend(BackendError::Malformed {
                detail: "chat reply carried no choices".into(),
            })
        })?;
        Ok(ChatReply {
            text: choice.message.content,
            prompt_tokens: parsed.usage.prompt_tokens,
            completion_tokens: parsed.usage.completion_tokens,
        })
    }
}
