//! OpenAI-compatible HTTP client (`/chat/completions`, `/embeddings`).
//!
//! Request bodies are never logged; only endpoint names, sizes and status
//! codes are.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{
    normalize_embedding, BackendError, CompletionBackend, CompletionRequest, Embedder, Result,
};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "PRIVICL_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-3.5-turbo".into(),
            embedding_model: "text-embedding-ada-002".into(),
            timeout_secs: 60,
        }
    }
}

pub struct HttpBackend {
    client: Client,
    config: HttpConfig,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

fn classify(status: StatusCode, endpoint: &str) -> BackendError {
    let msg = format!("{endpoint} returned HTTP {}", status.as_u16());
    if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
        BackendError::Transient(msg)
    } else {
        BackendError::Fatal(msg)
    }
}

fn transport(err: reqwest::Error, endpoint: &str) -> BackendError {
    // Strip the URL so query strings or hosts with credentials never leak.
    let err = err.without_url();
    if err.is_timeout() || err.is_connect() || err.is_request() {
        BackendError::Transient(format!("{endpoint}: {err}"))
    } else {
        BackendError::Fatal(format!("{endpoint}: {err}"))
    }
}

impl HttpBackend {
    /// Builds a client; the API key is read from [`API_KEY_ENV`] if set.
    pub fn new(config: HttpConfig) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: HttpConfig, api_key: Option<String>) -> Result<Self> {
        if !(config.base_url.starts_with("http://") || config.base_url.starts_with("https://")) {
            return Err(BackendError::Fatal(format!(
                "base URL must be http(s): {}",
                config.base_url
            )));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Fatal(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            config,
            api_key,
        })
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{endpoint}", self.config.base_url.trim_end_matches('/'))
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(
        &self,
        endpoint: &str,
        body: &B,
    ) -> Result<R> {
        let mut req = self.client.post(self.url(endpoint)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        log::debug!("POST /{endpoint}");
        let resp = req.send().map_err(|e| transport(e, endpoint))?;
        let status = resp.status();
        log::debug!("/{endpoint} -> {}", status.as_u16());
        if !status.is_success() {
            return Err(classify(status, endpoint));
        }
        resp.json::<R>().map_err(|e| {
            BackendError::Fatal(format!(
                "{endpoint}: malformed response: {}",
                e.without_url()
            ))
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        req.validate()?;
        let model = if req.model_name.is_empty() {
            &self.config.chat_model
        } else {
            &req.model_name
        };
        let body = ChatBody {
            model,
            messages: [ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        };
        let resp: ChatResponse = self.post("chat/completions", &body)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("chat/completions: response has no choices".into()))
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest(
                "cannot embed empty text".into(),
            ));
        }
        let body = EmbedBody {
            model: &self.config.embedding_model,
            input: text,
        };
        let resp: EmbedResponse = self.post("embeddings", &body)?;
        let v = resp
            .data
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Fatal("embeddings: response has no data".into()))?
            .embedding;
        normalize_embedding(&v)
    }

    fn model_name(&self) -> &str {
        &self.config.embedding_model
    }
}
