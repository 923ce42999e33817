//! Completion and embedding providers.

use std::time::Duration;

use thiserror::Error;

mod cache;
mod http;
mod mock;

pub use cache::{CacheError, CacheStats, CachedEmbedder, EmbeddingCache};
pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use mock::{MockBackend, MockMode, MOCK_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Not worth retrying: bad request, auth failure, misconfiguration.
    #[error("backend error: {0}")]
    Fatal(String),
    /// Server error or timeout; the call may succeed if repeated.
    #[error("transient backend error: {0}")]
    Transient(String),
    #[error("invalid backend request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }
}

pub type Result<T> = std::result::Result<T, BackendError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub model_name: String,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 256,
            temperature: 0.0,
            model_name: model_name.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String>;
}

pub trait Embedder: Send + Sync {
    /// Unit-norm embedding whose coordinates are exactly representable as `f32`.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    fn model_name(&self) -> &str;
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for &T {
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for Box<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<T: Embedder + ?Sized> Embedder for Box<T> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

/// Scales `v` to unit norm and rounds each coordinate to `f32`.
pub fn normalize_embedding(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(BackendError::Fatal(
            "embedding has zero or non-finite norm".into(),
        ));
    }
    Ok(v.iter().map(|x| f64::from((x / norm) as f32)).collect())
}

/// Retry schedule for transient failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `f` until it succeeds, fails fatally, or the attempts run out.
    /// Returns the final result and the number of attempts made.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> (Result<T>, u32) {
        let attempts = self.attempts.max(1);
        let mut made = 0;
        loop {
            made += 1;
            match f() {
                Err(e) if e.is_transient() && made < attempts => {
                    let delay = self.base_delay * 2u32.saturating_pow(made - 1);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                other => return (other, made),
            }
        }
    }
}

/// Model parameters and retry behavior for completion calls.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSettings {
    pub model_name: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl Default for CallSettings {
    fn default() -> Self {
        Self {
            model_name: String::new(),
            max_tokens: 256,
            temperature: 0.0,
            retry: RetryPolicy::default(),
        }
    }
}

impl CallSettings {
    pub fn request(&self, prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.to_string(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            model_name: self.model_name.clone(),
        }
    }

    /// Completes `prompt` with retries; returns the result and attempts made.
    pub fn complete(&self, llm: &dyn CompletionBackend, prompt: &str) -> (Result<String>, u32) {
        let req = self.request(prompt);
        self.retry.run(|| llm.complete(&req))
    }
}
