//! Generation interface over remote chat-completions endpoints and the
//! deterministic scripted backend.

mod remote;
mod scripted;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use remote::{MessageFormat, RemoteBackend};
pub use scripted::{Behavior, BehaviorTable, ScriptedBackend};

use crate::dataset::Letter;
use crate::prompt::RenderedPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Participant,
    Summarizer,
}

/// Where a scripted backend gets its behavior table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BehaviorSource {
    Path(std::path::PathBuf),
    Inline(BehaviorTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// OpenAI-compatible chat-completions endpoint.
    Remote {
        /// Base address, e.g. `http://localhost:8000/v1`.
        base_url: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        credential_env: String,
        #[serde(default)]
        message_format: MessageFormat,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
    Scripted {
        #[serde(default)]
        seed: u64,
        behavior: BehaviorSource,
    },
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_new_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub role: Role,
    pub backend: BackendSpec,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    pub dialect: String,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.model_id.trim().is_empty() {
            return Err("model_id is empty".into());
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("{}: temperature must be >= 0", self.model_id));
        }
        if self.max_new_tokens == 0 {
            return Err(format!("{}: max_new_tokens must be positive", self.model_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reasoning,
    Answer,
    Review,
    Summary,
}

/// Identifies one generation within a run. `model_id` is the participant the
/// generation belongs to, including its summary, even though the summary is
/// produced by the summarizer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GenerationKey {
    pub question_id: String,
    pub model_id: String,
    pub round: u32,
    pub sample_index: u32,
    pub stage: Stage,
}

impl fmt::Display for GenerationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/r{}/s{}/{:?}",
            self.question_id, self.model_id, self.round, self.sample_index, self.stage
        )
    }
}

/// Structured facts about a request that a remote model reads from the prompt
/// text. Remote backends ignore it; the scripted backend acts on it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum RequestContext {
    #[default]
    None,
    Sample {
        choices: Vec<Letter>,
    },
    Review {
        choices: Vec<Letter>,
        transcript_answers: Vec<Letter>,
        prior: Option<Letter>,
    },
    Summary {
        majority: Letter,
        reasonings: Vec<String>,
    },
}

pub struct GenerationRequest<'a> {
    pub profile: &'a ModelProfile,
    pub prompt: &'a RenderedPrompt,
    pub key: &'a GenerationKey,
    pub context: &'a RequestContext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub meta: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResult {
    pub completion: String,
    pub latency: Duration,
    pub attempt_count: u32,
    pub backend_meta: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("request timed out")]
    Timeout,
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("request rejected with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("credential variable `{0}` is not set")]
    CredentialMissing(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport(_)
                | BackendError::RateLimited { .. }
                | BackendError::Timeout
                | BackendError::Server { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("generation {key} failed after {attempts} attempt(s): {source}")]
pub struct GenerationError {
    pub key: GenerationKey,
    pub attempts: u32,
    #[source]
    pub source: BackendError,
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &GenerationRequest<'_>) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("{model}: {message}")]
    Backend { model: String, message: String },
}

/// Routes generations to per-model backends with retries and a global cap on
/// in-flight calls.
pub struct Gateway {
    backends: HashMap<String, Arc<dyn Backend>>,
    retry: RetryPolicy,
    limiter: Semaphore,
}

impl Gateway {
    pub fn new(retry: RetryPolicy, parallelism: usize) -> Self {
        Gateway {
            backends: HashMap::new(),
            retry,
            limiter: Semaphore::new(parallelism.max(1)),
        }
    }

    /// Builds a backend for every profile. Scripted seeds are mixed with
    /// `run_seed`.
    pub fn from_profiles<'a>(
        profiles: impl IntoIterator<Item = &'a ModelProfile>,
        run_seed: u64,
        retry: RetryPolicy,
        parallelism: usize,
    ) -> Result<Self, GatewayError> {
        let mut gateway = Gateway::new(retry, parallelism);
        for profile in profiles {
            let backend: Arc<dyn Backend> = match &profile.backend {
                BackendSpec::Remote { .. } => {
                    Arc::new(RemoteBackend::new(profile).map_err(|message| GatewayError::Backend {
                        model: profile.model_id.clone(),
                        message,
                    })?)
                }
                BackendSpec::Scripted { seed, behavior } => {
                    let table = match behavior {
                        BehaviorSource::Inline(table) => table.clone(),
                        BehaviorSource::Path(path) => {
                            BehaviorTable::load(path).map_err(|message| GatewayError::Backend {
                                model: profile.model_id.clone(),
                                message,
                            })?
                        }
                    };
                    Arc::new(ScriptedBackend::new(table, scripted::mix_seed(run_seed, *seed)))
                }
            };
            gateway.register(&profile.model_id, backend);
        }
        Ok(gateway)
    }

    pub fn register(&mut self, model_id: &str, backend: Arc<dyn Backend>) {
        self.backends.insert(model_id.to_string(), backend);
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub async fn generate(
        &self,
        profile: &ModelProfile,
        prompt: &RenderedPrompt,
        key: &GenerationKey,
        context: &RequestContext,
    ) -> Result<GenerationResult, GenerationError> {
        let Some(backend) = self.backends.get(&profile.model_id) else {
            return Err(GenerationError {
                key: key.clone(),
                attempts: 0,
                source: BackendError::Transport(format!("no backend for model `{}`", profile.model_id)),
            });
        };
        let request = GenerationRequest {
            profile,
            prompt,
            key,
            context,
        };

        let _permit = self.limiter.acquire().await.expect("limiter is never closed");
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match backend.complete(&request).await {
                Ok(c) => {
                    return Ok(GenerationResult {
                        completion: c.text,
                        latency: started.elapsed(),
                        attempt_count: attempts,
                        backend_meta: c.meta,
                    })
                }
                Err(e) if e.is_retryable() && attempts <= self.retry.max_retries => {
                    let mut delay = self.retry.backoff(attempts);
                    if let BackendError::RateLimited {
                        retry_after: Some(after),
                    } = &e
                    {
                        delay = delay.max(*after).min(self.retry.max_delay);
                    }
                    tracing::warn!(%key, attempt = attempts, error = %e, ?delay, "retrying generation");
                    tokio::time::sleep(delay).await;
                }
                Err(source) => {
                    return Err(GenerationError {
                        key: key.clone(),
                        attempts,
                        source,
                    })
                }
            }
        }
    }
}
