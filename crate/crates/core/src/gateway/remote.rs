use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, BackendSpec, Completion, GenerationRequest, ModelProfile};
use crate::prompt::SpeakerRole;

/// How a rendered prompt is put on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageFormat {
    /// One chat message per prompt segment; the assistant prefix becomes a
    /// trailing assistant message.
    #[default]
    Chat,
    /// The dialect-flattened prompt text as a single user message.
    Text,
}

pub struct RemoteBackend {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    credential_env: String,
    format: MessageFormat,
}

impl RemoteBackend {
    pub fn new(profile: &ModelProfile) -> Result<Self, String> {
        let BackendSpec::Remote {
            base_url,
            model,
            credential_env,
            message_format,
            timeout_secs,
        } = &profile.backend
        else {
            return Err("not a remote profile".into());
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(*timeout_secs))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(RemoteBackend {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.clone(),
            credential_env: credential_env.clone(),
            format: *message_format,
        })
    }

    fn messages(&self, request: &GenerationRequest<'_>) -> Vec<serde_json::Value> {
        match self.format {
            MessageFormat::Text => vec![json!({"role": "user", "content": request.prompt.text})],
            MessageFormat::Chat => request
                .prompt
                .segments
                .iter()
                .filter(|s| !(s.role == SpeakerRole::AssistantPrefix && s.text.is_empty()))
                .map(|s| {
                    let role = match s.role {
                        SpeakerRole::System => "system",
                        SpeakerRole::User => "user",
                        SpeakerRole::AssistantPrefix => "assistant",
                    };
                    json!({"role": role, "content": s.text})
                })
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    id: Option<String>,
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

fn retry_after(headers: &reqwest::header::HeaderMap) -> Option<Duration> {
    headers
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<u64>()
        .ok()
        .map(Duration::from_secs)
}

#[async_trait]
impl Backend for RemoteBackend {
    async fn complete(&self, request: &GenerationRequest<'_>) -> Result<Completion, BackendError> {
        let token = std::env::var(&self.credential_env)
            .ok()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| BackendError::CredentialMissing(self.credential_env.clone()))?;

        let body = json!({
            "model": self.model,
            "messages": self.messages(request),
            "temperature": request.profile.temperature,
            "max_tokens": request.profile.max_new_tokens,
        });

        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(token)
            .json(&body)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Transport(e.to_string())
                }
            })?;

        let status = response.status();
        if status.as_u16() == 429 {
            return Err(BackendError::RateLimited {
                retry_after: retry_after(response.headers()),
            });
        }
        if !status.is_success() {
            let message = response.text().await.unwrap_or_default();
            let message: String = message.chars().take(300).collect();
            return Err(if status.is_server_error() || status.as_u16() == 408 {
                BackendError::Server {
                    status: status.as_u16(),
                    message,
                }
            } else {
                BackendError::Rejected {
                    status: status.as_u16(),
                    message,
                }
            });
        }

        let bytes = response.bytes().await.map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let parsed: ChatResponse =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Malformed("response has no first choice content".into()))?;
        Ok(Completion {
            text: content,
            meta: parsed.id.unwrap_or_default(),
        })
    }
}
