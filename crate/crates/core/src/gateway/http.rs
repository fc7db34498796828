//! Chat-completion wire types and an HTTP provider for upstream endpoints
//! that speak the common `/v1/chat/completions` shape.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::pricing::ProviderConfig;
use super::provider::{CompletionRequest, Message, Provider, ProviderError, ProviderReply};

/// Request body accepted by the proxy and sent upstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub index: u32,
    pub message: Message,
    pub finish_reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub id: String,
    pub object: String,
    pub model: String,
    pub choices: Vec<ChatChoice>,
    pub usage: ChatUsage,
}

/// Error body returned by the proxy: `{"error": {"type": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    #[serde(rename = "type")]
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<String>,
}

pub struct HttpProvider {
    name: String,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    /// Build from config, reading the credential from the configured
    /// environment variable.
    pub fn from_config(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let api_key = match &config.credential_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::fatal(format!("credential environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| ProviderError::fatal(e.to_string()))?;
        Ok(HttpProvider {
            name: config.provider_name.clone(),
            endpoint: config.endpoint.clone(),
            api_key,
            client,
        })
    }
}

impl Provider for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &CompletionRequest) -> Result<ProviderReply, ProviderError> {
        let body = ChatRequest {
            model: req.model.clone(),
            messages: req.messages.clone(),
            max_tokens: req.params.max_output_tokens,
            temperature: req.params.temperature,
        };
        let mut call = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| ProviderError {
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect(),
        })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderError {
                message: format!("upstream status {status}: {}", truncate(&text, 500)),
                retryable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| ProviderError::fatal(format!("malformed upstream response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::fatal("upstream response has no choices"))?;
        Ok(ProviderReply {
            text: choice.message.content,
            input_tokens: parsed.usage.prompt_tokens,
            output_tokens: parsed.usage.completion_tokens,
            truncated: choice.finish_reason == "length",
        })
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
