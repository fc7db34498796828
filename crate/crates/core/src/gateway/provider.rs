use std::fmt;

use serde::{Deserialize, Serialize};

use super::ledger::Caller;

/// Pipeline stage that issued a model call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ideation,
    Planning,
    Codegen,
    Reflection,
    Report,
    Summary,
    Interesting,
    Meta,
    Experiment,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ideation => "ideation",
            Stage::Planning => "planning",
            Stage::Codegen => "codegen",
            Stage::Reflection => "reflection",
            Stage::Report => "report",
            Stage::Summary => "summary",
            Stage::Interesting => "interesting",
            Stage::Meta => "meta",
            Stage::Experiment => "experiment",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u64>,
}

/// Who is calling, on behalf of which ledger and debug iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallContext {
    pub ledger: String,
    pub iteration: u32,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    pub caller: Caller,
}

impl CallContext {
    pub fn pipeline(ledger: impl Into<String>, iteration: u32, stage: Stage) -> Self {
        CallContext {
            ledger: ledger.into(),
            iteration,
            stage,
            attempt: None,
            caller: Caller::Pipeline,
        }
    }

    pub fn with_attempt(mut self, attempt: Option<u32>) -> Self {
        self.attempt = attempt;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub ctx: CallContext,
    pub model: String,
    pub messages: Vec<Message>,
    pub params: DecodingParams,
}

impl CompletionRequest {
    pub fn prompt_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.len()).sum()
    }
}

/// Token counts a provider expects a call to consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenEstimate {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderReply {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// The provider stopped because it hit the output-token ceiling.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct ProviderError {
    pub message: String,
    pub retryable: bool,
}

impl ProviderError {
    pub fn fatal(message: impl Into<String>) -> Self {
        ProviderError {
            message: message.into(),
            retryable: false,
        }
    }

    pub fn retryable(message: impl Into<String>) -> Self {
        ProviderError {
            message: message.into(),
            retryable: true,
        }
    }
}

/// A model backend.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    /// Best guess of token usage for `req`, used for pre-call budget projection.
    /// `None` falls back to the gateway's heuristic.
    fn estimate(&self, _req: &CompletionRequest) -> Option<TokenEstimate> {
        None
    }

    fn complete(&self, req: &CompletionRequest) -> Result<ProviderReply, ProviderError>;
}

/// Rough token count for text: one token per four bytes, rounded up.
pub fn approx_tokens(text_len: usize) -> u64 {
    (text_len as u64).div_ceil(4)
}
