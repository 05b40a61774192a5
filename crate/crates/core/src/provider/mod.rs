//! Chat-with-tools providers: a live HTTP endpoint, record/replay over a
//! fixture store, and in-process backends for tests and offline runs.

mod fixtures;
mod live;

use std::env;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::model::ToolCallAction;
use crate::value::Decimal;

pub use fixtures::{FixtureRecord, FixtureStore, RecordingProvider, ReplayProvider};
pub use live::{LiveConfig, LiveProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    fn text(role: MessageRole, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: Some(content.into()),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::text(MessageRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::text(MessageRole::User, content)
    }

    pub fn assistant(content: Option<String>, tool_calls: Vec<ToolCallAction>) -> Self {
        ChatMessage {
            role: MessageRole::Assistant,
            content,
            tool_calls,
            tool_call_id: None,
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::Tool,
            content: Some(content.into()),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub tool_schemas: Vec<ToolSchema>,
    pub temperature: Decimal,
    pub max_turn_tokens: u32,
}

pub const DEFAULT_MAX_TURN_TOKENS: u32 = 4096;

impl ChatRequest {
    /// A temperature 0.0 request with the default token budget.
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            tool_schemas: Vec::new(),
            temperature: Decimal::new(0, 1),
            max_turn_tokens: DEFAULT_MAX_TURN_TOKENS,
        }
    }

    pub fn with_tools(mut self, tools: Vec<ToolSchema>) -> Self {
        self.tool_schemas = tools;
        self
    }

    pub fn system_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == MessageRole::System)
            .and_then(|m| m.content.as_deref())
            .unwrap_or("")
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::User)
            .and_then(|m| m.content.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    ToolCalls,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub tool_calls: Vec<ToolCallAction>,
    pub finish_reason: FinishReason,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: Some(text.into()),
            tool_calls: Vec::new(),
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn calls(text: Option<String>, tool_calls: Vec<ToolCallAction>) -> Self {
        Self::normalized(text, tool_calls, FinishReason::ToolCalls)
    }

    /// Enforces that `tool_calls` is non-empty exactly when the finish
    /// reason says so.
    pub fn normalized(text: Option<String>, tool_calls: Vec<ToolCallAction>, reported: FinishReason) -> Self {
        let finish_reason = match (tool_calls.is_empty(), reported) {
            (false, _) => FinishReason::ToolCalls,
            (true, FinishReason::ToolCalls) => FinishReason::Stop,
            (true, other) => other,
        };
        ChatResponse {
            text: text.filter(|t| !t.is_empty()),
            tool_calls,
            finish_reason,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("fixture miss for request digest {digest}")]
    FixtureMiss { digest: String },
    #[error("authentication rejected by provider: {0}")]
    Auth(String),
    #[error("provider transport failure: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("fixture record failed: {0}")]
    Record(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("scripted backend: {0}")]
    Script(String),
}

/// A chat backend. Implementations must be reentrant.
pub trait ChatProvider: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(req)
    }
}

impl<P: ChatProvider + ?Sized> ChatProvider for Box<P> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (**self).chat(req)
    }
}

/// Adapts a closure into a provider.
pub struct FnProvider<F>(pub F);

impl<F> ChatProvider for FnProvider<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, ProviderError> + Send + Sync,
{
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        (self.0)(req)
    }
}

#[derive(Serialize)]
struct DigestInput<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    tool_schemas: &'a [ToolSchema],
    temperature: &'a Decimal,
}

/// SHA-256 over the canonical encoding of model, messages, tool schemas and
/// temperature.
pub fn request_digest(req: &ChatRequest) -> String {
    let input = DigestInput {
        model: &req.model,
        messages: &req.messages,
        tool_schemas: &req.tool_schemas,
        temperature: &req.temperature,
    };
    canonical::digest_of(&input).expect("chat requests encode canonically")
}

/// Model ids per role, read from `PBK_*_MODEL` with fallbacks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelIds {
    pub agent: String,
    pub simulator: String,
    pub reviewer: String,
    pub selector: String,
    pub judge: String,
}

impl Default for ModelIds {
    fn default() -> Self {
        ModelIds {
            agent: "agent".into(),
            simulator: "simulator".into(),
            reviewer: "reviewer".into(),
            selector: "agent".into(),
            judge: "reviewer".into(),
        }
    }
}

impl ModelIds {
    pub fn from_env() -> Self {
        let d = ModelIds::default();
        let agent = env::var("PBK_AGENT_MODEL").unwrap_or(d.agent);
        let reviewer = env::var("PBK_REVIEWER_MODEL").unwrap_or(d.reviewer);
        ModelIds {
            simulator: env::var("PBK_SIMULATOR_MODEL").unwrap_or(d.simulator),
            selector: agent.clone(),
            judge: reviewer.clone(),
            agent,
            reviewer,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ChatRequest {
        ChatRequest::new("agent", vec![ChatMessage::system("policy"), ChatMessage::user("hi")])
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = req();
        assert_eq!(request_digest(&a), request_digest(&a.clone()));

        let mut warm = a.clone();
        warm.temperature = "0.1".parse().unwrap();
        assert_ne!(request_digest(&a), request_digest(&warm));

        let mut swapped = a.clone();
        swapped.messages.swap(0, 1);
        assert_ne!(request_digest(&a), request_digest(&swapped));

        let mut budget = a.clone();
        budget.max_turn_tokens = 10;
        assert_eq!(request_digest(&a), request_digest(&budget));
    }

    #[test]
    fn normalization_ties_calls_to_finish_reason() {
        let r = ChatResponse::normalized(Some(String::new()), vec![], FinishReason::ToolCalls);
        assert_eq!(r.finish_reason, FinishReason::Stop);
        assert_eq!(r.text, None);
        let call = ToolCallAction::new("x", Default::default());
        let r = ChatResponse::normalized(None, vec![call], FinishReason::Stop);
        assert_eq!(r.finish_reason, FinishReason::ToolCalls);
    }
}
