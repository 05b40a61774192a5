use std::collections::BTreeMap;
use std::env;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value as Json};

use super::{ChatMessage, ChatProvider, ChatRequest, ChatResponse, FinishReason, MessageRole, ProviderError};
use crate::model::ToolCallAction;
use crate::value::Value;

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL up to and excluding `/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    pub timeout: Duration,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        LiveConfig {
            base_url: base_url.into(),
            api_key,
            max_retries: 4,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(20),
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads `PBK_BASE_URL` and `PBK_API_KEY`.
    pub fn from_env() -> Result<Self, ProviderError> {
        let base = env::var("PBK_BASE_URL").map_err(|_| ProviderError::Config("PBK_BASE_URL is not set".into()))?;
        Ok(LiveConfig::new(base, env::var("PBK_API_KEY").ok()))
    }
}

/// Chat-completions client.
pub struct LiveProvider {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveProvider {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        LiveProvider { config, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Json) -> Result<ChatResponse, Attempt> {
        let mut request = self.agent.post(&self.endpoint());
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| Attempt::Retry(ProviderError::Transport(e.to_string())))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(ProviderError::Transport(e.to_string())))?;
        match status {
            200..=299 => parse_completion(&text).map_err(Attempt::Fatal),
            401 | 403 => Err(Attempt::Fatal(ProviderError::Auth(format!("HTTP {status}: {text}")))),
            408 | 429 | 500..=599 => Err(Attempt::Retry(ProviderError::Http { status, body: text })),
            _ => Err(Attempt::Fatal(ProviderError::Http { status, body: text })),
        }
    }
}

enum Attempt {
    Retry(ProviderError),
    Fatal(ProviderError),
}

impl ChatProvider for LiveProvider {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let body = request_body(req);
        let mut delay = self.config.initial_backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(resp) => return Ok(resp),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.config.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    tracing::warn!(attempt, error = %e, "retrying chat request");
                    thread::sleep(delay);
                    delay = (delay * 2).min(self.config.max_backoff);
                    attempt += 1;
                }
            }
        }
    }
}

fn message_json(m: &ChatMessage) -> Json {
    let role = match m.role {
        MessageRole::System => "system",
        MessageRole::User => "user",
        MessageRole::Assistant => "assistant",
        MessageRole::Tool => "tool",
    };
    let mut out = json!({ "role": role, "content": m.content });
    if !m.tool_calls.is_empty() {
        out["tool_calls"] = m
            .tool_calls
            .iter()
            .map(|c| {
                let args: serde_json::Map<String, Json> =
                    c.arguments.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
                json!({
                    "id": c.call_id,
                    "type": "function",
                    "function": { "name": c.tool_name, "arguments": Json::Object(args).to_string() },
                })
            })
            .collect();
    }
    if let Some(id) = &m.tool_call_id {
        out["tool_call_id"] = json!(id);
    }
    out
}

/// The wire body for a request.
pub(crate) fn request_body(req: &ChatRequest) -> Json {
    let mut body = json!({
        "model": req.model,
        "messages": req.messages.iter().map(message_json).collect::<Vec<_>>(),
        "temperature": req.temperature.to_f64(),
        "max_tokens": req.max_turn_tokens,
    });
    if !req.tool_schemas.is_empty() {
        body["tools"] = req
            .tool_schemas
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": { "name": t.name, "description": t.description, "parameters": t.parameters },
                })
            })
            .collect();
    }
    body
}

fn parse_completion(text: &str) -> Result<ChatResponse, ProviderError> {
    let doc: Json = serde_json::from_str(text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let choice = doc
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ProviderError::Malformed("response has no choices".into()))?;
    let message = choice
        .get("message")
        .ok_or_else(|| ProviderError::Malformed("choice has no message".into()))?;
    let content = message.get("content").and_then(Json::as_str).map(str::to_string);
    let mut calls = Vec::new();
    for raw in message.get("tool_calls").and_then(Json::as_array).into_iter().flatten() {
        let function = raw
            .get("function")
            .ok_or_else(|| ProviderError::Malformed("tool call without function".into()))?;
        let name = function
            .get("name")
            .and_then(Json::as_str)
            .ok_or_else(|| ProviderError::Malformed("tool call without name".into()))?;
        let args_text = function.get("arguments").and_then(Json::as_str).unwrap_or("{}");
        let args_json: Json = if args_text.trim().is_empty() {
            json!({})
        } else {
            serde_json::from_str(args_text)
                .map_err(|e| ProviderError::Malformed(format!("arguments of {name}: {e}")))?
        };
        let arguments: BTreeMap<String, Value> = match Value::from_json(&args_json) {
            Ok(Value::Map(m)) => m,
            Ok(other) => {
                return Err(ProviderError::Malformed(format!(
                    "arguments of {name} are a {}",
                    other.kind_name()
                )))
            }
            Err(e) => return Err(ProviderError::Malformed(format!("arguments of {name}: {e}"))),
        };
        calls.push(ToolCallAction::new(name, arguments));
    }
    let reported = match choice.get("finish_reason").and_then(Json::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("tool_calls") | Some("function_call") => FinishReason::ToolCalls,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    Ok(ChatResponse::normalized(content, calls, reported))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tool_call_completion() {
        let text = r#"{"choices":[{"finish_reason":"tool_calls","message":{"content":null,
            "tool_calls":[{"id":"x","type":"function","function":{"name":"send_certificate",
            "arguments":"{\"user_id\":\"U1\",\"amount\":50}"}}]}}]}"#;
        let resp = parse_completion(text).unwrap();
        assert_eq!(resp.finish_reason, FinishReason::ToolCalls);
        assert_eq!(resp.tool_calls[0].tool_name, "send_certificate");
        assert_eq!(resp.tool_calls[0].arguments["amount"], Value::Int(50));
    }

    #[test]
    fn parses_length_finish() {
        let text = r#"{"choices":[{"finish_reason":"length","message":{"content":"partial"}}]}"#;
        let resp = parse_completion(text).unwrap();
        assert_eq!(resp.finish_reason, FinishReason::Length);
        assert!(parse_completion("{}").is_err());
    }

    #[test]
    fn body_carries_tools_and_call_ids() {
        let mut call = ToolCallAction::new("get_user_details", BTreeMap::new());
        call.call_id = "c1".into();
        let req = ChatRequest::new(
            "m",
            vec![
                ChatMessage::user("hi"),
                ChatMessage::assistant(None, vec![call]),
                ChatMessage::tool("c1", "{}"),
            ],
        );
        let body = request_body(&req);
        assert_eq!(body["messages"][1]["tool_calls"][0]["id"], "c1");
        assert_eq!(body["messages"][2]["tool_call_id"], "c1");
        assert_eq!(body["temperature"], 0.0);
    }
}
