use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use policybank::provider::{
    ChatMessage, ChatProvider, ChatRequest, FinishReason, LiveConfig, LiveProvider, ProviderError,
};

struct Captured {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order, and records
/// what each request carried.
fn mock_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut length, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn fast(url: String, key: Option<&str>) -> LiveProvider {
    let mut cfg = LiveConfig::new(url, key.map(str::to_string));
    cfg.initial_backoff = Duration::from_millis(1);
    cfg.max_backoff = Duration::from_millis(5);
    cfg.max_retries = 2;
    LiveProvider::new(cfg)
}

fn request() -> ChatRequest {
    ChatRequest::new("m", vec![ChatMessage::system("be brief"), ChatMessage::user("hi")])
}

const TOOL_COMPLETION: &str = r#"{"choices":[{"finish_reason":"tool_calls","message":{"content":null,"tool_calls":[{"id":"call_1","type":"function","function":{"name":"get_reservation","arguments":"{\"reservation_id\":\"R1\"}"}}]}}]}"#;

#[test]
fn retries_rate_limit_then_parses_tool_call() {
    let (url, seen) = mock_server(vec![(429, "{}".into()), (200, TOOL_COMPLETION.into())]);
    let resp = fast(url, Some("sk-test")).chat(&request()).unwrap();
    assert_eq!(resp.finish_reason, FinishReason::ToolCalls);
    assert_eq!(resp.tool_calls.len(), 1);
    assert_eq!(resp.tool_calls[0].tool_name, "get_reservation");
    assert_eq!(resp.tool_calls[0].arguments["reservation_id"].as_str(), Some("R1"));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[1].body["model"], "m");
    assert_eq!(seen[1].body["messages"][1]["content"], "hi");
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = mock_server(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let err = fast(url, None).chat(&request()).unwrap_err();
    assert!(matches!(err, ProviderError::Auth(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(seen.lock().unwrap()[0].auth.is_none());
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let (url, seen) = mock_server(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let err = fast(url, None).chat(&request()).unwrap_err();
    assert!(matches!(err, ProviderError::Http { status: 503, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn text_completion_with_length_finish() {
    let body = r#"{"choices":[{"finish_reason":"length","message":{"content":"partial"}}]}"#;
    let (url, _) = mock_server(vec![(200, body.into())]);
    let resp = fast(url, None).chat(&request()).unwrap();
    assert_eq!(resp.text.as_deref(), Some("partial"));
    assert_eq!(resp.finish_reason, FinishReason::Length);
}
