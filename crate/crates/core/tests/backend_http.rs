use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::Value;

use measeval_core::backend::{
    complete_with_retry, BackendError, CompletionBackend, CompletionRequest, HttpBackend, ModelField, RetryPolicy,
};
use measeval_core::FinishReason;

struct Captured {
    headers: Vec<(String, String)>,
    body: Value,
}

impl Captured {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Serves the canned `(status, body)` replies in order, one per connection,
/// and reports each request it saw.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut headers = Vec::new();
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let trimmed = line.trim_end();
                if trimmed.is_empty() {
                    break;
                }
                let (k, v) = trimmed.split_once(':').unwrap();
                headers.push((k.trim().to_string(), v.trim().to_string()));
            }
            let len: usize = headers
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                .map(|(_, v)| v.parse().unwrap())
                .unwrap_or(0);
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Captured {
                headers,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn request() -> CompletionRequest {
    CompletionRequest {
        prompt: "Text:\nHeated to 300 K.\n\nData:\n".into(),
        max_tokens: 350,
        temperature: 0.0,
        top_p: 1.0,
        model: "davinci".into(),
    }
}

fn ok_body(text: &str, finish: &str) -> String {
    serde_json::json!({"choices": [{"text": text, "finish_reason": finish}]}).to_string()
}

#[test]
fn sends_the_documented_body_and_bearer_token() {
    let (url, rx) = serve(vec![(200, ok_body("Quantity: 300 K\nUnit: K\n", "stop"))]);
    let backend = HttpBackend::new(url, Some("sk-test".into()));
    let result = backend.complete("D", &request()).unwrap();
    assert_eq!(result.text, "Quantity: 300 K\nUnit: K\n");
    assert_eq!(result.finish_reason, FinishReason::Stop);

    let seen = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(seen.header("authorization"), Some("Bearer sk-test"));
    assert_eq!(seen.body["prompt"], "Text:\nHeated to 300 K.\n\nData:\n");
    assert_eq!(seen.body["max_tokens"], 350);
    assert_eq!(seen.body["temperature"], 0.0);
    assert_eq!(seen.body["top_p"], 1.0);
    assert_eq!(seen.body["model"], "davinci");
}

#[test]
fn engine_field_and_custom_header() {
    let (url, rx) = serve(vec![(200, ok_body("", "length"))]);
    let backend = HttpBackend::new(url, Some("k".into()))
        .with_auth_header("api-key")
        .with_model_field(ModelField::Engine);
    let result = backend.complete("D", &request()).unwrap();
    assert_eq!(result.finish_reason, FinishReason::Length);

    let seen = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(seen.header("api-key"), Some("k"));
    assert_eq!(seen.header("authorization"), None);
    assert_eq!(seen.body["engine"], "davinci");
    assert!(seen.body.get("model").is_none());
}

#[test]
fn server_errors_are_retried() {
    let (url, _rx) = serve(vec![
        (503, "busy".into()),
        (500, "oops".into()),
        (200, ok_body("Quantity: 5 %\n", "stop")),
    ]);
    let backend = HttpBackend::new(url, None);
    let policy = RetryPolicy {
        retry_limit: 3,
        initial_backoff: Duration::from_millis(1),
        max_backoff: Duration::from_millis(2),
    };
    let (result, attempts) = complete_with_retry(&backend, "D", &request(), &policy);
    assert_eq!(result.unwrap().text, "Quantity: 5 %\n");
    assert_eq!(attempts, 3);
}

#[test]
fn retries_stop_at_the_limit() {
    let (url, _rx) = serve(vec![(502, "a".into()), (502, "b".into())]);
    let backend = HttpBackend::new(url, None);
    let policy = RetryPolicy {
        retry_limit: 1,
        initial_backoff: Duration::from_millis(1),
        max_backoff: Duration::from_millis(1),
    };
    let (result, attempts) = complete_with_retry(&backend, "D", &request(), &policy);
    assert_eq!(attempts, 2);
    assert!(matches!(result, Err(BackendError::Transport { status: Some(502), .. })));
}

#[test]
fn context_length_rejection_is_not_retried() {
    let body = r#"{"error":{"message":"This model's maximum context length is 2049 tokens","code":"context_length_exceeded"}}"#;
    let (url, _rx) = serve(vec![(400, body.into())]);
    let backend = HttpBackend::new(url, None);
    let (result, attempts) = complete_with_retry(&backend, "D", &request(), &RetryPolicy::default());
    assert!(matches!(result, Err(BackendError::BudgetRejected(_))));
    assert_eq!(attempts, 1);
}

#[test]
fn malformed_body_is_reported() {
    let (url, _rx) = serve(vec![(200, "{\"choices\": []}".into())]);
    let backend = HttpBackend::new(url, None);
    assert!(matches!(backend.complete("D", &request()), Err(BackendError::MalformedResponse(_))));
}

#[test]
fn missing_credential_is_an_error_and_keys_are_redacted() {
    let var = "MEASEVAL_TEST_KEY_THAT_IS_NOT_SET";
    assert_eq!(
        HttpBackend::from_env("http://127.0.0.1:9", var).unwrap_err(),
        BackendError::MissingCredential(var.into())
    );
    let backend = HttpBackend::new("http://127.0.0.1:9", Some("sk-secret".into()));
    assert!(!format!("{backend:?}").contains("sk-secret"));
}

#[test]
fn invalid_requests_never_reach_the_server() {
    let backend = HttpBackend::new("http://127.0.0.1:9", None);
    let mut bad = request();
    bad.max_tokens = 0;
    assert!(matches!(backend.complete("D", &bad), Err(BackendError::InvalidRequest(_))));
}
