use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use regtsc::gateway::{
    BackendConfig, BackendKind, ChatBackend, ChatRequest, EmbeddingBackend, Gateway, GatewayError,
    MockBackend, RemoteBackend, ResponseCache,
};

#[derive(Clone, Default)]
struct Seen {
    hits: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<(String, String, String)>>>,
}

/// Serves canned `(status, body)` replies in order, repeating the last.
fn serve(replies: Vec<(u16, String)>) -> (String, Seen) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Seen::default();
    let s = seen.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let k = s.hits.fetch_add(1, Ordering::SeqCst);
            let path = request_line
                .split_whitespace()
                .nth(1)
                .unwrap_or("")
                .to_string();
            s.requests
                .lock()
                .unwrap()
                .push((path, auth, String::from_utf8(body).unwrap()));
            let (status, reply) = replies[k.min(replies.len() - 1)].clone();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (url, seen)
}

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Remote,
        base_url: Some(url.to_string()),
        api_key_env: "REGTSC_TEST_ONLY_KEY".into(),
        timeout_secs: 5.0,
        max_retries: 2,
        retry_base_ms: 1,
        ..BackendConfig::default()
    }
}

fn chat_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
        .to_string()
}

#[test]
fn server_errors_exhaust_retries() {
    let (url, seen) = serve(vec![(500, "{}".into())]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let err = backend.chat(&ChatRequest::user("m", "hi")).unwrap_err();
    assert!(matches!(err, GatewayError::Transport(_)), "{err}");
    assert_eq!(seen.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn retry_then_success_and_request_shape() {
    std::env::set_var("REGTSC_TEST_ONLY_KEY", "sk-test");
    let (url, seen) = serve(vec![
        (503, "{}".into()),
        (200, chat_body("<signal>2</signal>")),
    ]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let reply = backend.chat(&ChatRequest::user("m1", "hello")).unwrap();
    assert_eq!(reply, "<signal>2</signal>");
    let reqs = seen.requests.lock().unwrap();
    assert_eq!(reqs.len(), 2);
    let (path, auth, body) = &reqs[1];
    assert_eq!(path, "/v1/chat/completions");
    assert_eq!(auth.to_ascii_lowercase(), "authorization: bearer sk-test");
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "m1");
    assert_eq!(v["temperature"], 0.0);
    assert_eq!(v["messages"][0]["content"], "hello");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    match backend.chat(&ChatRequest::user("m", "hi")).unwrap_err() {
        GatewayError::Api { status, body } => {
            assert_eq!(status, 400);
            assert!(body.contains("bad"));
        }
        e => panic!("{e}"),
    }
    assert_eq!(seen.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_success_body() {
    let (url, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    assert!(matches!(
        backend.chat(&ChatRequest::user("m", "hi")),
        Err(GatewayError::Malformed(_))
    ));
}

#[test]
fn cache_hit_makes_no_network_call() {
    let (url, seen) = serve(vec![(200, chat_body("ok"))]);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&url);
    cfg.cache_dir = Some(dir.path().to_path_buf());
    let gw = Gateway::from_config(&cfg).unwrap();
    let req = ChatRequest::user("m", "same prompt");
    assert_eq!(gw.chat(&req).unwrap(), "ok");
    assert_eq!(gw.chat(&req).unwrap(), "ok");
    assert_eq!(seen.hits.load(Ordering::SeqCst), 1);
    // a fresh gateway over the same directory is served from disk
    let gw2 = Gateway::from_config(&cfg).unwrap();
    assert_eq!(gw2.chat(&req).unwrap(), "ok");
    assert_eq!(seen.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn embeddings_are_reordered_by_index() {
    let body = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]},
    ]})
    .to_string();
    let (url, seen) = serve(vec![(200, body)]);
    let backend = RemoteBackend::new(config(&url)).unwrap();
    let v = backend.embed_texts(&["a".into(), "b".into()]).unwrap();
    assert_eq!(v[0].0, vec![1.0, 0.0]);
    assert_eq!(v[1].0, vec![0.0, 1.0]);
    let reqs = seen.requests.lock().unwrap();
    assert_eq!(reqs[0].0, "/v1/embeddings");
    let sent: serde_json::Value = serde_json::from_str(&reqs[0].2).unwrap();
    assert_eq!(sent["input"], serde_json::json!(["a", "b"]));
}

#[test]
fn unreachable_server_is_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let mut cfg = config(&url);
    cfg.max_retries = 0;
    let backend = RemoteBackend::new(cfg).unwrap();
    assert!(matches!(
        backend.chat(&ChatRequest::user("m", "hi")),
        Err(GatewayError::Transport(_))
    ));
}

#[test]
fn mock_embeddings_preserve_order_and_permute() {
    let mock = MockBackend::default();
    let texts: Vec<String> = ["queue", "emergency", "phase"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let v = mock.embed_texts(&texts).unwrap();
    assert_eq!(v.len(), 3);
    let rev: Vec<String> = texts.iter().rev().cloned().collect();
    let w = mock.embed_texts(&rev).unwrap();
    assert_eq!(v[0], w[2]);
    assert_eq!(v[2], w[0]);
    assert_ne!(v[0], v[1]);
}

#[test]
fn cache_is_transparent() {
    let req = ChatRequest::user(
        "m",
        regtsc::observation::render_regular_prompt(&regtsc::observation::empty_observation(
            &regtsc::network::IntersectionTemplate::new(regtsc::network::Shape::Tee, 2)
                .network()
                .unwrap(),
            0,
        ))
        .text,
    );
    let plain = MockBackend::default().chat(&req).unwrap();
    let cached = Gateway::new(
        Box::new(MockBackend::default()),
        Box::new(MockBackend::default()),
        Some(ResponseCache::new(None)),
    );
    assert_eq!(cached.chat(&req).unwrap(), plain);
    assert_eq!(cached.chat(&req).unwrap(), plain);
    assert_eq!(cached.backend_calls(), 1);
}
