//! The remote backend against a local mock endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use agent_unlearn::agent::backend::BackendError;
use agent_unlearn::agent::{run_episode, ConstraintSet, MemoryStore, RemoteBackend, RemoteConfig, RuntimeError};
use agent_unlearn::experiment::ExperimentError;
use agent_unlearn::grid::GridSpec;

#[derive(Debug, Clone)]
struct Seen {
    head: String,
    body: String,
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn mock(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, reply) in script {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen { head, body: String::from_utf8(body).unwrap() });
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let mut stream = reader.into_inner();
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn completion(text: &str) -> (u16, String) {
    (200, serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string())
}

fn backend(url: &str, retries: u32) -> RemoteBackend {
    let config = RemoteConfig {
        endpoint: url.to_string(),
        model: "mock-1".into(),
        timeout_secs: 5.0,
        max_retries: retries,
        backoff_ms: 1,
        max_in_flight: 1,
    };
    RemoteBackend::with_key(config, Some("k-test".into())).unwrap()
}

fn corridor() -> GridSpec {
    GridSpec::from_text("corridor", "S.T").unwrap()
}

fn episode(b: &mut RemoteBackend) -> Result<agent_unlearn::agent::EpisodeResult, RuntimeError> {
    run_episode(&corridor(), b, &mut MemoryStore::new(), &ConstraintSet::new(), 2)
}

#[test]
fn replies_drive_the_agent() {
    let (url, seen) = mock(vec![completion("R"), completion("I will go r.")]);
    let ep = episode(&mut backend(&url, 0)).unwrap();
    assert!(ep.success);
    assert_eq!(ep.steps, 2);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen[0].head.starts_with("POST /v1/chat/completions "));
    assert!(seen[0].head.to_ascii_lowercase().contains("authorization: bearer k-test"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "mock-1");
    assert_eq!(body["temperature"], 0);
    assert!(!body["messages"][0]["content"].as_str().unwrap().is_empty());
}

#[test]
fn one_reprompt_after_an_unparseable_reply() {
    let (url, seen) = mock(vec![completion("Going right now"), completion("R"), completion("R")]);
    let ep = episode(&mut backend(&url, 0)).unwrap();
    assert!(ep.success);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[1].body.contains("did not contain a move"));
    assert!(!seen[0].body.contains("did not contain a move"));
}

#[test]
fn two_unparseable_replies_fail() {
    let (url, _) = mock(vec![completion("no"), completion("still no")]);
    let err = episode(&mut backend(&url, 0)).unwrap_err();
    let RuntimeError::Backend(BackendError::Unparseable(reply)) = &err else { panic!("{err:?}") };
    assert_eq!(reply, "still no");
    // A reply with no move is a failure of the remote backend.
    assert_eq!(ExperimentError::from(err).exit_code(), 3);
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = mock(vec![(503, "busy".into()), (429, "slow down".into()), completion("R"), completion("R")]);
    let ep = episode(&mut backend(&url, 2)).unwrap();
    assert!(ep.success);
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = mock(vec![(401, "no key".into()), completion("R")]);
    let err = episode(&mut backend(&url, 3)).unwrap_err();
    assert!(matches!(err, RuntimeError::Backend(BackendError::Status { status: 401, .. })), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn exhausted_retries_are_a_transport_failure() {
    let (url, seen) = mock(vec![(500, "a".into()), (502, "b".into())]);
    let err = episode(&mut backend(&url, 1)).unwrap_err();
    assert_eq!(seen.lock().unwrap().len(), 2);
    assert_eq!(ExperimentError::from(err).exit_code(), 3);
}

#[test]
fn unreachable_endpoint_is_a_transport_failure() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = episode(&mut backend(&format!("http://127.0.0.1:{port}"), 1)).unwrap_err();
    assert!(matches!(err, RuntimeError::Backend(BackendError::Transport(_))), "{err:?}");
    assert_eq!(ExperimentError::from(err).exit_code(), 3);
}

#[test]
fn missing_endpoint_is_rejected() {
    assert!(RemoteBackend::with_key(RemoteConfig::default(), None).is_err());
}

#[test]
fn a_failed_step_leaves_memory_untouched() {
    let (url, _) = mock(vec![completion("R"), (400, "bad".into())]);
    let mut memory = MemoryStore::new();
    let err = run_episode(&corridor(), &mut backend(&url, 0), &mut memory, &ConstraintSet::new(), 2);
    assert!(err.is_err());
    assert_eq!(memory.len(), 1);
}
