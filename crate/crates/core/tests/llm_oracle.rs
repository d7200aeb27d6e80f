//! Exact-match oracle against a local mock of the chat completions endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use maskpress_core::oracle::llm::{llm_exact_match, EndpointConfig, EvalItem};
use maskpress_core::Error;
use serde_json::Value;

struct Request {
    auth: Option<String>,
    body: Value,
}

/// Serves connections on a background thread; `reply` maps a request to
/// (status, body).
fn serve<F>(reply: F) -> (String, Arc<Mutex<Vec<Request>>>)
where
    F: Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let reply = Arc::new(reply);
    let count = Arc::new(AtomicUsize::new(0));
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let (log, reply, count) = (log.clone(), reply.clone(), count.clone());
            std::thread::spawn(move || handle(stream, &log, &*reply, &count));
        }
    });
    (format!("http://{addr}"), seen)
}

fn handle(
    stream: TcpStream,
    log: &Mutex<Vec<Request>>,
    reply: &(dyn Fn(&Request, usize) -> (u16, String) + Send + Sync),
    count: &AtomicUsize,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut len = 0;
        let mut auth = None;
        loop {
            let mut h = String::new();
            reader.read_line(&mut h).unwrap();
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            let (k, v) = h.split_once(':').unwrap();
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap(),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        let req = Request { auth, body: serde_json::from_slice(&body).unwrap() };
        let n = count.fetch_add(1, Ordering::SeqCst);
        let (status, text) = reply(&req, n);
        log.lock().unwrap().push(req);
        let mut w = &stream;
        write!(
            w,
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{text}",
            text.len()
        )
        .unwrap();
        w.flush().unwrap();
    }
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn cfg(base: &str) -> EndpointConfig {
    let mut c = EndpointConfig::new(base, "toy-model");
    c.backoff_base = Duration::from_millis(5);
    c.api_key = Some("sekrit".into());
    c
}

fn items() -> Vec<EvalItem> {
    ["Q1", "Q2", "Q3", "Q4"]
        .iter()
        .map(|q| EvalItem { question: q.to_string(), gold: "42".into() })
        .collect()
}

#[test]
fn scores_exact_matches_and_sends_protocol_fields() {
    let (base, seen) = serve(|req, _| {
        let content = req.body["messages"][0]["content"].as_str().unwrap();
        let answer = if content.ends_with("Q2") { "41" } else { "The answer is 42." };
        (200, completion(answer))
    });
    let score = llm_exact_match("ctx", &items(), &cfg(&base)).unwrap();
    assert_eq!(score.detail, [true, false, true, true]);
    assert_eq!(score.value, 0.75);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 4);
    for r in seen.iter() {
        assert_eq!(r.auth.as_deref(), Some("Bearer sekrit"));
        assert_eq!(r.body["model"], "toy-model");
        assert_eq!(r.body["temperature"], 0);
        assert_eq!(r.body["messages"][0]["role"], "user");
        assert!(r.body["max_tokens"].is_u64());
    }
}

#[test]
fn server_errors_are_retried() {
    let (base, seen) = serve(|_, n| if n < 2 { (503, "{}".into()) } else { (200, completion("#### 42")) });
    let mut c = cfg(&base);
    c.concurrency = 1;
    let score = llm_exact_match("ctx", &items()[..1], &c).unwrap();
    assert_eq!(score.value, 1.0);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn persistent_failure_reports_retry_count() {
    let (base, seen) = serve(|_, _| (500, "{}".into()));
    let mut c = cfg(&base);
    c.concurrency = 1;
    let err = llm_exact_match("ctx", &items()[..1], &c).unwrap_err();
    assert!(matches!(err, Error::Remote { retries: 3, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn unreachable_endpoint_is_remote_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = llm_exact_match("ctx", &items()[..1], &cfg(&format!("http://127.0.0.1:{port}"))).unwrap_err();
    assert!(matches!(err, Error::Remote { retries: 3, .. }), "{err:?}");
}

#[test]
fn malformed_response_is_protocol_error() {
    let (base, _) = serve(|_, _| (200, r#"{"choices": []}"#.into()));
    let err = llm_exact_match("ctx", &items(), &cfg(&base)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
    let (base, _) = serve(|_, _| (200, "not json".into()));
    let err = llm_exact_match("ctx", &items(), &cfg(&base)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
}

#[test]
fn empty_eval_set_rejected() {
    assert!(llm_exact_match("ctx", &[], &cfg("http://127.0.0.1:9")).is_err());
}
