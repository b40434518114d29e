//! The OpenAI-compatible backend against a local fake server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use audioreason::backend::{
    BackendConfig, BackendError, BackendRegistry, CallScope, ChatRequest, Message, ModelClient, RequestLimiter,
};
use audioreason::evidence::{AudioRef, Question};
use audioreason::orchestrator::{Pipeline, PipelineConfig};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Request {
    path: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Request {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

type Handler = dyn Fn(&Request, usize) -> (u16, String) + Send + Sync;

struct FakeServer {
    url: String,
    seen: Arc<Mutex<Vec<Request>>>,
}

impl FakeServer {
    /// `handler` gets each request and its 0-based arrival index.
    fn start(handler: impl Fn(&Request, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (log, handler) = (log.clone(), handler.clone());
                thread::spawn(move || serve(stream, &log, &*handler));
            }
        });
        Self { url, seen }
    }

    fn requests(&self) -> Vec<Request> {
        self.seen.lock().unwrap().clone()
    }
}

fn read_request(stream: &TcpStream) -> Option<Request> {
    let mut r = BufReader::new(stream);
    let mut line = String::new();
    r.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        r.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    let find = |name: &str| {
        headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.clone())
    };
    let mut body = Vec::new();
    if let Some(len) = find("content-length") {
        body.resize(len.parse().ok()?, 0);
        r.read_exact(&mut body).ok()?;
    } else if find("transfer-encoding").is_some_and(|v| v.contains("chunked")) {
        loop {
            let mut size = String::new();
            r.read_line(&mut size).ok()?;
            let n = usize::from_str_radix(size.trim(), 16).ok()?;
            let mut chunk = vec![0; n + 2];
            r.read_exact(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    }
    Some(Request { path, headers, body })
}

fn serve(mut stream: TcpStream, log: &Mutex<Vec<Request>>, handler: &Handler) {
    let Some(req) = read_request(&stream) else { return };
    let index = {
        let mut log = log.lock().unwrap();
        log.push(req.clone());
        log.len() - 1
    };
    let (status, body) = handler(&req, index);
    let reply = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(reply.as_bytes());
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        endpoint_url: url.into(),
        model_id: "test-model".into(),
        backoff_base_ms: 1,
        max_retries: 2,
        timeout_s: 5.0,
        ..BackendConfig::default()
    }
}

fn client(cfg: BackendConfig) -> ModelClient {
    let backend = BackendRegistry::with_defaults(None).build(&cfg).unwrap();
    ModelClient::new(backend, cfg, RequestLimiter::new(4)).unwrap()
}

fn chat_request() -> ChatRequest {
    ChatRequest::new(vec![Message::system("be brief"), Message::user("hello")])
}

#[test]
fn chat_sends_model_messages_and_bearer_key() {
    let server = FakeServer::start(|_, _| (200, completion("hi there")));
    std::env::set_var("AUDIOREASON_TEST_KEY", "sk-test");
    let c = client(BackendConfig {
        api_key_env: "AUDIOREASON_TEST_KEY".into(),
        ..config(&server.url)
    });
    let mut log = Vec::new();
    let reply = c.chat(&CallScope::new("s"), chat_request(), &mut log).unwrap();
    assert_eq!(reply, "hi there");
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].path, "/v1/chat/completions");
    assert_eq!(reqs[0].header("authorization"), Some("Bearer sk-test"));
    let body = reqs[0].json();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "hello");
    assert_eq!((log.len(), log[0].attempts), (1, 1));
}

#[test]
fn rate_limits_and_server_errors_are_retried() {
    let server = FakeServer::start(|_, i| match i {
        0 => (429, "{}".into()),
        1 => (503, "{}".into()),
        _ => (200, completion("finally")),
    });
    let c = client(config(&server.url));
    let mut log = Vec::new();
    assert_eq!(
        c.chat(&CallScope::new("s"), chat_request(), &mut log).unwrap(),
        "finally"
    );
    assert_eq!(server.requests().len(), 3);
    assert_eq!(log[0].attempts, 3);
}

#[test]
fn retry_budget_is_bounded() {
    let server = FakeServer::start(|_, _| (500, "{\"error\":\"boom\"}".into()));
    let c = client(config(&server.url));
    let mut log = Vec::new();
    let err = c.chat(&CallScope::new("s"), chat_request(), &mut log).unwrap_err();
    assert!(
        matches!(err, BackendError::RetriesExhausted { attempts: 3, .. }),
        "{err:?}"
    );
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn auth_failures_are_not_retried() {
    let server = FakeServer::start(|_, _| (401, "{\"error\":\"bad key\"}".into()));
    let c = client(config(&server.url));
    let err = c
        .chat(&CallScope::new("s"), chat_request(), &mut Vec::new())
        .unwrap_err();
    assert!(matches!(err, BackendError::Auth(_)));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn caption_embeds_base64_audio() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    std::fs::write(&path, b"RIFFfakeWAVE").unwrap();
    let server = FakeServer::start(|_, _| (200, completion("a dog barks twice")));
    let c = client(config(&server.url));
    let audio = AudioRef::new(path.to_string_lossy(), None, None).unwrap();
    let reply = c
        .audio_caption(
            &CallScope::new("s"),
            &audio,
            "Describe it.".into(),
            None,
            &mut Vec::new(),
        )
        .unwrap();
    assert_eq!(reply, "a dog barks twice");
    let body = server.requests()[0].json();
    let parts = body["messages"][0]["content"].as_array().unwrap();
    let audio_part = parts.iter().find(|p| p["type"] == "input_audio").unwrap();
    assert_eq!(audio_part["input_audio"]["format"], "wav");
    assert_eq!(audio_part["input_audio"]["data"], "UklGRmZha2VXQVZF");
}

#[test]
fn transcription_uploads_multipart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("speech.mp3");
    std::fs::write(&path, b"ID3-fake-audio").unwrap();
    let server = FakeServer::start(|_, _| (200, json!({"text": "good morning"}).to_string()));
    let c = client(config(&server.url));
    let audio = AudioRef::new(path.to_string_lossy(), None, None).unwrap();
    let text = c.transcribe(&CallScope::new("s"), &audio, &mut Vec::new()).unwrap();
    assert_eq!(text, "good morning");
    let req = &server.requests()[0];
    assert_eq!(req.path, "/v1/audio/transcriptions");
    assert!(req.header("content-type").unwrap().starts_with("multipart/form-data"));
    let body = req.text();
    assert!(body.contains("name=\"model\""));
    assert!(body.contains("filename=\"speech.mp3\""));
    assert!(body.contains("ID3-fake-audio"));
}

#[test]
fn full_pipeline_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    std::fs::write(&path, b"RIFFfakeWAVE").unwrap();
    let server = FakeServer::start(|req, _| {
        if req.path.ends_with("/audio/transcriptions") {
            return (200, json!({"text": "meet me at noon"}).to_string());
        }
        let body = req.text();
        let reply = if body.contains("input_audio") {
            "a woman speaks calmly"
        } else if body.contains("planning agent") {
            if body.contains("meet me at noon") {
                r#"{"status": "sufficient"}"#
            } else {
                r#"{"status": "insufficient", "gap_analysis": "the exact words are missing"}"#
            }
        } else if body.contains("interaction agent") {
            r#"{"action": "asr", "rationale": "transcribe"}"#
        } else if body.contains("answering agent") {
            r#"{"answer_letter": "C", "confidence": 0.9, "rationale": "she says noon"}"#
        } else {
            "?"
        };
        (200, completion(reply))
    });
    let cfg = PipelineConfig {
        allm: config(&server.url),
        llm: config(&server.url),
        asr: config(&server.url),
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::from_config(&cfg, &BackendRegistry::with_defaults(None)).unwrap();
    let audio = AudioRef::new(path.to_string_lossy(), None, None).unwrap();
    let q = Question::new(
        "When is the meeting?",
        ["morning", "midnight", "noon", "evening"].map(String::from).to_vec(),
    )
    .unwrap();
    let (answer, trace) = pipeline.run("clip", &audio, &q);
    assert_eq!(answer.selected_index, 2);
    assert!(!trace.degraded(), "{:?}", trace.degradations);
    assert_eq!(
        (trace.plan_calls(), trace.augmentations(), trace.document_len()),
        (2, 1, 2)
    );
    // caption, plan, interact, transcribe, plan, answer
    assert_eq!(server.requests().len(), 6);
}
