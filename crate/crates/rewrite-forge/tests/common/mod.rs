//! Instrumented chat-completions mock shared by the integration tests.
//!
//! The server runs on its own thread and runtime, so it serves both async
//! tests and subprocess runs of the binary.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use rewrite_forge::records::write_documents_to;
use rewrite_forge_core::{Document, Origin, QualityScores, RetryPolicy};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub enum Mode {
    /// Tag derived from the instruction, then the document text verbatim.
    Rewrite,
    /// The same content for every request.
    Fixed(String),
    /// These statuses in order, then `Fixed("OK")`-style success.
    Script(Vec<u16>),
    /// Always this status.
    Status(u16),
    /// 200 with a body that has no message content.
    Malformed,
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub mode: Mode,
    /// First attempt of a request whose key hashes to 0 mod `n` gets a 429.
    pub transient_one_in: Option<u64>,
    /// Documents whose text contains this marker come back empty.
    pub empty_marker: Option<String>,
    /// Documents whose text contains this marker always get a 400.
    pub reject_marker: Option<String>,
    pub delay: Duration,
}

impl MockConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            transient_one_in: None,
            empty_marker: None,
            reject_marker: None,
            delay: Duration::ZERO,
        }
    }
}

#[derive(Default)]
pub struct MockState {
    pub requests: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub injected_429: AtomicUsize,
    pub seen: Mutex<HashMap<u64, u32>>,
    pub script_pos: AtomicUsize,
    pub last_auth: Mutex<Option<String>>,
    pub last_body: Mutex<Option<Value>>,
}

pub struct MockServer {
    pub url: String,
    pub state: Arc<MockState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl MockServer {
    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn injected_429(&self) -> usize {
        self.state.injected_429.load(Ordering::SeqCst)
    }

    pub fn reset_counts(&self) {
        self.state.requests.store(0, Ordering::SeqCst);
        self.state.max_in_flight.store(0, Ordering::SeqCst);
    }
}

pub fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn user_content(body: &Value) -> String {
    body["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string()
}

fn ok(content: &str) -> (StatusCode, Json<Value>) {
    (
        StatusCode::OK,
        Json(json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]})),
    )
}

async fn handle(
    State((config, state)): State<(Arc<MockConfig>, Arc<MockState>)>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    *state.last_auth.lock().unwrap() = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    *state.last_body.lock().unwrap() = Some(body.clone());
    if !config.delay.is_zero() {
        tokio::time::sleep(config.delay).await;
    }
    let response = respond(&config, &state, &body);
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    response
}

fn respond(config: &MockConfig, state: &MockState, body: &Value) -> (StatusCode, Json<Value>) {
    let user = user_content(body);
    let (instruction, document) = match user.rfind("Texto:\n") {
        Some(i) => (&user[..i], &user[i + "Texto:\n".len()..]),
        None => ("", user.as_str()),
    };
    if let Some(n) = config.transient_one_in {
        let key = fnv(user.as_bytes());
        let mut seen = state.seen.lock().unwrap();
        let attempts = seen.entry(key).or_insert(0);
        *attempts += 1;
        if *attempts == 1 && key.is_multiple_of(n) {
            state.injected_429.fetch_add(1, Ordering::SeqCst);
            return (StatusCode::TOO_MANY_REQUESTS, Json(json!({"error": "slow down"})));
        }
    }
    if config.reject_marker.as_deref().is_some_and(|m| document.contains(m)) {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "rejected"})));
    }
    if config.empty_marker.as_deref().is_some_and(|m| document.contains(m)) {
        return ok("   ");
    }
    match &config.mode {
        Mode::Rewrite => {
            let tag = format!("estilo{:03x}", fnv(instruction.as_bytes()) & 0xfff);
            ok(&format!("{tag} {document}"))
        }
        Mode::Fixed(s) => ok(s),
        Mode::Script(statuses) => {
            let pos = state.script_pos.fetch_add(1, Ordering::SeqCst);
            match statuses.get(pos) {
                Some(&code) => (StatusCode::from_u16(code).unwrap(), Json(json!({"error": code}))),
                None => ok("OK"),
            }
        }
        Mode::Status(code) => (StatusCode::from_u16(*code).unwrap(), Json(json!({"error": code}))),
        Mode::Malformed => (StatusCode::OK, Json(json!({"choices": []}))),
    }
}

pub fn start(config: MockConfig) -> MockServer {
    let state = Arc::new(MockState::default());
    let shared = (Arc::new(config), Arc::clone(&state));
    let (addr_tx, addr_rx) = mpsc::channel::<SocketAddr>();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new()
                .route("/v1/chat/completions", post(handle))
                .with_state(shared);
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
        });
    });
    let addr = addr_rx
        .recv_timeout(Duration::from_secs(10))
        .expect("mock server failed to start");
    MockServer {
        url: format!("http://{addr}"),
        state,
        shutdown: Some(stop_tx),
    }
}

/// Retries quickly so tests stay fast.
pub fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        base_backoff: Duration::from_millis(5),
        max_backoff: Duration::from_millis(40),
        ..RetryPolicy::default()
    }
}

pub fn original(id: &str, text: &str) -> Document {
    Document {
        id: id.into(),
        token_count: text.split_whitespace().count() as u64,
        text: text.into(),
        scores: QualityScores::new(3.0, 1.0).unwrap(),
        origin: Origin::Original,
        source_url: None,
        extra: BTreeMap::new(),
    }
}

/// `n` originals of varying length, ids `doc-000`, `doc-001`, ...
pub fn originals(n: usize) -> Vec<Document> {
    (0..n)
        .map(|i| {
            let words: Vec<String> = (0..(5 + i % 17))
                .map(|w| format!("palavra{}", (i * 7 + w) % 31))
                .collect();
            original(&format!("doc-{i:03}"), &words.join(" "))
        })
        .collect()
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn write_corpus(path: &Path, docs: &[Document]) {
    let refs: Vec<&Document> = docs.iter().collect();
    write_documents_to(path, &refs).unwrap();
}

pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_rewrite-forge"))
}

/// The desk config with absolute fixture paths, pointed at `endpoint` and
/// writing under `out`. Returns the config path inside `dir`.
pub fn desk_config(dir: &Path, endpoint: &str, out: &Path) -> PathBuf {
    let text = std::fs::read_to_string(fixtures_dir().join("desk-config.json")).unwrap();
    let mut config: Value = serde_json::from_str(&text).unwrap();
    let abs = |name: &Value| json!(fixtures_dir().join(name.as_str().unwrap()));
    config["corpus_path"] = abs(&config["corpus_path"]);
    let eval = &mut config["evaluation"];
    eval["task_specs"] = abs(&eval["task_specs"]);
    eval["results"] = abs(&eval["results"]);
    for key in ["curves", "category_curves"] {
        let list: Vec<Value> = eval[key].as_array().unwrap().iter().map(abs).collect();
        eval[key] = json!(list);
    }
    config["rewrite"]["endpoint"] = json!(endpoint);
    config["rewrite"]["rate"]["requests_per_second"] = json!(2000.0);
    config["rewrite"]["retry"] = json!({"base_backoff": 5, "max_backoff": 40});
    config["output_dir"] = json!(out);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_cli(args: &[&str]) -> Outcome {
    let out = std::process::Command::new(binary())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    Outcome {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}
