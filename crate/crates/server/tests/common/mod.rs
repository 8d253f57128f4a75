#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::StreamExt as _;
use serde_json::{json, Value};

use capy_core::gateway::ModelRef;
use capy_core::settings::Settings;
use capy_server::{serve, Service, ServiceConfig};

pub struct TestServer {
    pub base: String,
    pub state_dir: PathBuf,
    _state: Option<tempfile::TempDir>,
    pub scratch: tempfile::TempDir,
    pub service: Arc<Service>,
    pub http: reqwest::Client,
}

pub async fn start() -> TestServer {
    let dir = tempfile::tempdir().unwrap();
    let mut srv = start_in(dir.path().to_path_buf()).await;
    srv._state = Some(dir);
    srv
}

/// Server over an existing state directory.
pub async fn start_in(state_dir: PathBuf) -> TestServer {
    start_with(state_dir, |_| {}).await
}

pub async fn start_with(state_dir: PathBuf, tweak: impl FnOnce(&mut ServiceConfig)) -> TestServer {
    let mut config = ServiceConfig::new(&state_dir);
    tweak(&mut config);
    let service = Arc::new(Service::new(config).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(serve(listener, service.clone()));
    TestServer { base, state_dir, _state: None, scratch: tempfile::tempdir().unwrap(), service, http: reqwest::Client::new() }
}

pub fn fixture(name: &str) -> Vec<u8> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/notebooks");
    let path = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(name))
        .unwrap_or_else(|| panic!("no fixture {name}"));
    std::fs::read(path).unwrap()
}

pub fn envelope(kind: &str, content: &str, done: bool) -> String {
    json!({ "type": kind, "content": content, "done": done }).to_string()
}

pub fn entry(reply: impl Into<String>) -> Value {
    json!({ "reply": reply.into() })
}

pub fn expecting(substring: &str, reply: impl Into<String>) -> Value {
    json!({ "expect_substring": substring, "reply": reply.into() })
}

pub fn delayed(reply: impl Into<String>, delay_ms: u64) -> Value {
    json!({ "reply": reply.into(), "delay_ms": delay_ms })
}

pub fn write_transcript(dir: &Path, name: &str, entries: &[Value]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(entries).unwrap()).unwrap();
    path
}

/// The 3-turn plan, code, interpretation script.
pub fn three_turns() -> Vec<Value> {
    vec![
        entry(envelope("markdown", "## Plan\nLoad the data, then compare groups.", false)),
        entry(envelope("code", "total = sum(range(10))\nprint(total)", false)),
        entry(envelope("markdown", "The total is 45, so the groups balance.", true)),
    ]
}

impl TestServer {
    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    pub async fn create(&self, notebook: &[u8]) -> String {
        let resp = self.http.post(self.url("/sessions")).body(notebook.to_vec()).send().await.unwrap();
        assert_eq!(resp.status(), 201);
        resp.json::<Value>().await.unwrap()["id"].as_str().unwrap().to_string()
    }

    /// Session whose every role replays `entries`.
    pub async fn scripted_session(&self, notebook: &[u8], entries: &[Value]) -> String {
        let id = self.create(notebook).await;
        self.use_script(&id, entries, |_| {}).await;
        id
    }

    pub async fn use_script(&self, id: &str, entries: &[Value], tweak: impl FnOnce(&mut Settings)) {
        let path = write_transcript(self.scratch.path(), &format!("{id}-{}.json", uuid_like()), entries);
        let mut settings = Settings::with_model(ModelRef::scripted(path));
        tweak(&mut settings);
        let resp = self.http.put(self.url(&format!("/sessions/{id}/settings"))).json(&settings).send().await.unwrap();
        assert_eq!(resp.status(), 200, "{}", resp.text().await.unwrap());
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let resp = self.http.post(self.url(path)).json(&body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn put(&self, path: &str, body: Value) -> (u16, Value) {
        let resp = self.http.put(self.url(path)).json(&body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn get_json(&self, path: &str) -> (u16, Value) {
        let resp = self.http.get(self.url(path)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn notebook(&self, id: &str) -> capy_core::notebook::Notebook {
        let bytes = self.http.get(self.url(&format!("/sessions/{id}/notebook"))).send().await.unwrap().bytes().await.unwrap();
        capy_core::notebook::parse_notebook(&bytes).unwrap()
    }

    pub async fn wait_idle(&self, id: &str) {
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let (_, s) = self.get_json(&format!("/sessions/{id}")).await;
            if s["run_state"] == "idle" {
                return;
            }
            assert!(Instant::now() < deadline, "run did not finish");
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    }

    /// Reads the event stream until a terminal loop event, recording when
    /// each event arrived.
    pub async fn read_run(&self, id: &str, query: &str) -> Vec<(Instant, Value)> {
        let resp = self.http.get(self.url(&format!("/sessions/{id}/events{query}"))).send().await.unwrap();
        assert_eq!(resp.status(), 200);
        assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
        read_until_terminal(resp).await
    }
}

fn uuid_like() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos()
}

pub const TERMINAL: [&str; 3] = ["loop_done", "loop_stopped", "loop_failed"];

pub async fn read_until_terminal(resp: reqwest::Response) -> Vec<(Instant, Value)> {
    let mut stream = resp.bytes_stream();
    let mut buf = String::new();
    let mut events = Vec::new();
    let deadline = Duration::from_secs(60);
    loop {
        let chunk = tokio::time::timeout(deadline, stream.next()).await.expect("event stream stalled");
        let chunk = chunk.expect("stream closed before a terminal event").unwrap();
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let data: Vec<&str> = block.lines().filter_map(|l| l.strip_prefix("data:")).map(str::trim_start).collect();
            if data.is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(&data.join("\n")).unwrap();
            let terminal = TERMINAL.contains(&value["kind"].as_str().unwrap());
            events.push((Instant::now(), value));
            if terminal {
                return events;
            }
        }
    }
}

pub fn kinds(events: &[(Instant, Value)]) -> Vec<String> {
    events.iter().map(|(_, e)| e["kind"].as_str().unwrap().to_string()).collect()
}

pub fn without_heartbeats(events: &[(Instant, Value)]) -> Vec<String> {
    kinds(events).into_iter().filter(|k| k != "heartbeat").collect()
}
