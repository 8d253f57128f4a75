//! Out-of-process, interruptible code execution.
//!
//! Each [`Executor`] owns one worker process speaking line-delimited JSON
//! over stdin/stdout. Executions are serialized; `interrupt` bypasses the
//! queue and reaches the worker while a cell is running.

use std::process::Stdio;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, Command};
use tokio::sync::{mpsc, Mutex};

use crate::notebook::{MimeBundle, Output, StreamName};

/// Source of the bundled reference worker.
pub const REFERENCE_WORKER: &str = include_str!("../assets/worker.py");

pub const DEFAULT_TIMEOUT_MS: u64 = 120_000;
/// Extra time the worker gets to report before it is killed.
pub const GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("execution worker died; reset the session")]
    WorkerDead,
    #[error("failed to spawn execution worker: {0}")]
    Spawn(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Error,
    Interrupted,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    pub outputs: Vec<Output>,
    pub duration_ms: u64,
}

impl ExecutionResult {
    pub fn error_output(&self) -> Option<(&str, &str)> {
        self.outputs.iter().find_map(|o| match o {
            Output::Error { ename, evalue, .. } => Some((ename.as_str(), evalue.as_str())),
            _ => None,
        })
    }

    /// Short text form fed back to the model as the latest observation.
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut text = format!("status: {:?}\n", self.status).to_lowercase();
        for output in &self.outputs {
            match output {
                Output::Stream { name, text: t } => {
                    let tag = if *name == StreamName::Stdout { "stdout" } else { "stderr" };
                    let _ = writeln!(text, "[{tag}] {}", clip(t, 1500));
                }
                Output::Error { ename, evalue, .. } => {
                    let _ = writeln!(text, "[error] {ename}: {evalue}");
                }
                other => {
                    if let Some(data) = other.data() {
                        for (mime, payload) in data {
                            match (mime.as_str(), payload.as_str()) {
                                ("text/plain", Some(s)) => {
                                    let _ = writeln!(text, "[result] {}", clip(s, 1500));
                                }
                                (m, Some(s)) if m.starts_with("image/") => {
                                    let _ = writeln!(text, "[{m}: {} bytes]", s.len());
                                }
                                _ => {}
                            }
                        }
                    }
                }
            }
        }
        text
    }
}

fn clip(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((cut, _)) => format!("{}…", &text[..cut]),
        None => text.to_string(),
    }
}

/// Execution backend used by the agent loop.
#[async_trait]
pub trait CodeRunner: Send + Sync {
    async fn execute(&self, source: &str, timeout_ms: u64) -> Result<ExecutionResult, ExecutorError>;
    async fn interrupt(&self) -> Result<(), ExecutorError>;
    async fn reset(&self) -> Result<(), ExecutorError>;
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    pub program: String,
    pub args: Vec<String>,
}

impl ExecutorConfig {
    /// Bundled worker under `CAPY_PYTHON` (default `python3`).
    pub fn reference() -> Self {
        let python = std::env::var("CAPY_PYTHON").unwrap_or_else(|_| "python3".into());
        ExecutorConfig {
            program: python,
            args: vec!["-u".into(), "-c".into(), REFERENCE_WORKER.into()],
        }
    }

    /// An external worker binary, launched with no arguments.
    pub fn command(program: impl Into<String>) -> Self {
        ExecutorConfig { program: program.into(), args: Vec::new() }
    }
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self::reference()
    }
}

#[derive(Debug, Deserialize)]
struct WireEvent {
    id: u64,
    event: String,
    #[serde(flatten)]
    rest: Map<String, Value>,
}

struct Worker {
    events: mpsc::UnboundedReceiver<WireEvent>,
    control: Control,
    next_id: u64,
    dead: bool,
}

#[derive(Clone)]
struct Control {
    stdin: Arc<Mutex<ChildStdin>>,
    child: Arc<StdMutex<Child>>,
}

impl Control {
    async fn send(&self, line: String) -> Result<(), ExecutorError> {
        let mut stdin = self.stdin.lock().await;
        stdin.write_all(line.as_bytes()).await.map_err(|_| ExecutorError::WorkerDead)?;
        stdin.write_all(b"\n").await.map_err(|_| ExecutorError::WorkerDead)?;
        stdin.flush().await.map_err(|_| ExecutorError::WorkerDead)
    }

    fn kill(&self) {
        let _ = self.child.lock().unwrap().start_kill();
    }
}

pub struct Executor {
    config: ExecutorConfig,
    slot: Mutex<Option<Worker>>,
    control: StdMutex<Option<Control>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("program", &self.config.program).finish()
    }
}

impl Executor {
    pub fn new(config: ExecutorConfig) -> Self {
        Executor { config, slot: Mutex::new(None), control: StdMutex::new(None) }
    }

    fn spawn(&self) -> Result<Worker, ExecutorError> {
        let mut child = Command::new(&self.config.program)
            .args(&self.config.args)
            .env("MPLBACKEND", "Agg")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| ExecutorError::Spawn(format!("{}: {e}", self.config.program)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");

        let (tx, rx) = mpsc::unbounded_channel();
        tokio::spawn(async move {
            let mut lines = BufReader::new(stdout).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                match serde_json::from_str::<WireEvent>(&line) {
                    Ok(event) => {
                        if tx.send(event).is_err() {
                            break;
                        }
                    }
                    Err(e) => tracing::warn!("ignoring malformed worker line ({e}): {line}"),
                }
            }
        });
        tokio::spawn(async move {
            let mut lines = BufReader::new(stderr).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                tracing::debug!(target: "capy::worker", "{line}");
            }
        });

        let control = Control {
            stdin: Arc::new(Mutex::new(stdin)),
            child: Arc::new(StdMutex::new(child)),
        };
        *self.control.lock().unwrap() = Some(control.clone());
        Ok(Worker { events: rx, control, next_id: 0, dead: false })
    }

    async fn run(&self, worker: &mut Worker, source: &str, timeout_ms: u64) -> Result<ExecutionResult, ExecutorError> {
        worker.next_id += 1;
        let id = worker.next_id;
        let request = serde_json::json!({"op": "exec", "id": id, "code": source, "timeout_ms": timeout_ms});
        worker.control.send(request.to_string()).await?;

        let started = Instant::now();
        let deadline = tokio::time::Instant::now() + Duration::from_millis(timeout_ms) + GRACE;
        let mut outputs = Vec::new();
        loop {
            let event = match tokio::time::timeout_at(deadline, worker.events.recv()).await {
                Ok(Some(event)) => event,
                Ok(None) => {
                    worker.dead = true;
                    return Err(ExecutorError::WorkerDead);
                }
                Err(_) => {
                    tracing::warn!(id, "worker missed its deadline; killing it");
                    worker.control.kill();
                    worker.dead = true;
                    return Ok(ExecutionResult {
                        status: ExecStatus::Timeout,
                        outputs,
                        duration_ms: started.elapsed().as_millis() as u64,
                    });
                }
            };
            if event.id != id {
                continue;
            }
            match event.event.as_str() {
                "done" => {
                    let status = match event.rest.get("status").and_then(Value::as_str) {
                        Some("ok") => ExecStatus::Ok,
                        Some("error") => ExecStatus::Error,
                        Some("interrupted") => ExecStatus::Interrupted,
                        Some("timeout") => ExecStatus::Timeout,
                        other => {
                            tracing::warn!("unknown done status {other:?}");
                            ExecStatus::Error
                        }
                    };
                    let duration_ms = event
                        .rest
                        .get("duration_ms")
                        .and_then(Value::as_u64)
                        .unwrap_or_else(|| started.elapsed().as_millis() as u64);
                    return Ok(normalize(ExecutionResult { status, outputs, duration_ms }));
                }
                _ => {
                    if let Some(output) = to_output(&event) {
                        outputs.push(output);
                    }
                }
            }
        }
    }
}

/// Restores the status/error-output invariant if a worker broke it.
fn normalize(mut result: ExecutionResult) -> ExecutionResult {
    let errors = result.outputs.iter().filter(|o| o.is_error()).count();
    match result.status {
        ExecStatus::Error if errors == 0 => result.outputs.push(Output::Error {
            ename: "WorkerError".into(),
            evalue: "execution failed without an error report".into(),
            traceback: Vec::new(),
        }),
        ExecStatus::Error if errors > 1 => {
            let mut seen = false;
            result.outputs.retain(|o| !o.is_error() || !std::mem::replace(&mut seen, true));
        }
        ExecStatus::Ok if errors > 0 => result.status = ExecStatus::Error,
        _ => {}
    }
    result
}

fn to_output(event: &WireEvent) -> Option<Output> {
    let str_field = |k: &str| event.rest.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
    match event.event.as_str() {
        "stream" => {
            let text = str_field("text");
            Some(if str_field("name") == "stderr" { Output::stderr(text) } else { Output::stdout(text) })
        }
        "display" => {
            let data: MimeBundle = match event.rest.get("data") {
                Some(Value::Object(map)) => map.clone().into_iter().collect(),
                _ => return None,
            };
            if data.is_empty() {
                return None;
            }
            let is_result = event.rest.get("execute_result").and_then(Value::as_bool).unwrap_or(false);
            Some(if is_result {
                Output::ExecuteResult {
                    data,
                    metadata: Map::new(),
                    execution_count: event.rest.get("execution_count").and_then(Value::as_u64),
                }
            } else {
                Output::DisplayData { data, metadata: Map::new() }
            })
        }
        "error" => Some(Output::Error {
            ename: str_field("ename"),
            evalue: str_field("evalue"),
            traceback: event
                .rest
                .get("traceback")
                .and_then(Value::as_array)
                .map(|lines| lines.iter().filter_map(|l| l.as_str().map(String::from)).collect())
                .unwrap_or_default(),
        }),
        _ => None,
    }
}

#[async_trait]
impl CodeRunner for Executor {
    async fn execute(&self, source: &str, timeout_ms: u64) -> Result<ExecutionResult, ExecutorError> {
        let mut slot = self.slot.lock().await;
        if source.trim().is_empty() {
            return Ok(ExecutionResult { status: ExecStatus::Ok, outputs: Vec::new(), duration_ms: 0 });
        }
        if slot.is_none() {
            *slot = Some(self.spawn()?);
        }
        let worker = slot.as_mut().unwrap();
        if worker.dead {
            return Err(ExecutorError::WorkerDead);
        }
        let result = self.run(worker, source, timeout_ms).await;
        if worker.dead && matches!(result, Ok(ExecutionResult { status: ExecStatus::Timeout, .. })) {
            // Killed after the grace period; the next call starts a fresh worker.
            *slot = None;
        }
        result
    }

    async fn interrupt(&self) -> Result<(), ExecutorError> {
        let control = self.control.lock().unwrap().clone();
        match control {
            Some(control) => control.send(r#"{"op":"interrupt"}"#.to_string()).await,
            None => Ok(()),
        }
    }

    async fn reset(&self) -> Result<(), ExecutorError> {
        if let Some(control) = self.control.lock().unwrap().take() {
            control.kill();
        }
        let mut slot = self.slot.lock().await;
        if let Some(old) = slot.take() {
            old.control.kill();
        }
        *slot = Some(self.spawn()?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_enforces_error_invariant() {
        let r = normalize(ExecutionResult { status: ExecStatus::Error, outputs: vec![], duration_ms: 0 });
        assert_eq!(r.outputs.iter().filter(|o| o.is_error()).count(), 1);
        let err = Output::Error { ename: "E".into(), evalue: "v".into(), traceback: vec![] };
        let r = normalize(ExecutionResult { status: ExecStatus::Ok, outputs: vec![err], duration_ms: 0 });
        assert_eq!(r.status, ExecStatus::Error);
    }

    #[test]
    fn summary_mentions_error_name_and_message() {
        let r = ExecutionResult {
            status: ExecStatus::Error,
            outputs: vec![Output::Error {
                ename: "KeyError".into(),
                evalue: "'salary'".into(),
                traceback: vec![],
            }],
            duration_ms: 3,
        };
        let text = r.summary();
        assert!(text.contains("status: error"));
        assert!(text.contains("KeyError: 'salary'"));
    }

    #[tokio::test]
    async fn empty_source_is_ok_without_worker() {
        let exec = Executor::new(ExecutorConfig::command("/nonexistent/worker"));
        let r = exec.execute("   \n", 1000).await.unwrap();
        assert_eq!(r.status, ExecStatus::Ok);
        assert!(r.outputs.is_empty());
        assert!(matches!(exec.execute("1", 1000).await, Err(ExecutorError::Spawn(_))));
    }
}
