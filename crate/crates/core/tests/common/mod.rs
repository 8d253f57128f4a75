#![allow(dead_code)]

pub mod gen;
pub mod html;
pub mod mermaid;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use async_trait::async_trait;
use capy_core::eda::{LoopEvent, SharedNotebook};
use capy_core::executor::{CodeRunner, ExecStatus, ExecutionResult, ExecutorError};
use capy_core::gateway::ScriptEntry;
use capy_core::notebook::{Notebook, Output};
use serde_json::json;

pub fn envelope(kind: &str, content: &str, done: bool) -> ScriptEntry {
    ScriptEntry::reply(json!({"type": kind, "content": content, "done": done}).to_string())
}

pub fn ready() -> ScriptEntry {
    ScriptEntry::reply(r#"The notebook loads a dataset. {"applicable": true, "ready": true, "items": []}"#)
}

pub fn abstain() -> ScriptEntry {
    ScriptEntry::reply(r#"{"applicable": false, "ready": false, "items": []}"#)
}

pub fn not_ready(issue: &str) -> ScriptEntry {
    ScriptEntry::reply(
        json!({"applicable": true, "ready": false, "items": [{"issue": issue, "suggestion": "fix it"}]}).to_string(),
    )
}

/// Refiner reply; every rejection gets a rationale.
pub fn decision_text(accept: &[&str], reject: &[&str], revised: serde_json::Value) -> String {
    let rejected: Vec<_> = reject.iter().map(|r| json!({"item": r, "rationale": format!("{r} is out of scope here")})).collect();
    json!({"accepted": accept, "rejected": rejected, "revised": revised}).to_string()
}

pub fn decision(accept: &[&str], reject: &[&str], revised: serde_json::Value) -> ScriptEntry {
    ScriptEntry::reply(decision_text(accept, reject, revised))
}

pub fn shared(nb: Notebook) -> SharedNotebook {
    Arc::new(RwLock::new(nb))
}

#[derive(Default)]
pub struct EventLog(pub Mutex<Vec<LoopEvent>>);

impl EventLog {
    pub fn sink(&self) -> impl Fn(LoopEvent) + Send + Sync + '_ {
        move |e| self.0.lock().unwrap().push(e)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.lock().unwrap().iter().map(LoopEvent::name).collect()
    }

    pub fn events(&self) -> Vec<LoopEvent> {
        self.0.lock().unwrap().clone()
    }
}

/// Runner that fails any source containing `raise` and succeeds otherwise.
#[derive(Default)]
pub struct FakeRunner {
    pub executions: AtomicU32,
    pub interrupts: AtomicU32,
}

#[async_trait]
impl CodeRunner for FakeRunner {
    async fn execute(&self, source: &str, _timeout_ms: u64) -> Result<ExecutionResult, ExecutorError> {
        self.executions.fetch_add(1, Ordering::SeqCst);
        if source.contains("raise") {
            return Ok(ExecutionResult {
                status: ExecStatus::Error,
                outputs: vec![Output::Error {
                    ename: "KeyError".into(),
                    evalue: "'Gender Pay Gap'".into(),
                    traceback: vec![],
                }],
                duration_ms: 1,
            });
        }
        Ok(ExecutionResult { status: ExecStatus::Ok, outputs: vec![Output::stdout("ok\n")], duration_ms: 1 })
    }

    async fn interrupt(&self) -> Result<(), ExecutorError> {
        self.interrupts.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    async fn reset(&self) -> Result<(), ExecutorError> {
        Ok(())
    }
}
