//! The agentic EDA loop.
//!
//! Each model turn becomes exactly one appended cell. Code cells are run
//! and their result is fed into the next prompt. The loop ends when the
//! model sets `done`, when it is stopped, or when a budget runs out.

use std::sync::{Arc, RwLock};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tokio_util::sync::CancellationToken;

use crate::critique::{run_protocol, CritiqueTranscript, ProtocolConfig, ProtocolError, ProtocolInput};
use crate::executor::{CodeRunner, ExecStatus, ExecutionResult, DEFAULT_TIMEOUT_MS};
use crate::gateway::{AgentEnvelope, ChatMessage, Gateway, GatewayError, ImageAttachment};
use crate::notebook::{render_context, CellKind, Notebook, Provenance};
use crate::prompts::PromptAssets;
use crate::roles::{AgentRole, Mode};

/// Notebook shared between a run and concurrent readers.
pub type SharedNotebook = Arc<RwLock<Notebook>>;

pub const DEFAULT_CONTEXT_BUDGET: usize = 24_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopBudget {
    pub max_cells: u32,
    pub max_consecutive_error_repairs: u32,
    pub context_budget: usize,
    pub exec_timeout_ms: u64,
}

impl Default for LoopBudget {
    fn default() -> Self {
        LoopBudget {
            max_cells: 12,
            max_consecutive_error_repairs: 3,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            exec_timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

impl LoopBudget {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_cells == 0 || self.max_consecutive_error_repairs == 0 || self.context_budget == 0 || self.exec_timeout_ms == 0 {
            return Err("loop budget fields must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    BudgetExhausted,
    RepairExhausted,
    EnvelopeParseFailed,
    WorkerDead,
    GatewayError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoopEvent {
    CellAppended {
        cell_id: String,
        cell_kind: CellKind,
        turn: u32,
        #[serde(default)]
        degraded: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        waves: Option<u32>,
    },
    ExecutionStarted {
        cell_id: String,
    },
    ExecutionFinished {
        cell_id: String,
        status: ExecStatus,
        duration_ms: u64,
    },
    RepairAttempt {
        cell_id: String,
        attempt: u32,
        error: String,
    },
    LoopDone {
        cells: u32,
    },
    LoopStopped {
        cells: u32,
    },
    LoopFailed {
        reason: FailureReason,
        detail: String,
    },
}

impl LoopEvent {
    pub fn name(&self) -> &'static str {
        match self {
            LoopEvent::CellAppended { .. } => "cell_appended",
            LoopEvent::ExecutionStarted { .. } => "execution_started",
            LoopEvent::ExecutionFinished { .. } => "execution_finished",
            LoopEvent::RepairAttempt { .. } => "repair_attempt",
            LoopEvent::LoopDone { .. } => "loop_done",
            LoopEvent::LoopStopped { .. } => "loop_stopped",
            LoopEvent::LoopFailed { .. } => "loop_failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, LoopEvent::LoopDone { .. } | LoopEvent::LoopStopped { .. } | LoopEvent::LoopFailed { .. })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub terminal: LoopEvent,
    pub appended: Vec<String>,
    pub executions: u32,
    pub transcripts: Vec<CritiqueTranscript>,
}

#[derive(Debug, Clone)]
pub struct EdaConfig {
    pub mode: Mode,
    pub budget: LoopBudget,
    pub max_rounds: u32,
    pub attach_images: bool,
}

impl Default for EdaConfig {
    fn default() -> Self {
        EdaConfig { mode: Mode::Single, budget: LoopBudget::default(), max_rounds: 2, attach_images: false }
    }
}

pub struct EdaAgent<'a> {
    pub gateway: &'a Gateway,
    pub runner: &'a dyn CodeRunner,
    pub prompts: &'a PromptAssets,
    pub config: EdaConfig,
}

impl EdaAgent<'_> {
    /// Runs one query to completion. `emit` receives every event in order;
    /// the last one is terminal. Cancelling `stop` interrupts any running
    /// cell and ends the loop at the next checkpoint.
    pub async fn run_query(
        &self,
        notebook: &SharedNotebook,
        query: &str,
        stop: &CancellationToken,
        emit: &(dyn Fn(LoopEvent) + Send + Sync),
    ) -> RunOutcome {
        let mut appended = Vec::new();
        let mut transcripts = Vec::new();
        let mut executions = 0;
        let budget = self.config.budget;
        let mut last_result = String::from("(nothing executed yet)");
        let mut consecutive_errors = 0u32;
        let mut turn = 0u32;

        let terminal = loop {
            let cells = appended.len() as u32;
            if stop.is_cancelled() {
                break LoopEvent::LoopStopped { cells };
            }
            if cells >= budget.max_cells {
                break LoopEvent::LoopFailed {
                    reason: FailureReason::BudgetExhausted,
                    detail: format!("reached max_cells = {}", budget.max_cells),
                };
            }
            turn += 1;

            let snapshot = notebook.read().unwrap().clone();
            let context = render_context(&snapshot, budget.context_budget);
            let user = self.prompts.render(
                "eda_turn",
                &[("query", query), ("notebook_context", &context), ("last_result", &last_result)],
            );
            let messages = vec![ChatMessage::system(self.prompts.get("eda_system")), ChatMessage::user(user.clone())];

            let (envelope, degraded, waves) = match self.next_envelope(messages, &user, &snapshot, turn).await {
                Ok((env, transcript)) => {
                    let degraded = transcript.as_ref().is_some_and(CritiqueTranscript::degraded);
                    let waves = transcript.as_ref().map(|t| t.wave_count);
                    transcripts.extend(transcript);
                    (env, degraded, waves)
                }
                Err(e) => {
                    let reason = match e {
                        GatewayError::Unparseable { .. } => FailureReason::EnvelopeParseFailed,
                        _ => FailureReason::GatewayError,
                    };
                    break LoopEvent::LoopFailed { reason, detail: e.to_string() };
                }
            };
            if stop.is_cancelled() {
                break LoopEvent::LoopStopped { cells };
            }

            let cell_id = notebook.write().unwrap().append_cell(envelope.cell_kind, envelope.content.clone(), Provenance::Assistant);
            appended.push(cell_id.clone());
            emit(LoopEvent::CellAppended { cell_id: cell_id.clone(), cell_kind: envelope.cell_kind, turn, degraded, waves });

            let mut failed_execution = None;
            if envelope.cell_kind == CellKind::Code {
                emit(LoopEvent::ExecutionStarted { cell_id: cell_id.clone() });
                executions += 1;
                let result = match self.execute(&envelope.content, stop).await {
                    Ok(result) => result,
                    Err(e) => break LoopEvent::LoopFailed { reason: FailureReason::WorkerDead, detail: e.to_string() },
                };
                {
                    let mut nb = notebook.write().unwrap();
                    let count = nb.max_execution_count() + 1;
                    let cell = nb.cell_mut(&cell_id).expect("cell just appended");
                    cell.outputs = result.outputs.clone();
                    cell.execution_count = Some(count);
                }
                emit(LoopEvent::ExecutionFinished { cell_id: cell_id.clone(), status: result.status, duration_ms: result.duration_ms });
                if stop.is_cancelled() {
                    break LoopEvent::LoopStopped { cells: appended.len() as u32 };
                }
                last_result = result.summary();
                if result.status == ExecStatus::Ok {
                    consecutive_errors = 0;
                } else {
                    failed_execution = Some(describe_failure(&result));
                }
            } else {
                last_result = "(the previous step was a markdown cell; nothing was executed)".into();
            }

            if envelope.done {
                break LoopEvent::LoopDone { cells: appended.len() as u32 };
            }
            if let Some(error) = failed_execution {
                consecutive_errors += 1;
                if consecutive_errors > budget.max_consecutive_error_repairs {
                    break LoopEvent::LoopFailed {
                        reason: FailureReason::RepairExhausted,
                        detail: format!("{} consecutive failed executions; last: {error}", consecutive_errors),
                    };
                }
                emit(LoopEvent::RepairAttempt { cell_id, attempt: consecutive_errors, error });
            }
        };

        emit(terminal.clone());
        RunOutcome { terminal, appended, executions, transcripts }
    }

    async fn next_envelope(
        &self,
        messages: Vec<ChatMessage>,
        context: &str,
        snapshot: &Notebook,
        turn: u32,
    ) -> Result<(AgentEnvelope, Option<CritiqueTranscript>), GatewayError> {
        let purpose = format!("eda turn {turn}");
        match self.config.mode {
            Mode::Single => Ok((self.gateway.request_envelope(AgentRole::InitialRespondent, &purpose, messages).await?, None)),
            Mode::Multi => {
                let mut config = ProtocolConfig::eda(self.config.max_rounds);
                config.attach_images = self.config.attach_images;
                let image = snapshot.latest_png().and_then(|b64| {
                    let data = base64::engine::general_purpose::STANDARD.decode(b64.trim()).ok()?;
                    Some(ImageAttachment { mime_type: "image/png".into(), data })
                });
                let input = ProtocolInput { initial_messages: messages, context, image };
                match run_protocol::<AgentEnvelope>(self.gateway, self.prompts, &config, input).await {
                    Ok(outcome) => Ok((outcome.response, Some(outcome.transcript))),
                    Err(ProtocolError::Initial(e)) => Err(e),
                    Err(ProtocolError::InvalidConfig(msg)) => Err(GatewayError::Config(msg)),
                }
            }
        }
    }

    async fn execute(&self, source: &str, stop: &CancellationToken) -> Result<ExecutionResult, crate::executor::ExecutorError> {
        let run = self.runner.execute(source, self.config.budget.exec_timeout_ms);
        tokio::pin!(run);
        tokio::select! {
            result = &mut run => result,
            _ = stop.cancelled() => {
                if let Err(e) = self.runner.interrupt().await {
                    tracing::warn!("interrupt failed: {e}");
                }
                run.await
            }
        }
    }
}

fn describe_failure(result: &ExecutionResult) -> String {
    match result.error_output() {
        Some((name, value)) => format!("{name}: {value}"),
        None => format!("execution {:?}", result.status).to_lowercase(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_names_match_wire_tags() {
        let events = [
            LoopEvent::LoopDone { cells: 1 },
            LoopEvent::LoopFailed { reason: FailureReason::RepairExhausted, detail: String::new() },
            LoopEvent::RepairAttempt { cell_id: "c".into(), attempt: 1, error: "e".into() },
        ];
        for e in events {
            let v = serde_json::to_value(&e).unwrap();
            assert_eq!(v["kind"], e.name());
        }
    }

    #[test]
    fn budget_fields_must_be_positive() {
        assert!(LoopBudget::default().validate().is_ok());
        assert!(LoopBudget { max_cells: 0, ..LoopBudget::default() }.validate().is_err());
    }
}
