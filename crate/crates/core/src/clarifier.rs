//! Per-cell clarification threads.
//!
//! A question about a cell is answered in a side thread anchored to that
//! cell. The notebook itself is only read.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Gateway, GatewayError};
use crate::notebook::{render_context, Notebook};
use crate::prompts::PromptAssets;
use crate::roles::AgentRole;

#[derive(Debug, Error)]
pub enum ClarifyError {
    #[error("unknown cell {0}")]
    UnknownCell(String),
    #[error("thread for deleted cell {0} is closed")]
    ThreadClosed(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarifyTurn {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClarifyThread {
    pub cell_id: String,
    pub turns: Vec<ClarifyTurn>,
    /// Set once the anchoring cell is gone.
    #[serde(default)]
    pub closed: bool,
}

impl ClarifyThread {
    pub fn new(cell_id: impl Into<String>) -> Self {
        ClarifyThread { cell_id: cell_id.into(), turns: Vec::new(), closed: false }
    }

    fn render_turns(&self) -> String {
        if self.turns.is_empty() {
            return "(none)".into();
        }
        let mut out = String::new();
        for (i, turn) in self.turns.iter().enumerate() {
            let _ = writeln!(out, "Q{}: {}\nA{}: {}", i + 1, turn.question, i + 1, turn.answer);
        }
        out
    }
}

/// Threads of one session, keyed by cell id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThreadStore {
    threads: BTreeMap<String, ClarifyThread>,
}

impl ThreadStore {
    pub fn get(&self, cell_id: &str) -> Option<&ClarifyThread> {
        self.threads.get(cell_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClarifyThread> {
        self.threads.values()
    }

    pub fn len(&self) -> usize {
        self.threads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threads.is_empty()
    }

    /// Closes threads whose cell no longer exists in `nb`.
    pub fn sync_with(&mut self, nb: &Notebook) {
        for thread in self.threads.values_mut() {
            if nb.cell(&thread.cell_id).is_none() {
                thread.closed = true;
            }
        }
    }

    /// Snapshot of the thread a new question on `cell_id` would extend.
    pub fn open_thread(&mut self, nb: &Notebook, cell_id: &str) -> Result<ClarifyThread, ClarifyError> {
        self.sync_with(nb);
        match self.threads.get(cell_id) {
            Some(t) if t.closed => Err(ClarifyError::ThreadClosed(cell_id.to_string())),
            Some(t) => Ok(t.clone()),
            None if nb.cell(cell_id).is_some() => Ok(ClarifyThread::new(cell_id)),
            None => Err(ClarifyError::UnknownCell(cell_id.to_string())),
        }
    }

    pub fn append(&mut self, cell_id: &str, turn: ClarifyTurn) -> &ClarifyThread {
        let thread = self.threads.entry(cell_id.to_string()).or_insert_with(|| ClarifyThread::new(cell_id));
        thread.turns.push(turn);
        thread
    }

    /// Asks and records in one step.
    pub async fn ask(
        &mut self,
        clarifier: &Clarifier<'_>,
        nb: &Notebook,
        cell_id: &str,
        question: &str,
    ) -> Result<String, ClarifyError> {
        let thread = self.open_thread(nb, cell_id)?;
        let turn = clarifier.ask(nb, &thread, question).await?;
        let answer = turn.answer.clone();
        self.append(cell_id, turn);
        Ok(answer)
    }
}

pub struct Clarifier<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptAssets,
    pub context_budget: usize,
}

impl Clarifier<'_> {
    pub fn messages(&self, nb: &Notebook, thread: &ClarifyThread, question: &str) -> Result<Vec<ChatMessage>, ClarifyError> {
        let cell = nb.cell(&thread.cell_id).ok_or_else(|| ClarifyError::UnknownCell(thread.cell_id.clone()))?;
        let mut selected = format!("[{} cell {}]\n{}", cell.kind.as_str(), cell.id, cell.source);
        let outputs = cell.output_text();
        if !outputs.is_empty() {
            let _ = write!(selected, "\n[output]\n{outputs}");
        }
        let prompt = self.prompts.render(
            "clarify",
            &[
                ("notebook_context", &render_context(nb, self.context_budget)),
                ("cell", &selected),
                ("thread", &thread.render_turns()),
                ("question", question),
            ],
        );
        Ok(vec![ChatMessage::user(prompt)])
    }

    /// Answers `question` in the context of `thread`. The caller records the
    /// returned turn.
    pub async fn ask(&self, nb: &Notebook, thread: &ClarifyThread, question: &str) -> Result<ClarifyTurn, ClarifyError> {
        if question.trim().is_empty() {
            return Err(ClarifyError::EmptyQuestion);
        }
        if thread.closed {
            return Err(ClarifyError::ThreadClosed(thread.cell_id.clone()));
        }
        let messages = self.messages(nb, thread, question)?;
        let answer = self.gateway.complete(AgentRole::InitialRespondent, "clarify", &messages).await?;
        Ok(ClarifyTurn { question: question.to_string(), answer: answer.trim().to_string() })
    }
}
