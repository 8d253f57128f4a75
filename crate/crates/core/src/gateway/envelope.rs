use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::structured;
use crate::notebook::CellKind;

/// One model turn: the cell it should become and whether the query is done.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEnvelope {
    #[serde(rename = "type")]
    pub cell_kind: CellKind,
    pub content: String,
    #[serde(default)]
    pub done: bool,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("no recoverable envelope in model reply: {0}")]
pub struct EnvelopeParseError(pub String);

pub const ENVELOPE_SCHEMA: &str = r#"{"type": "code" | "markdown", "content": string, "done": boolean}"#;

impl AgentEnvelope {
    pub fn new(cell_kind: CellKind, content: impl Into<String>, done: bool) -> Self {
        AgentEnvelope { cell_kind, content: content.into(), done }
    }

    /// Canonical wire form.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if self.content.trim().is_empty() {
            return Err("envelope content is empty".into());
        }
        Ok(())
    }
}

/// Extracts the first JSON object in `raw` matching the envelope schema.
pub fn parse_envelope(raw: &str) -> Result<AgentEnvelope, EnvelopeParseError> {
    structured::extract(raw, AgentEnvelope::validate).map_err(EnvelopeParseError)
}
