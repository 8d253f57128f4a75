//! Deterministic transcript-backed provider.
//!
//! A transcript is a JSON array of entries `{expect_substring?, reply,
//! delay_ms?}` consumed strictly in order. An entry with `expect_substring`
//! fails the call unless the outgoing prompt contains that text, which lets
//! tests pin down how prompts are assembled.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{prompt_text, ChatMessage, ChatProvider, GatewayError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_substring: Option<String>,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl ScriptEntry {
    pub fn reply(reply: impl Into<String>) -> Self {
        ScriptEntry { expect_substring: None, reply: reply.into(), delay_ms: None }
    }

    pub fn expecting(expect: impl Into<String>, reply: impl Into<String>) -> Self {
        ScriptEntry { expect_substring: Some(expect.into()), reply: reply.into(), delay_ms: None }
    }

    pub fn delayed(mut self, delay_ms: u64) -> Self {
        self.delay_ms = Some(delay_ms);
        self
    }
}

#[derive(Debug)]
pub struct ScriptedProvider {
    entries: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedProvider { entries, cursor: Mutex::new(0) }
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(text)
            .map_err(|e| GatewayError::Config(format!("invalid transcript: {e}")))?;
        Ok(Self::new(entries))
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Config(format!("cannot read transcript {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Entries not yet consumed.
    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.cursor.lock().unwrap()
    }

    fn next_entry(&self, prompt: &str) -> Result<ScriptEntry, GatewayError> {
        let mut cursor = self.cursor.lock().unwrap();
        let index = *cursor;
        let entry = self.entries.get(index).ok_or(GatewayError::StubExhausted)?;
        *cursor += 1;
        if let Some(expected) = &entry.expect_substring {
            if !prompt.contains(expected.as_str()) {
                return Err(GatewayError::StubAssertion {
                    entry: index,
                    expected: expected.clone(),
                });
            }
        }
        Ok(entry.clone())
    }
}

#[async_trait]
impl ChatProvider for ScriptedProvider {
    async fn complete(&self, _model: &str, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        // The entry is taken before the first await, so concurrent callers
        // polled in a fixed order consume entries in that order.
        let entry = self.next_entry(&prompt_text(messages))?;
        if let Some(ms) = entry.delay_ms {
            tokio::time::sleep(Duration::from_millis(ms)).await;
        }
        Ok(entry.reply)
    }
}
