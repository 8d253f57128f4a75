//! Provider-agnostic chat completion with a per-session call ledger,
//! structured-reply parsing with a single repair re-ask, and a scripted
//! provider for deterministic runs.

mod envelope;
mod http;
mod scripted;
pub mod structured;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use envelope::{parse_envelope, AgentEnvelope, EnvelopeParseError, ENVELOPE_SCHEMA};
pub use http::{AnthropicCompatible, OpenAiCompatible, ProviderEnv};
pub use scripted::{ScriptEntry, ScriptedProvider};

use crate::roles::AgentRole;

const TRANSPORT_RETRIES: u32 = 2;
const RETRY_BACKOFF: Duration = Duration::from_millis(250);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("scripted transcript exhausted")]
    StubExhausted,
    #[error("scripted entry {entry} expected the prompt to contain {expected:?}")]
    StubAssertion { entry: usize, expected: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("no model configured for role {0}")]
    NoModel(AgentRole),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("unparseable {what} after repair: {detail}")]
    Unparseable { what: &'static str, detail: String },
}

impl GatewayError {
    /// Network-class failures. `StubExhausted` belongs to this class but is
    /// never retried.
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::StubExhausted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageAttachment {
    pub mime_type: String,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
    pub images: Vec<ImageAttachment>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::System, content: content.into(), images: Vec::new() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::User, content: content.into(), images: Vec::new() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: ChatRole::Assistant, content: content.into(), images: Vec::new() }
    }

    pub fn with_image(mut self, image: ImageAttachment) -> Self {
        self.images.push(image);
        self
    }

    fn is_empty(&self) -> bool {
        self.content.is_empty() && self.images.is_empty()
    }
}

/// All message contents joined; what scripted expectations are checked against.
pub fn prompt_text(messages: &[ChatMessage]) -> String {
    messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    OpenaiCompatible,
    AnthropicCompatible,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub provider: ProviderKind,
    pub model_name: String,
    /// Transcript file; required by the scripted provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
}

impl ModelRef {
    pub fn openai(model_name: impl Into<String>) -> Self {
        ModelRef { provider: ProviderKind::OpenaiCompatible, model_name: model_name.into(), transcript: None }
    }

    pub fn anthropic(model_name: impl Into<String>) -> Self {
        ModelRef { provider: ProviderKind::AnthropicCompatible, model_name: model_name.into(), transcript: None }
    }

    pub fn scripted(transcript: impl Into<PathBuf>) -> Self {
        ModelRef {
            provider: ProviderKind::Scripted,
            model_name: "scripted".into(),
            transcript: Some(transcript.into()),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.provider == ProviderKind::Scripted && self.transcript.is_none() {
            return Err("scripted provider requires a transcript".into());
        }
        if self.model_name.trim().is_empty() {
            return Err("model_name is empty".into());
        }
        Ok(())
    }
}

#[async_trait]
pub trait ChatProvider: Send + Sync {
    async fn complete(&self, model: &str, messages: &[ChatMessage]) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: AgentRole,
    pub purpose: String,
    pub model: String,
    pub wall_ms: u64,
}

/// Append-only record of successful completions, shared by clones.
#[derive(Debug, Clone, Default)]
pub struct CallLedger(Arc<Mutex<Vec<CallRecord>>>);

impl CallLedger {
    pub fn count(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn count_role(&self, role: AgentRole) -> usize {
        self.0.lock().unwrap().iter().filter(|r| r.role == role).count()
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.0.lock().unwrap().clone()
    }

    fn push(&self, record: CallRecord) {
        self.0.lock().unwrap().push(record);
    }
}

#[derive(Clone)]
struct Route {
    model: String,
    provider: Arc<dyn ChatProvider>,
}

/// Routes each agent role to a provider and model.
#[derive(Clone, Default)]
pub struct Gateway {
    routes: HashMap<AgentRole, Route>,
    ledger: CallLedger,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut roles: Vec<_> = self.routes.iter().map(|(r, route)| (r.as_str(), route.model.as_str())).collect();
        roles.sort();
        f.debug_struct("Gateway").field("routes", &roles).field("calls", &self.ledger.count()).finish()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every role served by the same provider.
    pub fn uniform(provider: Arc<dyn ChatProvider>, model: &str) -> Self {
        let mut gateway = Gateway::new();
        for role in AgentRole::ALL {
            gateway = gateway.route(role, model, provider.clone());
        }
        gateway
    }

    /// Every role served by one scripted transcript.
    pub fn scripted(entries: Vec<ScriptEntry>) -> Self {
        Self::uniform(Arc::new(ScriptedProvider::new(entries)), "scripted")
    }

    pub fn route(mut self, role: AgentRole, model: &str, provider: Arc<dyn ChatProvider>) -> Self {
        self.routes.insert(role, Route { model: model.to_string(), provider });
        self
    }

    /// Builds providers for a role → model map. Roles naming the same
    /// transcript share one scripted provider, so its entries are consumed
    /// in global call order.
    pub fn from_models(
        models: &BTreeMap<AgentRole, ModelRef>,
        env: &ProviderEnv,
    ) -> Result<Self, GatewayError> {
        let mut transcripts: HashMap<PathBuf, Arc<dyn ChatProvider>> = HashMap::new();
        let mut gateway = Gateway::new();
        for (&role, model) in models {
            model.validate().map_err(|e| GatewayError::Config(format!("{role}: {e}")))?;
            let provider: Arc<dyn ChatProvider> = match model.provider {
                ProviderKind::Scripted => {
                    let path = model.transcript.clone().unwrap();
                    match transcripts.get(&path) {
                        Some(p) => p.clone(),
                        None => {
                            let p: Arc<dyn ChatProvider> = Arc::new(ScriptedProvider::from_path(&path)?);
                            transcripts.insert(path, p.clone());
                            p
                        }
                    }
                }
                ProviderKind::OpenaiCompatible => Arc::new(OpenAiCompatible::new(
                    env.openai_base.clone().unwrap_or_else(|| "https://api.openai.com/v1".into()),
                    env.openai_key.clone(),
                )),
                ProviderKind::AnthropicCompatible => Arc::new(AnthropicCompatible::new(
                    env.anthropic_base.clone().unwrap_or_else(|| "https://api.anthropic.com".into()),
                    env.anthropic_key.clone(),
                )),
            };
            gateway = gateway.route(role, &model.model_name, provider);
        }
        Ok(gateway)
    }

    pub fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    pub fn has_role(&self, role: AgentRole) -> bool {
        self.routes.contains_key(&role)
    }

    /// One completion, retrying transport failures up to twice.
    pub async fn complete(
        &self,
        role: AgentRole,
        purpose: &str,
        messages: &[ChatMessage],
    ) -> Result<String, GatewayError> {
        if messages.is_empty() || messages.iter().all(ChatMessage::is_empty) {
            return Err(GatewayError::Config("empty message list".into()));
        }
        let route = self.routes.get(&role).ok_or(GatewayError::NoModel(role))?;
        let mut attempt = 0;
        loop {
            let started = Instant::now();
            match route.provider.complete(&route.model, messages).await {
                Ok(text) => {
                    self.ledger.push(CallRecord {
                        role,
                        purpose: purpose.to_string(),
                        model: route.model.clone(),
                        wall_ms: started.elapsed().as_millis() as u64,
                    });
                    return Ok(text);
                }
                Err(GatewayError::Transport(msg)) if attempt < TRANSPORT_RETRIES => {
                    tracing::warn!(%role, attempt, "transport failure, retrying: {msg}");
                    tokio::time::sleep(RETRY_BACKOFF * 2u32.pow(attempt)).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Completion parsed by `parse`; on a parse failure, exactly one repair
    /// re-ask restating `schema` is issued. At most two completions.
    pub async fn request<T, F>(
        &self,
        role: AgentRole,
        purpose: &str,
        what: &'static str,
        schema: &str,
        mut messages: Vec<ChatMessage>,
        parse: F,
    ) -> Result<T, GatewayError>
    where
        F: Fn(&str) -> Result<T, String>,
    {
        let raw = self.complete(role, purpose, &messages).await?;
        let first_err = match parse(&raw) {
            Ok(value) => return Ok(value),
            Err(e) => e,
        };
        tracing::debug!(%role, what, "reply rejected, issuing repair: {first_err}");
        messages.push(ChatMessage::assistant(raw));
        messages.push(ChatMessage::system(repair_message(what, schema, &first_err)));
        let raw = self.complete(role, purpose, &messages).await?;
        parse(&raw).map_err(|detail| GatewayError::Unparseable { what, detail })
    }

    pub async fn request_envelope(
        &self,
        role: AgentRole,
        purpose: &str,
        messages: Vec<ChatMessage>,
    ) -> Result<AgentEnvelope, GatewayError> {
        self.request(role, purpose, "envelope", ENVELOPE_SCHEMA, messages, |raw| {
            parse_envelope(raw).map_err(|e| e.0)
        })
        .await
    }
}

fn repair_message(what: &str, schema: &str, error: &str) -> String {
    format!(
        "Your previous reply could not be used as a {what}: {error}.\n\
         Reply again with exactly one JSON object matching this schema and nothing else:\n{schema}"
    )
}
