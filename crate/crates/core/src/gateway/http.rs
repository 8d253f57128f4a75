//! Chat-completion clients for OpenAI- and Anthropic-compatible endpoints.

use async_trait::async_trait;
use base64::Engine as _;
use serde_json::{json, Value};

use super::{ChatMessage, ChatProvider, ChatRole, GatewayError};

const ANTHROPIC_VERSION: &str = "2023-06-01";
const ANTHROPIC_MAX_TOKENS: u32 = 4096;

/// Endpoint and credentials for the HTTP providers.
#[derive(Debug, Clone, Default)]
pub struct ProviderEnv {
    pub openai_base: Option<String>,
    pub openai_key: Option<String>,
    pub anthropic_base: Option<String>,
    pub anthropic_key: Option<String>,
}

impl ProviderEnv {
    /// Reads `CAPY_OPENAI_BASE`, `CAPY_OPENAI_KEY`, `CAPY_ANTHROPIC_BASE`
    /// and `CAPY_ANTHROPIC_KEY`.
    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        ProviderEnv {
            openai_base: var("CAPY_OPENAI_BASE"),
            openai_key: var("CAPY_OPENAI_KEY"),
            anthropic_base: var("CAPY_ANTHROPIC_BASE"),
            anthropic_key: var("CAPY_ANTHROPIC_KEY"),
        }
    }
}

fn classify(err: reqwest::Error) -> GatewayError {
    GatewayError::Transport(err.to_string())
}

async fn read_json(response: reqwest::Response) -> Result<Value, GatewayError> {
    let status = response.status();
    let body = response.text().await.map_err(classify)?;
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(GatewayError::Transport(format!("HTTP {status}: {body}")));
    }
    if !status.is_success() {
        return Err(GatewayError::Provider(format!("HTTP {status}: {body}")));
    }
    serde_json::from_str(&body)
        .map_err(|e| GatewayError::Provider(format!("response is not JSON: {e}")))
}

fn data_url(mime: &str, bytes: &[u8]) -> String {
    format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes))
}

#[derive(Debug, Clone)]
pub struct OpenAiCompatible {
    client: reqwest::Client,
    base: String,
    key: Option<String>,
}

impl OpenAiCompatible {
    pub fn new(base: impl Into<String>, key: Option<String>) -> Self {
        OpenAiCompatible { client: reqwest::Client::new(), base: base.into(), key }
    }

    fn message_json(message: &ChatMessage) -> Value {
        let role = message.role.as_str();
        if message.images.is_empty() {
            return json!({"role": role, "content": message.content});
        }
        let mut parts = vec![json!({"type": "text", "text": message.content})];
        for image in &message.images {
            parts.push(json!({
                "type": "image_url",
                "image_url": {"url": data_url(&image.mime_type, &image.data)}
            }));
        }
        json!({"role": role, "content": parts})
    }
}

#[async_trait]
impl ChatProvider for OpenAiCompatible {
    async fn complete(&self, model: &str, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let body = json!({
            "model": model,
            "messages": messages.iter().map(Self::message_json).collect::<Vec<_>>(),
        });
        let url = format!("{}/chat/completions", self.base.trim_end_matches('/'));
        let mut request = self.client.post(url).json(&body);
        if let Some(key) = &self.key {
            request = request.bearer_auth(key);
        }
        let value = read_json(request.send().await.map_err(classify)?).await?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Provider("missing choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone)]
pub struct AnthropicCompatible {
    client: reqwest::Client,
    base: String,
    key: Option<String>,
}

impl AnthropicCompatible {
    pub fn new(base: impl Into<String>, key: Option<String>) -> Self {
        AnthropicCompatible { client: reqwest::Client::new(), base: base.into(), key }
    }

    fn content_json(message: &ChatMessage) -> Value {
        let mut parts: Vec<Value> = message
            .images
            .iter()
            .map(|image| {
                json!({
                    "type": "image",
                    "source": {
                        "type": "base64",
                        "media_type": image.mime_type,
                        "data": base64::engine::general_purpose::STANDARD.encode(&image.data),
                    }
                })
            })
            .collect();
        parts.push(json!({"type": "text", "text": message.content}));
        Value::Array(parts)
    }
}

#[async_trait]
impl ChatProvider for AnthropicCompatible {
    async fn complete(&self, model: &str, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        let system: Vec<&str> = messages
            .iter()
            .filter(|m| m.role == ChatRole::System)
            .map(|m| m.content.as_str())
            .collect();
        let turns: Vec<Value> = messages
            .iter()
            .filter(|m| m.role != ChatRole::System)
            .map(|m| json!({"role": m.role.as_str(), "content": Self::content_json(m)}))
            .collect();
        let mut body = json!({
            "model": model,
            "max_tokens": ANTHROPIC_MAX_TOKENS,
            "messages": turns,
        });
        if !system.is_empty() {
            body["system"] = Value::String(system.join("\n\n"));
        }
        let url = format!("{}/v1/messages", self.base.trim_end_matches('/'));
        let mut request = self
            .client
            .post(url)
            .header("anthropic-version", ANTHROPIC_VERSION)
            .json(&body);
        if let Some(key) = &self.key {
            request = request.header("x-api-key", key);
        }
        let value = read_json(request.send().await.map_err(classify)?).await?;
        let text: String = value["content"]
            .as_array()
            .ok_or_else(|| GatewayError::Provider("missing content array".into()))?
            .iter()
            .filter(|block| block["type"] == "text")
            .filter_map(|block| block["text"].as_str())
            .collect();
        Ok(text)
    }
}
