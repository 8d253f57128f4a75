//! Session settings shared by the service and the CLI.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critique::ProtocolConfig;
use crate::eda::{EdaConfig, LoopBudget};
use crate::gateway::{Gateway, GatewayError, ModelRef, ProviderEnv, ProviderKind};
use crate::roles::{AgentRole, Mode};
use crate::story::StoryConfig;

pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub eda_mode: Mode,
    pub story_mode: Mode,
    pub model_by_role: BTreeMap<AgentRole, ModelRef>,
    pub max_rounds: u32,
    pub budget: LoopBudget,
    /// Attach the latest figure to the visualization critic's prompt.
    pub critic_images: bool,
    pub max_annotations_per_block: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::with_model(ModelRef::openai(DEFAULT_MODEL))
    }
}

impl Settings {
    /// Defaults with every role served by `model`.
    pub fn with_model(model: ModelRef) -> Self {
        Settings {
            eda_mode: Mode::Single,
            story_mode: Mode::Single,
            model_by_role: AgentRole::ALL.iter().map(|&r| (r, model.clone())).collect(),
            max_rounds: 2,
            budget: LoopBudget::default(),
            critic_images: false,
            max_annotations_per_block: 2,
        }
    }

    /// Roles the configured modes will call.
    pub fn required_roles(&self) -> Vec<AgentRole> {
        let mut roles = vec![AgentRole::InitialRespondent];
        if self.eda_mode == Mode::Multi {
            roles.push(AgentRole::Refiner);
            roles.extend(AgentRole::EDA_CRITICS);
        }
        if self.story_mode == Mode::Multi {
            roles.push(AgentRole::Refiner);
            roles.extend(AgentRole::STORY_CRITICS);
        }
        roles.sort();
        roles.dedup();
        roles
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds < 1 {
            return Err("max_rounds must be at least 1".into());
        }
        if self.max_annotations_per_block < 1 {
            return Err("max_annotations_per_block must be at least 1".into());
        }
        self.budget.validate()?;
        for (role, model) in &self.model_by_role {
            model.validate().map_err(|e| format!("model for {role}: {e}"))?;
        }
        for role in self.required_roles() {
            if !self.model_by_role.contains_key(&role) {
                return Err(format!("no model configured for {role}"));
            }
        }
        ProtocolConfig::eda(self.max_rounds).validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn gateway(&self, env: &ProviderEnv) -> Result<Gateway, GatewayError> {
        Gateway::from_models(&self.model_by_role, env)
    }

    pub fn eda_config(&self) -> EdaConfig {
        EdaConfig {
            mode: self.eda_mode,
            budget: self.budget,
            max_rounds: self.max_rounds,
            attach_images: self.critic_images,
        }
    }

    pub fn story_config(&self) -> StoryConfig {
        StoryConfig {
            mode: self.story_mode,
            max_rounds: self.max_rounds,
            max_annotations_per_block: self.max_annotations_per_block,
            context_budget: self.budget.context_budget,
        }
    }
}

/// Parses `provider:model`, e.g. `openai:gpt-4o`, `anthropic:claude-sonnet-4-5`
/// or `scripted:path/to/transcript.json`.
pub fn parse_model_spec(spec: &str) -> Result<ModelRef, String> {
    let (provider, rest) = spec.split_once(':').ok_or_else(|| format!("expected provider:model, got {spec:?}"))?;
    let model = match provider {
        "openai" => ModelRef::openai(rest),
        "anthropic" => ModelRef::anthropic(rest),
        "scripted" => ModelRef::scripted(rest),
        other => return Err(format!("unknown provider {other:?} (openai, anthropic, scripted)")),
    };
    model.validate()?;
    if model.provider == ProviderKind::Scripted && rest.is_empty() {
        return Err("scripted provider requires a transcript path".into());
    }
    Ok(model)
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers see either the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
