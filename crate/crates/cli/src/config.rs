//! `capy.toml` handling.
//!
//! The file mirrors the session settings, plus a few CLI-only keys:
//!
//! ```toml
//! model = "openai:gpt-4o"      # every role
//! prompts_dir = "prompts"
//! eda_mode = "multi"
//! max_rounds = 2
//!
//! [budget]
//! max_cells = 12
//!
//! [model_by_role.critic_code]
//! provider = "anthropic_compatible"
//! model_name = "claude-sonnet-4-5"
//! ```

use std::path::{Path, PathBuf};

use capy_core::gateway::ModelRef;
use capy_core::prompts::PromptAssets;
use capy_core::roles::Mode;
use capy_core::settings::{parse_model_spec, Settings};

pub const DEFAULT_CONFIG: &str = "capy.toml";

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub settings: Settings,
    pub prompts_dir: Option<PathBuf>,
}

/// Command-line overrides, applied last.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub multi: bool,
    pub max_rounds: Option<u32>,
    pub stub: Option<PathBuf>,
    pub model: Option<String>,
}

impl CliConfig {
    /// Defaults, then the config file, then `CAPY_MODEL` and
    /// `CAPY_PROMPTS_DIR`, then flags.
    pub fn load(path: Option<&Path>, overrides: &Overrides, env_model: Option<String>, env_prompts: Option<PathBuf>) -> Result<Self, String> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None if Path::new(DEFAULT_CONFIG).is_file() => Self::from_file(Path::new(DEFAULT_CONFIG))?,
            None => CliConfig { settings: Settings::default(), prompts_dir: None },
        };
        if let Some(spec) = env_model {
            config.set_model(parse_model_spec(&spec)?);
        }
        if env_prompts.is_some() {
            config.prompts_dir = env_prompts;
        }
        if let Some(spec) = &overrides.model {
            config.set_model(parse_model_spec(spec)?);
        }
        if let Some(stub) = &overrides.stub {
            config.set_model(ModelRef::scripted(stub));
        }
        if overrides.multi {
            config.settings.eda_mode = Mode::Multi;
            config.settings.story_mode = Mode::Multi;
        }
        if let Some(n) = overrides.max_rounds {
            config.settings.max_rounds = n;
        }
        config.settings.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let take_str = |table: &mut toml::Table, key: &str| -> Result<Option<String>, String> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s)),
                Some(other) => Err(format!("{key} must be a string, got {}", other.type_str())),
            }
        };
        let model = take_str(&mut table, "model")?;
        let prompts_dir = take_str(&mut table, "prompts_dir")?.map(PathBuf::from);
        let explicit_roles = table.contains_key("model_by_role");
        let mut settings: Settings = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
        if let Some(spec) = model {
            let model = parse_model_spec(&spec)?;
            // Explicit per-role entries win over the blanket model.
            let mut merged = Settings::with_model(model).model_by_role;
            if explicit_roles {
                merged.extend(std::mem::take(&mut settings.model_by_role));
            }
            settings.model_by_role = merged;
        }
        Ok(CliConfig { settings, prompts_dir })
    }

    fn set_model(&mut self, model: ModelRef) {
        self.settings.model_by_role = Settings::with_model(model).model_by_role;
    }

    pub fn prompts(&self) -> Result<PromptAssets, String> {
        match &self.prompts_dir {
            Some(dir) => PromptAssets::with_overrides(dir).map_err(|e| format!("{}: {e}", dir.display())),
            None => Ok(PromptAssets::default()),
        }
    }
}
