//! Prompt templates with `{{name}}` placeholders.
//!
//! The bundled templates live in `assets/prompts`. A directory of `.txt`
//! files with the same names can override any of them.

use std::collections::HashMap;
use std::path::Path;

use crate::roles::AgentRole;

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../assets/prompts/", $name, ".txt")))),*]
    };
}

const BUNDLED: &[(&str, &str)] = bundled!(
    "eda_system",
    "eda_turn",
    "critic_frame",
    "critic_review",
    "critic_plan",
    "critic_code",
    "critic_visualization",
    "critic_interpretation",
    "critic_semantic",
    "critic_rhetorical",
    "critic_pragmatic",
    "refiner",
    "refiner_review",
    "clarify",
    "insights",
    "resolve",
    "story_system",
    "story_generate",
    "story_feedback",
);

#[derive(Debug, Clone)]
pub struct PromptAssets {
    templates: HashMap<String, String>,
}

impl Default for PromptAssets {
    fn default() -> Self {
        PromptAssets {
            templates: BUNDLED.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl PromptAssets {
    /// Bundled templates, overridden by any `<name>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut assets = Self::default();
        for (name, _) in BUNDLED {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                assets.templates.insert(name.to_string(), std::fs::read_to_string(path)?);
            }
        }
        Ok(assets)
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates.get(name).map(String::as_str).unwrap_or_else(|| panic!("unknown prompt template {name}"))
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        render(self.get(name), vars)
    }

    /// Focus text for a critic role.
    pub fn critic_guidance(&self, role: AgentRole) -> &str {
        self.get(role.as_str())
    }
}

/// Substitutes `{{name}}` placeholders in one pass. Substituted text is not
/// rescanned; unknown placeholders are left as written.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let name = after[..close].trim();
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => out.push_str(&rest[open..open + 2 + close + 2]),
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
