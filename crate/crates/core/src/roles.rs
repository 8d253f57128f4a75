use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the three design-space dimensions that annotations and critic
/// coverage are organized around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Semantic,
    Rhetorical,
    Pragmatic,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Semantic, Dimension::Rhetorical, Dimension::Pragmatic];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Semantic => "semantic",
            Dimension::Rhetorical => "rhetorical",
            Dimension::Pragmatic => "pragmatic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Agent roles across the EDA and storytelling rosters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    InitialRespondent,
    Refiner,
    CriticPlan,
    CriticCode,
    CriticVisualization,
    CriticInterpretation,
    CriticSemantic,
    CriticRhetorical,
    CriticPragmatic,
}

impl AgentRole {
    pub const ALL: [AgentRole; 9] = [
        AgentRole::InitialRespondent,
        AgentRole::Refiner,
        AgentRole::CriticPlan,
        AgentRole::CriticCode,
        AgentRole::CriticVisualization,
        AgentRole::CriticInterpretation,
        AgentRole::CriticSemantic,
        AgentRole::CriticRhetorical,
        AgentRole::CriticPragmatic,
    ];

    pub const EDA_CRITICS: [AgentRole; 4] = [
        AgentRole::CriticPlan,
        AgentRole::CriticCode,
        AgentRole::CriticVisualization,
        AgentRole::CriticInterpretation,
    ];

    pub const STORY_CRITICS: [AgentRole; 3] =
        [AgentRole::CriticSemantic, AgentRole::CriticRhetorical, AgentRole::CriticPragmatic];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::InitialRespondent => "initial_respondent",
            AgentRole::Refiner => "refiner",
            AgentRole::CriticPlan => "critic_plan",
            AgentRole::CriticCode => "critic_code",
            AgentRole::CriticVisualization => "critic_visualization",
            AgentRole::CriticInterpretation => "critic_interpretation",
            AgentRole::CriticSemantic => "critic_semantic",
            AgentRole::CriticRhetorical => "critic_rhetorical",
            AgentRole::CriticPragmatic => "critic_pragmatic",
        }
    }

    pub fn is_critic(self) -> bool {
        !matches!(self, AgentRole::InitialRespondent | AgentRole::Refiner)
    }

    /// Dimensions this role is responsible for.
    pub fn dimensions(self) -> &'static [Dimension] {
        use Dimension::*;
        match self {
            AgentRole::InitialRespondent | AgentRole::Refiner | AgentRole::CriticInterpretation => {
                &[Semantic, Rhetorical, Pragmatic]
            }
            AgentRole::CriticPlan => &[Rhetorical],
            AgentRole::CriticCode | AgentRole::CriticVisualization => &[Semantic, Rhetorical],
            AgentRole::CriticSemantic => &[Semantic],
            AgentRole::CriticRhetorical => &[Rhetorical],
            AgentRole::CriticPragmatic => &[Pragmatic],
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Single- or multi-agent operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Single,
    Multi,
}
