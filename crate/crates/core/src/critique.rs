//! Critique-and-refine protocol.
//!
//! An initial respondent drafts a response; role-specialized critics review
//! it concurrently; if any critic is not ready, a refiner accepts or rejects
//! each critique item (with a rationale for every rejection) and revises the
//! draft. A discussion round is one critic wave plus, when consensus is
//! absent, one refiner wave. `max_rounds` bounds the number of refiner
//! waves, so a run takes at most `1 + 2 * max_rounds` waves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use futures::future::join_all;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{structured, AgentEnvelope, ChatMessage, Gateway, GatewayError, ImageAttachment, ENVELOPE_SCHEMA};
use crate::prompts::PromptAssets;
use crate::roles::{AgentRole, Dimension};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid protocol configuration: {0}")]
    InvalidConfig(String),
    #[error("initial respondent failed: {0}")]
    Initial(#[source] GatewayError),
}

/// A response the protocol can critique and revise.
pub trait Draft: Clone + Serialize + DeserializeOwned + Send + Sync {
    /// Name used in repair messages.
    const WHAT: &'static str;

    fn schema() -> &'static str;

    fn validate(&self) -> Result<(), String>;

    /// Text shown to critics and the refiner.
    fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("draft serializes")
    }

    /// Discriminant recorded when the refiner changes the response kind.
    fn kind_tag(&self) -> Option<String> {
        None
    }

    fn parse(raw: &str) -> Result<Self, String> {
        structured::extract(raw, Self::validate)
    }
}

impl Draft for AgentEnvelope {
    const WHAT: &'static str = "envelope";

    fn schema() -> &'static str {
        ENVELOPE_SCHEMA
    }

    fn validate(&self) -> Result<(), String> {
        AgentEnvelope::validate(self)
    }

    fn render(&self) -> String {
        format!("[{} cell, done={}]\n{}", self.cell_kind.as_str(), self.done, self.content)
    }

    fn kind_tag(&self) -> Option<String> {
        Some(self.cell_kind.as_str().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    EdaTurn,
    StoryDraft,
}

impl Task {
    pub fn critics(self) -> &'static [AgentRole] {
        match self {
            Task::EdaTurn => &AgentRole::EDA_CRITICS,
            Task::StoryDraft => &AgentRole::STORY_CRITICS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub task: Task,
    /// Full roster, including initial respondent and refiner.
    pub roles: Vec<AgentRole>,
    pub max_rounds: u32,
    /// Attach the latest figure to the visualization critic's prompt.
    #[serde(default)]
    pub attach_images: bool,
    /// Require every dimension to be covered by at least three roles.
    #[serde(default)]
    pub strict: bool,
}

impl ProtocolConfig {
    pub fn new(task: Task, max_rounds: u32) -> Self {
        let mut roles = vec![AgentRole::InitialRespondent, AgentRole::Refiner];
        roles.extend_from_slice(task.critics());
        ProtocolConfig { task, roles, max_rounds, attach_images: false, strict: true }
    }

    pub fn eda(max_rounds: u32) -> Self {
        Self::new(Task::EdaTurn, max_rounds)
    }

    pub fn story(max_rounds: u32) -> Self {
        Self::new(Task::StoryDraft, max_rounds)
    }

    pub fn critics(&self) -> Vec<AgentRole> {
        self.roles.iter().copied().filter(|r| r.is_critic()).collect()
    }

    pub fn without(mut self, role: AgentRole) -> Self {
        self.roles.retain(|r| *r != role);
        self
    }

    /// Checks the roster is exactly the task's roster and `max_rounds >= 1`.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.max_rounds < 1 {
            return Err(ProtocolError::InvalidConfig("max_rounds must be at least 1".into()));
        }
        let expected = ProtocolConfig::new(self.task, self.max_rounds);
        let have: BTreeSet<_> = self.roles.iter().collect();
        let want: BTreeSet<_> = expected.roles.iter().collect();
        if have != want || have.len() != self.roles.len() {
            return Err(ProtocolError::InvalidConfig(format!(
                "{:?} roster must be exactly {:?}",
                self.task, expected.roles
            )));
        }
        Ok(())
    }
}

/// Which roles cover each design-space dimension.
pub fn coverage_table(config: &ProtocolConfig) -> Result<BTreeMap<Dimension, BTreeSet<AgentRole>>, ProtocolError> {
    let allowed: BTreeSet<_> = ProtocolConfig::new(config.task, 1).roles.into_iter().collect();
    let mut table: BTreeMap<Dimension, BTreeSet<AgentRole>> =
        Dimension::ALL.iter().map(|&d| (d, BTreeSet::new())).collect();
    for &role in &config.roles {
        if !allowed.contains(&role) {
            return Err(ProtocolError::InvalidConfig(format!("{role} is not part of the {:?} roster", config.task)));
        }
        for &dim in role.dimensions() {
            table.get_mut(&dim).unwrap().insert(role);
        }
    }
    if config.strict {
        if let Some((dim, roles)) = table.iter().find(|(_, roles)| roles.len() < 3) {
            return Err(ProtocolError::InvalidConfig(format!(
                "{dim} dimension covered by {} roles, at least 3 required",
                roles.len()
            )));
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueItem {
    pub issue: String,
    pub suggestion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub role: AgentRole,
    pub applicable: bool,
    pub ready: bool,
    pub items: Vec<CritiqueItem>,
}

#[derive(Debug, Clone, Deserialize)]
struct CritiqueWire {
    applicable: bool,
    ready: bool,
    #[serde(default)]
    items: Vec<CritiqueItem>,
}

const CRITIQUE_SCHEMA: &str =
    r#"{"applicable": boolean, "ready": boolean, "items": [{"issue": string, "suggestion": string}]}"#;

impl Critique {
    fn from_wire(role: AgentRole, wire: CritiqueWire) -> Self {
        if !wire.applicable {
            // Abstention counts as consent.
            return Critique { role, applicable: false, ready: true, items: Vec::new() };
        }
        Critique { role, applicable: true, ready: wire.ready, items: wire.items }
    }
}

/// Reference to the `index`-th (1-based) item of a critic's critique,
/// written `critic_code#2`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ItemRef {
    pub role: AgentRole,
    pub index: usize,
}

impl TryFrom<String> for ItemRef {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let (role, index) = s.split_once('#').ok_or_else(|| format!("bad item ref {s:?}"))?;
        let role = AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str() == role)
            .ok_or_else(|| format!("unknown role in item ref {s:?}"))?;
        let index = index.parse().map_err(|_| format!("bad index in item ref {s:?}"))?;
        Ok(ItemRef { role, index })
    }
}

impl From<ItemRef> for String {
    fn from(r: ItemRef) -> String {
        r.to_string()
    }
}

impl std::fmt::Display for ItemRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.role, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub item: ItemRef,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerDecision {
    pub accepted: Vec<ItemRef>,
    pub rejected: Vec<Rejection>,
    pub revised: Value,
    #[serde(default)]
    pub kind_changed: bool,
}

#[derive(Debug, Clone, Deserialize)]
struct DecisionWire {
    #[serde(default)]
    accepted: Vec<ItemRef>,
    #[serde(default)]
    rejected: Vec<Rejection>,
    revised: Value,
}

fn decision_schema<D: Draft>() -> String {
    format!(
        "{{\"accepted\": [item_ref], \"rejected\": [{{\"item\": item_ref, \"rationale\": string}}], \"revised\": {}}}",
        D::schema()
    )
}

/// Parses a refiner reply and checks it decides every item exactly once
/// with a nonempty rationale for each rejection.
fn parse_decision<D: Draft>(raw: &str, items: &BTreeSet<ItemRef>) -> Result<(DecisionWire, D), String> {
    let wire: DecisionWire = structured::extract(raw, |w: &DecisionWire| {
        let mut seen = BTreeSet::new();
        for r in w.accepted.iter().chain(w.rejected.iter().map(|r| &r.item)) {
            if !items.contains(r) {
                return Err(format!("unknown item {r}"));
            }
            if !seen.insert(r.clone()) {
                return Err(format!("item {r} decided twice"));
            }
        }
        if let Some(missing) = items.iter().find(|r| !seen.contains(*r)) {
            return Err(format!("item {missing} neither accepted nor rejected"));
        }
        if let Some(r) = w.rejected.iter().find(|r| r.rationale.trim().is_empty()) {
            return Err(format!("rejection of {} has no rationale", r.item));
        }
        let draft: D = serde_json::from_value(w.revised.clone()).map_err(|e| format!("revised: {e}"))?;
        draft.validate().map_err(|e| format!("revised: {e}"))
    })?;
    let draft = serde_json::from_value(wire.revised.clone()).expect("validated above");
    Ok((wire, draft))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub critiques: Vec<Critique>,
    pub decision: Option<RefinerDecision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AllReady,
    RoundCap,
    /// A model call failed; the latest response was returned as degraded.
    Aborted,
}

/// Audit record of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueTranscript {
    pub task: Task,
    pub max_rounds: u32,
    pub initial: Value,
    pub rounds: Vec<Round>,
    pub termination: Termination,
    pub wave_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CritiqueTranscript {
    /// `1 + Σ (1 critic wave + 1 refiner wave if a decision was made)`.
    pub fn count_waves(rounds: &[Round]) -> u32 {
        1 + rounds.iter().map(|r| 1 + u32::from(r.decision.is_some())).sum::<u32>()
    }

    pub fn decisions(&self) -> usize {
        self.rounds.iter().filter(|r| r.decision.is_some()).count()
    }

    pub fn refiner_calls(&self) -> usize {
        self.decisions()
    }

    /// Model calls implied by the transcript, excluding parse repairs.
    pub fn expected_calls(&self) -> usize {
        1 + self.rounds.iter().map(|r| r.critiques.len()).sum::<usize>() + self.decisions()
    }

    pub fn degraded(&self) -> bool {
        self.termination == Termination::Aborted
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome<D> {
    pub response: D,
    pub transcript: CritiqueTranscript,
}

impl<D> ProtocolOutcome<D> {
    pub fn degraded(&self) -> bool {
        self.transcript.degraded()
    }
}

fn render_rationales(rounds: &[Round]) -> String {
    let mut out = String::new();
    for (i, round) in rounds.iter().enumerate() {
        if let Some(decision) = &round.decision {
            for r in &decision.rejected {
                let _ = writeln!(out, "- round {} {}: {}", i + 1, r.item, r.rationale);
            }
        }
    }
    if out.is_empty() {
        out.push_str("(none)");
    }
    out
}

fn render_critiques(critiques: &[Critique]) -> String {
    let mut out = String::new();
    for c in critiques {
        if !c.applicable {
            let _ = writeln!(out, "{}: abstained", c.role);
            continue;
        }
        let _ = writeln!(out, "{} (ready: {}):", c.role, c.ready);
        for (i, item) in c.items.iter().enumerate() {
            let _ = writeln!(out, "  [{}#{}] issue: {}\n      suggestion: {}", c.role, i + 1, item.issue, item.suggestion);
        }
    }
    out
}

/// Inputs shared by every agent in one protocol run.
pub struct ProtocolInput<'a> {
    /// Messages for the initial respondent.
    pub initial_messages: Vec<ChatMessage>,
    /// Context shown to critics and the refiner (request, notebook, results).
    pub context: &'a str,
    /// Latest figure, for the visualization critic.
    pub image: Option<ImageAttachment>,
}

pub async fn run_protocol<D: Draft>(
    gateway: &Gateway,
    prompts: &PromptAssets,
    config: &ProtocolConfig,
    input: ProtocolInput<'_>,
) -> Result<ProtocolOutcome<D>, ProtocolError> {
    config.validate()?;
    let critics = config.critics();

    let mut current: D = gateway
        .request(
            AgentRole::InitialRespondent,
            "initial",
            D::WHAT,
            D::schema(),
            input.initial_messages,
            D::parse,
        )
        .await
        .map_err(ProtocolError::Initial)?;

    let initial = serde_json::to_value(&current).expect("draft serializes");
    let mut rounds: Vec<Round> = Vec::new();

    let finish = |rounds: Vec<Round>, termination, error: Option<String>| CritiqueTranscript {
        task: config.task,
        max_rounds: config.max_rounds,
        initial: initial.clone(),
        wave_count: CritiqueTranscript::count_waves(&rounds),
        rounds,
        termination,
        error,
    };

    for round_no in 1..=config.max_rounds {
        let rationales = render_rationales(&rounds);
        let response_text = current.render();
        let calls = critics.iter().map(|&role| {
            let system = prompts.render("critic_frame", &[("role_guidance", prompts.critic_guidance(role))]);
            let review = prompts.render(
                "critic_review",
                &[("context", input.context), ("response", &response_text), ("rationales", &rationales)],
            );
            let mut user = ChatMessage::user(review);
            if role == AgentRole::CriticVisualization && config.attach_images {
                if let Some(image) = &input.image {
                    user = user.with_image(image.clone());
                }
            }
            let purpose = format!("critique round {round_no}");
            async move {
                gateway
                    .request(role, &purpose, "critique", CRITIQUE_SCHEMA, vec![ChatMessage::system(system), user], |raw| {
                        structured::extract::<CritiqueWire, _>(raw, |_| Ok(()))
                    })
                    .await
                    .map(|wire| Critique::from_wire(role, wire))
            }
        });
        let results = join_all(calls).await;
        let mut critiques = Vec::with_capacity(results.len());
        for result in results {
            match result {
                Ok(c) => critiques.push(c),
                Err(e) => {
                    tracing::warn!("critic failed in round {round_no}: {e}");
                    return Ok(ProtocolOutcome { response: current, transcript: finish(rounds, Termination::Aborted, Some(e.to_string())) });
                }
            }
        }

        if critiques.iter().all(|c| c.ready) {
            rounds.push(Round { critiques, decision: None });
            return Ok(ProtocolOutcome { response: current, transcript: finish(rounds, Termination::AllReady, None) });
        }

        let items: BTreeSet<ItemRef> = critiques
            .iter()
            .filter(|c| c.applicable)
            .flat_map(|c| (1..=c.items.len()).map(move |index| ItemRef { role: c.role, index }))
            .collect();
        let system = prompts.render("refiner", &[("draft_schema", D::schema())]);
        let review = prompts.render(
            "refiner_review",
            &[
                ("context", input.context),
                ("response", &response_text),
                ("critiques", &render_critiques(&critiques)),
                ("rationales", &rationales),
            ],
        );
        let schema = decision_schema::<D>();
        let decided = gateway
            .request(
                AgentRole::Refiner,
                &format!("refine round {round_no}"),
                "refiner decision",
                &schema,
                vec![ChatMessage::system(system), ChatMessage::user(review)],
                |raw| parse_decision::<D>(raw, &items),
            )
            .await;
        match decided {
            Ok((wire, revised)) => {
                let kind_changed = current.kind_tag() != revised.kind_tag();
                rounds.push(Round {
                    critiques,
                    decision: Some(RefinerDecision {
                        accepted: wire.accepted,
                        rejected: wire.rejected,
                        revised: wire.revised,
                        kind_changed,
                    }),
                });
                current = revised;
            }
            Err(e) => {
                tracing::warn!("refiner failed in round {round_no}: {e}");
                rounds.push(Round { critiques, decision: None });
                return Ok(ProtocolOutcome { response: current, transcript: finish(rounds, Termination::Aborted, Some(e.to_string())) });
            }
        }
    }

    Ok(ProtocolOutcome { response: current, transcript: finish(rounds, Termination::RoundCap, None) })
}
