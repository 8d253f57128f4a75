//! Data stories: block-structured narratives with dimension-tagged
//! annotations, generated from a notebook and exported as HTML.
//!
//! Annotation offsets count Unicode scalar values, not bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::critique::{run_protocol, CritiqueTranscript, Draft, ProtocolConfig, ProtocolError, ProtocolInput};
use crate::gateway::{structured, ChatMessage, Gateway, GatewayError};
use crate::notebook::{render_context, Notebook};
use crate::prompts::PromptAssets;
use crate::roles::{AgentRole, Dimension, Mode};

#[derive(Debug, Error)]
pub enum StoryError {
    #[error("notebook is empty")]
    EmptyNotebook,
    #[error("could not parse a data story: {0}")]
    Parse(String),
    #[error("invalid feedback anchor: {0}")]
    InvalidAnchor(String),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("figure block {block} references cell {cell}, which has no image output")]
    MissingFigure { block: String, cell: String },
    #[error("invalid story configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(GatewayError),
}

impl From<GatewayError> for StoryError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Unparseable { detail, .. } => StoryError::Parse(detail),
            other => StoryError::Gateway(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Heading,
    Paragraph,
    FigureRef,
    List,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryBlock {
    pub id: String,
    pub kind: BlockKind,
    pub text: String,
}

impl StoryBlock {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub block_id: String,
    pub start: usize,
    pub end: usize,
    pub dimension: Dimension,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryDocument {
    pub blocks: Vec<StoryBlock>,
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub instructions: String,
}

/// Substring of `text` between char offsets `start..end`.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let from = indices.nth(start)?;
    let to = if end == start { from } else { indices.nth(end - start - 1)? };
    Some(&text[from..to])
}

impl StoryDocument {
    pub fn block(&self, id: &str) -> Option<&StoryBlock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    /// Text covered by `a`.
    pub fn span_text(&self, a: &Annotation) -> Option<&str> {
        char_slice(&self.block(&a.block_id)?.text, a.start, a.end)
    }

    /// Serialization shown to the model when revising.
    pub fn to_wire_json(&self) -> String {
        let wire = StoryWire {
            blocks: self.blocks.clone(),
            annotations: self.annotations.iter().map(|a| serde_json::to_value(a).expect("serializes")).collect(),
        };
        serde_json::to_string_pretty(&wire).expect("story serializes")
    }

    /// Checks block ids and every annotation invariant.
    pub fn validate(&self, max_per_block: usize) -> Result<(), String> {
        let mut ids = HashSet::new();
        for block in &self.blocks {
            if !ids.insert(block.id.as_str()) {
                return Err(format!("duplicate block id {}", block.id));
            }
        }
        let mut per_block: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            let block = self.block(&a.block_id).ok_or_else(|| format!("annotation on unknown block {}", a.block_id))?;
            if let Err(reason) = check_span(block, a.start, a.end, &a.explanation) {
                return Err(format!("annotation {}..{} on {}: {reason:?}", a.start, a.end, a.block_id));
            }
            per_block.entry(&a.block_id).or_default().push(a);
        }
        for (block, mut annotations) in per_block {
            if annotations.len() > max_per_block {
                return Err(format!("block {block} has {} annotations", annotations.len()));
            }
            annotations.sort_by_key(|a| a.start);
            if annotations.windows(2).any(|w| w[1].start < w[0].end) {
                return Err(format!("overlapping annotations in block {block}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Malformed,
    UnknownBlock,
    FigureBlock,
    QuoteNotFound,
    OutOfBounds,
    EmptyExplanation,
    CrossesListItems,
    Overlap,
    TooMany,
    SpanEdited,
    /// A figure block whose cell is missing or has no output.
    InvalidFigure,
}

/// Something the model proposed that did not make it into the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub reason: DropReason,
    pub item: Value,
}

fn check_span(block: &StoryBlock, start: usize, end: usize, explanation: &str) -> Result<(), DropReason> {
    if block.kind == BlockKind::FigureRef {
        return Err(DropReason::FigureBlock);
    }
    if start >= end || end > block.char_len() {
        return Err(DropReason::OutOfBounds);
    }
    if explanation.trim().is_empty() {
        return Err(DropReason::EmptyExplanation);
    }
    if block.kind == BlockKind::List && char_slice(&block.text, start, end).is_some_and(|s| s.contains('\n')) {
        return Err(DropReason::CrossesListItems);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct AnnotationWire {
    block_id: String,
    start: Option<usize>,
    end: Option<usize>,
    quote: Option<String>,
    dimension: Dimension,
    explanation: String,
}

/// Model-facing story shape. Annotations are kept raw so a single bad one
/// does not invalidate the whole reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryWire {
    pub blocks: Vec<StoryBlock>,
    #[serde(default)]
    pub annotations: Vec<Value>,
}

pub const STORY_SCHEMA: &str = r#"{"blocks": [{"id": string, "kind": "heading" | "paragraph" | "list" | "figure_ref", "text": string}], "annotations": [{"block_id": string, "start": integer, "end": integer, "quote": string (optional, instead of start and end), "dimension": "semantic" | "rhetorical" | "pragmatic", "explanation": string}]}"#;

impl Draft for StoryWire {
    const WHAT: &'static str = "data story";

    fn schema() -> &'static str {
        STORY_SCHEMA
    }

    fn validate(&self) -> Result<(), String> {
        if self.blocks.is_empty() {
            return Err("story has no blocks".into());
        }
        let mut ids = HashSet::new();
        for block in &self.blocks {
            if block.id.trim().is_empty() {
                return Err("block id is empty".into());
            }
            if block.text.trim().is_empty() {
                return Err(format!("block {} has no text", block.id));
            }
            if !ids.insert(block.id.as_str()) {
                return Err(format!("duplicate block id {}", block.id));
            }
        }
        Ok(())
    }
}

/// Resolves, checks and de-conflicts proposed annotations against `blocks`.
/// Overlaps keep the earlier-starting annotation; beyond `max_per_block`
/// the earliest are kept.
fn normalize_annotations(blocks: &[StoryBlock], raw: Vec<Value>, max_per_block: usize) -> (Vec<Annotation>, Vec<Dropped>) {
    let mut dropped = Vec::new();
    let mut by_block: BTreeMap<usize, Vec<(Annotation, Value)>> = BTreeMap::new();
    for item in raw {
        let wire: AnnotationWire = match serde_json::from_value(item.clone()) {
            Ok(w) => w,
            Err(_) => {
                dropped.push(Dropped { reason: DropReason::Malformed, item });
                continue;
            }
        };
        let Some(position) = blocks.iter().position(|b| b.id == wire.block_id) else {
            dropped.push(Dropped { reason: DropReason::UnknownBlock, item });
            continue;
        };
        let block = &blocks[position];
        let span = match (wire.start, wire.end, &wire.quote) {
            (Some(s), Some(e), _) => Some((s, e)),
            (_, _, Some(q)) if !q.is_empty() => block.text.find(q.as_str()).map(|byte| {
                let s = block.text[..byte].chars().count();
                (s, s + q.chars().count())
            }),
            _ => None,
        };
        let Some((start, end)) = span else {
            let reason = if wire.quote.is_some() { DropReason::QuoteNotFound } else { DropReason::Malformed };
            dropped.push(Dropped { reason, item });
            continue;
        };
        if let Err(reason) = check_span(block, start, end, &wire.explanation) {
            dropped.push(Dropped { reason, item });
            continue;
        }
        let annotation = Annotation {
            block_id: wire.block_id,
            start,
            end,
            dimension: wire.dimension,
            explanation: wire.explanation.trim().to_string(),
        };
        by_block.entry(position).or_default().push((annotation, item));
    }

    let mut kept = Vec::new();
    for (_, mut candidates) in by_block {
        candidates.sort_by_key(|(a, _)| (a.start, a.end));
        let mut in_block = 0;
        let mut last_end = 0;
        for (a, item) in candidates {
            if in_block > 0 && a.start < last_end {
                dropped.push(Dropped { reason: DropReason::Overlap, item });
            } else if in_block >= max_per_block {
                dropped.push(Dropped { reason: DropReason::TooMany, item });
            } else {
                last_end = a.end;
                in_block += 1;
                kept.push(a);
            }
        }
    }
    (kept, dropped)
}

/// Builds a document from a parsed model reply. Figure blocks must name a
/// notebook cell with outputs; others are dropped with their annotations.
pub fn build_document(
    wire: StoryWire,
    instructions: &str,
    nb: &Notebook,
    max_per_block: usize,
) -> (StoryDocument, Vec<Dropped>) {
    let mut dropped = Vec::new();
    let mut blocks = Vec::with_capacity(wire.blocks.len());
    for mut block in wire.blocks {
        if block.kind == BlockKind::FigureRef {
            block.text = block.text.trim().to_string();
            if nb.cell(&block.text).is_none_or(|c| c.outputs.is_empty()) {
                dropped.push(Dropped { reason: DropReason::InvalidFigure, item: serde_json::to_value(&block).unwrap() });
                continue;
            }
        }
        blocks.push(block);
    }
    let (annotations, more) = normalize_annotations(&blocks, wire.annotations, max_per_block);
    dropped.extend(more);
    if !dropped.is_empty() {
        tracing::info!(count = dropped.len(), "dropped story items: {:?}", dropped.iter().map(|d| d.reason).collect::<Vec<_>>());
    }
    (StoryDocument { blocks, annotations, instructions: instructions.to_string() }, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackScope {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub block_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub scope: FeedbackScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Anchor>,
    pub text: String,
}

impl Feedback {
    pub fn global(text: impl Into<String>) -> Self {
        Feedback { scope: FeedbackScope::Global, anchor: None, text: text.into() }
    }

    pub fn local(block_id: impl Into<String>, start: usize, end: usize, text: impl Into<String>) -> Self {
        Feedback {
            scope: FeedbackScope::Local,
            anchor: Some(Anchor { block_id: block_id.into(), start, end }),
            text: text.into(),
        }
    }
}

/// Renders feedback for the prompt; local items quote their anchored text.
fn render_feedback(story: &StoryDocument, feedback: &[Feedback]) -> Result<String, StoryError> {
    let mut out = String::new();
    for (i, item) in feedback.iter().enumerate() {
        if item.text.trim().is_empty() {
            return Err(StoryError::InvalidFeedback(format!("feedback {} is empty", i + 1)));
        }
        match (item.scope, &item.anchor) {
            (FeedbackScope::Global, None) => {
                let _ = writeln!(out, "{}. (global) {}", i + 1, item.text);
            }
            (FeedbackScope::Local, Some(anchor)) => {
                let block = story
                    .block(&anchor.block_id)
                    .ok_or_else(|| StoryError::InvalidAnchor(format!("unknown block {}", anchor.block_id)))?;
                let selected = (anchor.start < anchor.end)
                    .then(|| char_slice(&block.text, anchor.start, anchor.end))
                    .flatten()
                    .ok_or_else(|| {
                        StoryError::InvalidAnchor(format!("{}..{} outside block {}", anchor.start, anchor.end, anchor.block_id))
                    })?;
                let _ = writeln!(
                    out,
                    "{}. (local, block {}, characters {}-{}, selected text: \"{}\") {}",
                    i + 1,
                    anchor.block_id,
                    anchor.start,
                    anchor.end,
                    selected,
                    item.text
                );
            }
            (FeedbackScope::Global, Some(_)) => {
                return Err(StoryError::InvalidAnchor(format!("global feedback {} has an anchor", i + 1)))
            }
            (FeedbackScope::Local, None) => {
                return Err(StoryError::InvalidAnchor(format!("local feedback {} has no anchor", i + 1)))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryConfig {
    pub mode: Mode,
    pub max_rounds: u32,
    pub max_annotations_per_block: usize,
    pub context_budget: usize,
}

impl Default for StoryConfig {
    fn default() -> Self {
        StoryConfig {
            mode: Mode::Single,
            max_rounds: 2,
            max_annotations_per_block: 2,
            context_budget: crate::eda::DEFAULT_CONTEXT_BUDGET,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoryOutcome {
    pub story: StoryDocument,
    pub dropped: Vec<Dropped>,
    pub transcript: Option<CritiqueTranscript>,
}

impl StoryOutcome {
    pub fn degraded(&self) -> bool {
        self.transcript.as_ref().is_some_and(CritiqueTranscript::degraded)
    }
}

pub struct StoryEngine<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptAssets,
    pub config: StoryConfig,
}

impl StoryEngine<'_> {
    fn system_prompt(&self) -> String {
        self.prompts.render(
            "story_system",
            &[
                ("max_annotations", &self.config.max_annotations_per_block.to_string()),
                ("story_schema", STORY_SCHEMA),
            ],
        )
    }

    pub async fn generate(&self, nb: &Notebook, instructions: &str) -> Result<StoryOutcome, StoryError> {
        if nb.is_empty() {
            return Err(StoryError::EmptyNotebook);
        }
        let user = self.prompts.render(
            "story_generate",
            &[("instructions", instructions), ("notebook_context", &render_context(nb, self.config.context_budget))],
        );
        let messages = vec![ChatMessage::system(self.system_prompt()), ChatMessage::user(user.clone())];
        let (wire, transcript) = match self.config.mode {
            Mode::Single => (self.request(messages, "story").await?, None),
            Mode::Multi => {
                let config = ProtocolConfig::story(self.config.max_rounds);
                let input = ProtocolInput { initial_messages: messages, context: &user, image: None };
                match run_protocol::<StoryWire>(self.gateway, self.prompts, &config, input).await {
                    Ok(outcome) => (outcome.response, Some(outcome.transcript)),
                    Err(ProtocolError::Initial(e)) => return Err(e.into()),
                    Err(ProtocolError::InvalidConfig(msg)) => return Err(StoryError::Config(msg)),
                }
            }
        };
        let (story, dropped) = build_document(wire, instructions, nb, self.config.max_annotations_per_block);
        Ok(StoryOutcome { story, dropped, transcript })
    }

    /// Revises `story` by the given feedback in one model call. Empty
    /// feedback returns the story unchanged without calling the model.
    pub async fn apply_feedback(
        &self,
        story: &StoryDocument,
        feedback: &[Feedback],
        nb: &Notebook,
    ) -> Result<StoryOutcome, StoryError> {
        let rendered = render_feedback(story, feedback)?;
        if feedback.is_empty() {
            return Ok(StoryOutcome { story: story.clone(), dropped: Vec::new(), transcript: None });
        }
        let user = self.prompts.render(
            "story_feedback",
            &[
                ("story", &story.to_wire_json()),
                ("feedback", &rendered),
                ("notebook_context", &render_context(nb, self.config.context_budget)),
            ],
        );
        let wire = self.request(vec![ChatMessage::system(self.system_prompt()), ChatMessage::user(user)], "story feedback").await?;
        let (story, dropped) = build_document(wire, &story.instructions, nb, self.config.max_annotations_per_block);
        Ok(StoryOutcome { story, dropped, transcript: None })
    }

    async fn request(&self, messages: Vec<ChatMessage>, purpose: &str) -> Result<StoryWire, StoryError> {
        Ok(self
            .gateway
            .request(AgentRole::InitialRespondent, purpose, StoryWire::WHAT, STORY_SCHEMA, messages, |raw| {
                structured::extract(raw, StoryWire::validate)
            })
            .await?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEdit {
    pub id: String,
    pub text: String,
}

/// Replaces block texts. An annotation on an edited block survives only if
/// its offsets still cover exactly the same text.
pub fn update_blocks(
    story: &StoryDocument,
    edits: &[BlockEdit],
    nb: &Notebook,
) -> Result<(StoryDocument, Vec<Dropped>), StoryError> {
    let mut next = story.clone();
    for edit in edits {
        let block = next
            .blocks
            .iter_mut()
            .find(|b| b.id == edit.id)
            .ok_or_else(|| StoryError::UnknownBlock(edit.id.clone()))?;
        if block.kind == BlockKind::FigureRef && nb.cell(edit.text.trim()).is_none_or(|c| c.outputs.is_empty()) {
            return Err(StoryError::MissingFigure { block: edit.id.clone(), cell: edit.text.clone() });
        }
        block.text = edit.text.clone();
    }
    let mut dropped = Vec::new();
    let edited: HashSet<&str> = edits.iter().map(|e| e.id.as_str()).collect();
    let mut kept = Vec::with_capacity(next.annotations.len());
    for a in &next.annotations {
        let keep = !edited.contains(a.block_id.as_str())
            || (story.span_text(a).is_some() && story.span_text(a) == next.span_text(a));
        if keep {
            kept.push(a.clone());
        } else {
            dropped.push(Dropped { reason: DropReason::SpanEdited, item: serde_json::to_value(a).unwrap() });
        }
    }
    next.annotations = kept;
    Ok((next, dropped))
}

fn escape_html(text: &str, out: &mut String) {
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
}

fn escaped(text: &str) -> String {
    let mut out = String::new();
    escape_html(text, &mut out);
    out
}

/// Text of `chars[from..to]` with every annotation inside it wrapped in a
/// mark. `annotations` are sorted, non-overlapping, with absolute offsets.
fn render_inline(chars: &[char], from: usize, to: usize, annotations: &[&Annotation], out: &mut String) {
    let text = |a: usize, b: usize| chars[a..b].iter().collect::<String>();
    let mut at = from;
    for a in annotations.iter().filter(|a| a.start >= from && a.end <= to) {
        escape_html(&text(at, a.start), out);
        let _ = write!(
            out,
            "<mark class=\"dim-{dim}\" data-dimension=\"{dim}\" title=\"{title}\">",
            dim = a.dimension,
            title = escaped(&a.explanation)
        );
        escape_html(&text(a.start, a.end), out);
        out.push_str("</mark>");
        at = a.end;
    }
    escape_html(&text(at, to), out);
}

const STYLE: &str = "body { font-family: Georgia, 'Times New Roman', serif; max-width: 46rem; margin: 2.5rem auto; padding: 0 1rem; line-height: 1.6; color: #222; }
h1, h2 { font-family: 'Helvetica Neue', Arial, sans-serif; }
figure { margin: 1.5rem 0; }
figure img { max-width: 100%; }
mark { background: transparent; padding: 0 1px; border-bottom: 3px solid; cursor: help; }
.dim-semantic { background: #0F6B6B22; border-color: #0F6B6B; }
.dim-rhetorical { background: #2B5FB022; border-color: #2B5FB0; }
.dim-pragmatic { background: #C1683C22; border-color: #C1683C; }
.legend { font: 0.85rem 'Helvetica Neue', Arial, sans-serif; color: #555; margin-top: 3rem; }
.legend span { border-bottom: 3px solid; margin-right: 1rem; }
";

fn figure_image(nb: &Notebook, cell_id: &str) -> Option<(&'static str, String)> {
    let cell = nb.cell(cell_id)?;
    cell.outputs.iter().rev().find_map(|o| {
        let data = o.data()?;
        ["image/png", "image/jpeg"].into_iter().find_map(|mime| {
            let payload = data.get(mime)?.as_str()?;
            let compact: String = payload.chars().filter(|c| !c.is_whitespace()).collect();
            base64::engine::general_purpose::STANDARD.decode(&compact).ok()?;
            Some((mime, compact))
        })
    })
}

/// Self-contained HTML page for `story`. Figure blocks embed the image
/// output of the referenced cell.
pub fn export_html(story: &StoryDocument, nb: &Notebook) -> Result<String, StoryError> {
    let title = story
        .blocks
        .iter()
        .find(|b| b.kind == BlockKind::Heading)
        .map_or_else(|| "Data story".to_string(), |b| b.text.clone());
    let mut by_block: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for a in &story.annotations {
        by_block.entry(&a.block_id).or_default().push(a);
    }
    for list in by_block.values_mut() {
        list.sort_by_key(|a| a.start);
    }

    let mut body = String::new();
    let mut seen_heading = false;
    for block in &story.blocks {
        let annotations = by_block.get(block.id.as_str()).map_or(&[][..], Vec::as_slice);
        let chars: Vec<char> = block.text.chars().collect();
        let id = escaped(&block.id);
        match block.kind {
            BlockKind::Heading => {
                let tag = if seen_heading { "h2" } else { "h1" };
                seen_heading = true;
                let _ = write!(body, "<{tag} data-block=\"{id}\">");
                render_inline(&chars, 0, chars.len(), annotations, &mut body);
                let _ = writeln!(body, "</{tag}>");
            }
            BlockKind::Paragraph => {
                let _ = write!(body, "<p data-block=\"{id}\">");
                render_inline(&chars, 0, chars.len(), annotations, &mut body);
                body.push_str("</p>\n");
            }
            BlockKind::List => {
                let _ = writeln!(body, "<ul data-block=\"{id}\">");
                let mut start = 0;
                for (i, c) in chars.iter().chain(std::iter::once(&'\n')).enumerate() {
                    if *c == '\n' {
                        body.push_str("<li>");
                        render_inline(&chars, start, i, annotations, &mut body);
                        body.push_str("</li>\n");
                        start = i + 1;
                    }
                }
                body.push_str("</ul>\n");
            }
            BlockKind::FigureRef => {
                let (mime, data) = figure_image(nb, &block.text)
                    .ok_or_else(|| StoryError::MissingFigure { block: block.id.clone(), cell: block.text.clone() })?;
                let cell = escaped(&block.text);
                let _ = writeln!(
                    body,
                    "<figure data-block=\"{id}\" data-cell=\"{cell}\"><img alt=\"Output of cell {cell}\" src=\"data:{mime};base64,{data}\"></figure>"
                );
            }
        }
    }

    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<meta name=\"viewport\" content=\"width=device-width, initial-scale=1\">\n<title>{}</title>\n<style>\n{STYLE}</style>\n</head>\n<body>\n<article>\n{body}</article>\n",
        escaped(&title)
    );
    html.push_str(
        "<aside class=\"legend\"><span class=\"dim-semantic\">Semantic</span><span class=\"dim-rhetorical\">Rhetorical</span><span class=\"dim-pragmatic\">Pragmatic</span> Hover over highlighted text for explanations.</aside>\n</body>\n</html>\n",
    );
    Ok(html)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn blocks() -> Vec<StoryBlock> {
        vec![
            StoryBlock { id: "p1".into(), kind: BlockKind::Paragraph, text: "Women earn 12% less — alarmingly.".into() },
            StoryBlock { id: "l1".into(), kind: BlockKind::List, text: "audit pay\npublish bands".into() },
        ]
    }

    fn ann(block: &str, start: usize, end: usize) -> Value {
        json!({"block_id": block, "start": start, "end": end, "dimension": "semantic", "explanation": "why"})
    }

    #[test]
    fn char_slice_counts_scalars() {
        assert_eq!(char_slice("a—b", 1, 2), Some("—"));
        assert_eq!(char_slice("a—b", 0, 3), Some("a—b"));
        assert_eq!(char_slice("ab", 1, 3), None);
        assert_eq!(char_slice("ab", 2, 2), Some(""));
    }

    #[test]
    fn overlaps_keep_earliest_and_cap_applies() {
        let raw = vec![ann("p1", 5, 10), ann("p1", 0, 6), ann("p1", 11, 14), ann("p1", 20, 32)];
        let (kept, dropped) = normalize_annotations(&blocks(), raw, 2);
        let spans: Vec<_> = kept.iter().map(|a| (a.start, a.end)).collect();
        assert_eq!(spans, [(0, 6), (11, 14)]);
        let reasons: Vec<_> = dropped.iter().map(|d| d.reason).collect();
        assert_eq!(reasons, [DropReason::Overlap, DropReason::TooMany]);
    }

    #[test]
    fn quotes_resolve_to_char_offsets() {
        let raw = vec![json!({"block_id": "p1", "quote": "alarmingly", "dimension": "rhetorical", "explanation": "emphasis"})];
        let (kept, _) = normalize_annotations(&blocks(), raw, 2);
        assert_eq!((kept[0].start, kept[0].end), (22, 32));
    }

    #[test]
    fn bad_annotations_are_dropped_with_reasons() {
        let raw = vec![
            ann("zz", 0, 1),
            ann("p1", 3, 99),
            ann("l1", 0, 12),
            json!({"block_id": "p1", "start": 0, "end": 2, "dimension": "aesthetic", "explanation": "x"}),
            json!({"block_id": "p1", "start": 0, "end": 2, "dimension": "semantic", "explanation": "  "}),
            json!({"block_id": "p1", "quote": "absent", "dimension": "semantic", "explanation": "x"}),
        ];
        let (kept, dropped) = normalize_annotations(&blocks(), raw, 2);
        assert!(kept.is_empty());
        let reasons: Vec<_> = dropped.iter().map(|d| d.reason).collect();
        assert_eq!(
            reasons,
            [
                DropReason::UnknownBlock,
                DropReason::OutOfBounds,
                DropReason::CrossesListItems,
                DropReason::Malformed,
                DropReason::EmptyExplanation,
                DropReason::QuoteNotFound
            ]
        );
    }

    #[test]
    fn anchors_are_checked() {
        let story = StoryDocument { blocks: blocks(), annotations: vec![], instructions: String::new() };
        assert!(render_feedback(&story, &[Feedback::local("p1", 0, 5, "x")]).unwrap().contains("\"Women\""));
        assert!(matches!(render_feedback(&story, &[Feedback::local("p1", 5, 5, "x")]), Err(StoryError::InvalidAnchor(_))));
        assert!(matches!(render_feedback(&story, &[Feedback::local("p9", 0, 1, "x")]), Err(StoryError::InvalidAnchor(_))));
        let unanchored = Feedback { scope: FeedbackScope::Local, anchor: None, text: "x".into() };
        assert!(matches!(render_feedback(&story, &[unanchored]), Err(StoryError::InvalidAnchor(_))));
        assert!(matches!(render_feedback(&story, &[Feedback::global(" ")]), Err(StoryError::InvalidFeedback(_))));
    }
}
