//! Random inputs and oracle checks for insight graphs and stories.

#![allow(dead_code)]

use std::collections::BTreeSet;

use capy_core::gateway::{Gateway, ScriptEntry};
use capy_core::insight::{lexical_match, to_mermaid, InsightEdge, InsightGraph, InsightNode, NodeKind, QuestionGraph};
use capy_core::notebook::{CellKind, Notebook, Output, Provenance};
use capy_core::prompts::PromptAssets;
use capy_core::story::{export_html, update_blocks, Annotation, BlockEdit, BlockKind, Feedback, StoryConfig, StoryDocument, StoryEngine};
use proptest::prelude::*;
use serde_json::{json, Value};

use super::{html, mermaid};

// Insight graphs --------------------------------------------------------

fn label_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 #\"|<>`;&\\[\\]()é→\n]{0,16}[a-zA-Z]"
}

pub fn random_graph() -> impl Strategy<Value = InsightGraph> {
    let question = (label_text(), 1usize..7).prop_flat_map(|(title, n)| {
        let nodes = prop::collection::vec((label_text(), any::<bool>()), n);
        let edges = prop::collection::vec((0..n, 0..n, label_text()), 0..2 * n);
        (Just(title), nodes, edges)
    });
    prop::collection::vec(question, 0..4).prop_map(|qs| InsightGraph {
        questions: qs
            .into_iter()
            .map(|(title, nodes, edges)| QuestionGraph {
                question: title,
                nodes: nodes
                    .into_iter()
                    .enumerate()
                    .map(|(i, (label, green))| InsightNode {
                        id: format!("n{i}"),
                        label,
                        kind: if green { NodeKind::ExternalKnowledge } else { NodeKind::DataDerived },
                    })
                    .collect(),
                // Forward edges only, so the graph is a DAG.
                edges: edges
                    .into_iter()
                    .filter(|(a, b, _)| a < b)
                    .map(|(a, b, op)| InsightEdge { from: format!("n{a}"), to: format!("n{b}"), operation: op })
                    .collect(),
            })
            .collect(),
    })
}

/// Rendering, reparsing and comparing node labels, classes and the edge
/// multiset up to node renaming.
pub fn check_mermaid(g: &InsightGraph) -> Result<(), TestCaseError> {
    prop_assert!(g.validate().is_ok());
    let text = to_mermaid(g);
    prop_assert_eq!(to_mermaid(g), text.clone());
    let parsed = mermaid::parse(&text).map_err(TestCaseError::fail)?;
    prop_assert_eq!(parsed.len(), g.questions.len());
    for (q, p) in g.questions.iter().zip(&parsed) {
        prop_assert_eq!(&p.title, &q.question);
        prop_assert_eq!(p.nodes.len(), q.nodes.len());
        let position = |id: &str| p.nodes.iter().position(|n| n.0 == id).unwrap();
        for (node, (_, label, class)) in q.nodes.iter().zip(&p.nodes) {
            prop_assert_eq!(label, &node.label);
            prop_assert_eq!(class.as_str(), node.kind.class());
        }
        let mut want: Vec<(usize, usize, String)> = q
            .edges
            .iter()
            .map(|e| {
                let at = |id: &str| q.nodes.iter().position(|n| n.id == id).unwrap();
                (at(&e.from), at(&e.to), e.operation.clone())
            })
            .collect();
        let mut got: Vec<(usize, usize, String)> = p.edges.iter().map(|(a, op, b)| (position(a), position(b), op.clone())).collect();
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
    }
    Ok(())
}

/// Acyclicity by depth-first search with colors.
pub fn has_cycle(n: usize, edges: &[(usize, usize)]) -> bool {
    fn visit(v: usize, adj: &[Vec<usize>], color: &mut [u8]) -> bool {
        color[v] = 1;
        for &w in &adj[v] {
            if color[w] == 1 || (color[w] == 0 && visit(w, adj, color)) {
                return true;
            }
        }
        color[v] = 2;
        false
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    let mut color = vec![0u8; n];
    (0..n).any(|v| color[v] == 0 && visit(v, &adj, &mut color))
}

/// Word set built one character at a time.
fn words(text: &str) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    let mut current = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            set.insert(std::mem::take(&mut current));
        }
    }
    set
}

pub fn brute_force_pick(nb: &Notebook, label: &str) -> String {
    let wanted = words(label);
    let scores: Vec<usize> = nb
        .cells
        .iter()
        .map(|c| {
            let have = words(&format!("{} {}", c.source, c.output_text()));
            wanted.iter().filter(|w| have.contains(*w)).count()
        })
        .collect();
    let best = *scores.iter().max().unwrap();
    let last = scores.iter().rposition(|&s| s == best).unwrap();
    nb.cells[last].id.clone()
}

pub fn random_notebook() -> impl Strategy<Value = (Notebook, String)> {
    let vocab = prop::sample::select(vec!["gap", "Industry", "MEAN", "pay", "women", "men", "plot", "df", "Ünïcode", "Σ", "2024"]);
    let text = prop::collection::vec(vocab, 0..8).prop_map(|w| w.join(" "));
    (prop::collection::vec((text.clone(), text.clone()), 1..8), text).prop_map(|(cells, label)| {
        let mut nb = Notebook::new();
        for (source, output) in cells {
            let id = nb.append_cell(CellKind::Code, source, Provenance::User);
            nb.cell_mut(&id).unwrap().outputs = vec![Output::stdout(output)];
        }
        (nb, label)
    })
}

pub fn check_fallback(nb: &Notebook, label: &str) -> Result<(), TestCaseError> {
    prop_assert_eq!(lexical_match(nb, label).unwrap(), brute_force_pick(nb, label));
    Ok(())
}

// Stories ---------------------------------------------------------------

pub const MAX_PER_BLOCK: usize = 2;

/// Bounds, non-overlap, explanation, list and cap rules, checked pairwise.
pub fn check_invariants(story: &StoryDocument) -> Result<(), String> {
    for (i, a) in story.annotations.iter().enumerate() {
        let block = story.blocks.iter().find(|b| b.id == a.block_id).ok_or("unknown block")?;
        let len = block.text.chars().count();
        if !(a.start < a.end && a.end <= len) {
            return Err(format!("bounds {}..{} of {len}", a.start, a.end));
        }
        if a.explanation.trim().is_empty() {
            return Err("empty explanation".into());
        }
        if block.kind == BlockKind::FigureRef {
            return Err("annotation on figure".into());
        }
        let span: String = block.text.chars().skip(a.start).take(a.end - a.start).collect();
        if block.kind == BlockKind::List && span.contains('\n') {
            return Err("span crosses list items".into());
        }
        for b in &story.annotations[i + 1..] {
            if b.block_id == a.block_id && a.start < b.end && b.start < a.end {
                return Err(format!("overlap {}..{} / {}..{}", a.start, a.end, b.start, b.end));
            }
        }
        let in_block = story.annotations.iter().filter(|b| b.block_id == a.block_id).count();
        if in_block > MAX_PER_BLOCK {
            return Err("too many".into());
        }
    }
    Ok(())
}

/// Exported page parsed back: same blocks, same text, same marks.
pub fn check_export(story: &StoryDocument) -> Result<(), String> {
    let page = export_html(story, &Notebook::new()).map_err(|e| e.to_string())?;
    let parsed = html::parse(&page);
    if parsed.len() != story.blocks.len() {
        return Err("block count".into());
    }
    for (block, got) in story.blocks.iter().zip(&parsed) {
        if got.id != block.id || got.text != block.text {
            return Err(format!("block {} text {:?} != {:?}", block.id, got.text, block.text));
        }
        let mut want: Vec<&Annotation> = story.annotations.iter().filter(|a| a.block_id == block.id).collect();
        want.sort_by_key(|a| a.start);
        let want: Vec<_> = want.iter().map(|a| (a.start, a.end, a.dimension.to_string(), a.explanation.clone())).collect();
        let have: Vec<_> = got.marks.iter().map(|m| (m.start, m.end, m.dimension.clone(), m.title.clone())).collect();
        if want != have {
            return Err(format!("marks {have:?} != {want:?}"));
        }
    }
    Ok(())
}

fn text() -> impl Strategy<Value = String> {
    "[a-zé—<>&\"' \n]{0,24}[a-z]"
}

fn blocks() -> impl Strategy<Value = Vec<Value>> {
    let kind = prop::sample::select(vec!["heading", "paragraph", "list"]);
    prop::collection::vec((kind, text()), 1..5).prop_map(|bs| {
        bs.into_iter().enumerate().map(|(i, (k, t))| json!({"id": format!("b{i}"), "kind": k, "text": t})).collect()
    })
}

fn annotations(n_blocks: usize) -> impl Strategy<Value = Vec<Value>> {
    let dim = prop::sample::select(vec!["semantic", "rhetorical", "pragmatic", "visual"]);
    let one = (0..n_blocks + 1, 0usize..30, 0usize..10, dim, prop::option::of("[a-z ]{0,6}"), any::<bool>()).prop_map(
        |(b, start, len, dim, quote, blank)| {
            let explanation = if blank { " " } else { "because" };
            match quote {
                Some(q) => json!({"block_id": format!("b{b}"), "quote": q, "dimension": dim, "explanation": explanation}),
                None => json!({"block_id": format!("b{b}"), "start": start, "end": start + len, "dimension": dim, "explanation": explanation}),
            }
        },
    );
    prop::collection::vec(one, 0..10)
}

pub fn story_json() -> impl Strategy<Value = Value> {
    blocks().prop_flat_map(|bs| {
        let n = bs.len();
        (Just(bs), annotations(n)).prop_map(|(blocks, annotations)| json!({"blocks": blocks, "annotations": annotations}))
    })
}

#[derive(Debug, Clone)]
pub enum Edit {
    Append(String),
    Prepend(String),
    Replace(String),
}

pub fn edits() -> impl Strategy<Value = Vec<(usize, Edit)>> {
    let edit = prop_oneof![
        text().prop_map(Edit::Append),
        text().prop_map(Edit::Prepend),
        text().prop_map(Edit::Replace),
    ];
    prop::collection::vec((0usize..5, edit), 0..4)
}

#[derive(Debug, Clone)]
pub struct StorySequence {
    pub first: Value,
    pub second: Value,
    pub anchor_len: usize,
    pub edits: Vec<(usize, Edit)>,
}

pub fn story_sequence() -> impl Strategy<Value = StorySequence> {
    (story_json(), story_json(), 1usize..5, edits())
        .prop_map(|(first, second, anchor_len, edits)| StorySequence { first, second, anchor_len, edits })
}

/// Generate, apply local and global feedback, then edit blocks. The model
/// stub only answers the feedback call if its prompt quotes the anchored
/// text verbatim.
pub fn check_story_sequence(seq: &StorySequence) -> Result<(), TestCaseError> {
    let first_p0: String = seq.first["blocks"][0]["text"].as_str().unwrap().to_string();
    let anchor_end = seq.anchor_len.min(first_p0.chars().count());
    let anchored: String = first_p0.chars().take(anchor_end).collect();
    let gateway = Gateway::scripted(vec![
        ScriptEntry::reply(seq.first.to_string()),
        ScriptEntry::expecting(format!("selected text: \"{anchored}\""), seq.second.to_string()),
    ]);
    let prompts = PromptAssets::default();
    let engine = StoryEngine { gateway: &gateway, prompts: &prompts, config: StoryConfig::default() };
    let mut nb = Notebook::new();
    nb.append_cell(CellKind::Code, "df.describe()", Provenance::User);
    let rt = tokio::runtime::Builder::new_current_thread().enable_time().build().unwrap();

    let generated = rt.block_on(engine.generate(&nb, "brief")).unwrap().story;
    check_invariants(&generated).map_err(TestCaseError::fail)?;
    check_export(&generated).map_err(TestCaseError::fail)?;

    let feedback = [Feedback::local("b0", 0, anchor_end, "state the sign"), Feedback::global("shorter")];
    let revised = rt.block_on(engine.apply_feedback(&generated, &feedback, &nb)).map_err(|e| TestCaseError::fail(e.to_string()))?.story;
    check_invariants(&revised).map_err(TestCaseError::fail)?;
    check_export(&revised).map_err(TestCaseError::fail)?;

    let block_edits: Vec<BlockEdit> = seq
        .edits
        .iter()
        .filter(|(i, _)| *i < revised.blocks.len())
        .map(|(i, op)| {
            let old = &revised.blocks[*i].text;
            let text = match op {
                Edit::Append(s) => format!("{old}{s}"),
                Edit::Prepend(s) => format!("{s}{old}"),
                Edit::Replace(s) => s.clone(),
            };
            BlockEdit { id: revised.blocks[*i].id.clone(), text }
        })
        .collect();
    let (edited, _) = update_blocks(&revised, &block_edits, &nb).unwrap();
    check_invariants(&edited).map_err(TestCaseError::fail)?;
    check_export(&edited).map_err(TestCaseError::fail)?;
    // Span-match oracle: an annotation survives iff its text is unchanged.
    let survivors: Vec<&Annotation> = revised
        .annotations
        .iter()
        .filter(|a| {
            let old: String = revised.block(&a.block_id).unwrap().text.chars().skip(a.start).take(a.end - a.start).collect();
            let new_block = edited.block(&a.block_id).unwrap();
            let new: String = new_block.text.chars().skip(a.start).take(a.end - a.start).collect();
            new_block.text.chars().count() >= a.end && old == new
        })
        .collect();
    prop_assert_eq!(edited.annotations.iter().collect::<Vec<_>>(), survivors);
    Ok(())
}
