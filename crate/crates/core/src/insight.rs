//! Insight graphs: per-question DAGs of analytical objects, findings and
//! external knowledge, rendered as Mermaid flowcharts.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{structured, ChatMessage, Gateway, GatewayError};
use crate::notebook::{render_context, Notebook};
use crate::prompts::PromptAssets;
use crate::roles::AgentRole;

#[derive(Debug, Error)]
pub enum InsightError {
    #[error("notebook is empty")]
    EmptyNotebook,
    #[error("could not extract an insight graph: {0}")]
    Extraction(String),
    #[error("element not in graph: {0}")]
    UnknownElement(String),
    #[error(transparent)]
    Gateway(GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    DataDerived,
    ExternalKnowledge,
}

impl NodeKind {
    pub fn class(self) -> &'static str {
        match self {
            NodeKind::DataDerived => "yellowNode",
            NodeKind::ExternalKnowledge => "greenNode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightNode {
    pub id: String,
    pub label: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightEdge {
    pub from: String,
    pub to: String,
    pub operation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionGraph {
    pub question: String,
    pub nodes: Vec<InsightNode>,
    #[serde(default)]
    pub edges: Vec<InsightEdge>,
}

impl QuestionGraph {
    pub fn node(&self, id: &str) -> Option<&InsightNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question text is empty".into());
        }
        if self.nodes.is_empty() {
            return Err(format!("question {:?} has no nodes", self.question));
        }
        let mut index = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.trim().is_empty() {
                return Err("node id is empty".into());
            }
            if node.label.trim().is_empty() {
                return Err(format!("node {} has an empty label", node.id));
            }
            if index.insert(node.id.as_str(), i).is_some() {
                return Err(format!("duplicate node id {}", node.id));
            }
        }
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut indegree = vec![0usize; self.nodes.len()];
        for edge in &self.edges {
            let endpoint = |id: &str| index.get(id).copied().ok_or_else(|| format!("edge endpoint {id} is not a node of this question"));
            let (from, to) = (endpoint(&edge.from)?, endpoint(&edge.to)?);
            if from == to {
                return Err(format!("self-loop on {}", edge.from));
            }
            out[from].push(to);
            indegree[to] += 1;
        }
        // Kahn's algorithm: a cycle leaves nodes with positive indegree.
        let mut queue: VecDeque<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &j in &out[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        if seen < self.nodes.len() {
            let cyclic: Vec<&str> = (0..self.nodes.len()).filter(|&i| indegree[i] > 0).map(|i| self.nodes[i].id.as_str()).collect();
            return Err(format!("graph has a cycle through {}", cyclic.join(", ")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightGraph {
    pub questions: Vec<QuestionGraph>,
}

impl InsightGraph {
    pub fn validate(&self) -> Result<(), String> {
        self.questions.iter().try_for_each(QuestionGraph::validate)
    }
}

/// A clickable graph element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GraphElement {
    Node { question: usize, id: String },
    Edge { question: usize, from: String, to: String },
}

impl GraphElement {
    /// Text describing the element, or `None` if it is not in `g`.
    pub fn describe(&self, g: &InsightGraph) -> Option<String> {
        match self {
            GraphElement::Node { question, id } => {
                let q = g.questions.get(*question)?;
                let node = q.node(id)?;
                Some(format!("Node \"{}\" ({:?}) under question \"{}\"", node.label, node.kind, q.question))
            }
            GraphElement::Edge { question, from, to } => {
                let q = g.questions.get(*question)?;
                let edge = q.edges.iter().find(|e| &e.from == from && &e.to == to)?;
                let label = |id: &str| q.node(id).map_or(id.to_string(), |n| n.label.clone());
                Some(format!(
                    "Operation \"{}\" from \"{}\" to \"{}\" under question \"{}\"",
                    edge.operation,
                    label(from),
                    label(to),
                    q.question
                ))
            }
        }
    }

    /// Text used for lexical matching against cells.
    fn label<'g>(&self, g: &'g InsightGraph) -> Option<&'g str> {
        match self {
            GraphElement::Node { question, id } => Some(&g.questions.get(*question)?.node(id)?.label),
            GraphElement::Edge { question, from, to } => {
                let q = g.questions.get(*question)?;
                Some(&q.edges.iter().find(|e| &e.from == from && &e.to == to)?.operation)
            }
        }
    }
}

pub const GRAPH_SCHEMA: &str = r#"{"questions": [{"question": string, "nodes": [{"id": string, "label": string, "kind": "data_derived" | "external_knowledge"}], "edges": [{"from": string, "to": string, "operation": string}]}]}"#;

pub async fn extract_graph(
    gateway: &Gateway,
    prompts: &PromptAssets,
    nb: &Notebook,
    context_budget: usize,
) -> Result<InsightGraph, InsightError> {
    if nb.is_empty() {
        return Err(InsightError::EmptyNotebook);
    }
    let prompt = prompts.render("insights", &[("notebook_context", &render_context(nb, context_budget))]);
    let parse = |raw: &str| {
        structured::extract(raw, |g: &InsightGraph| {
            if g.questions.is_empty() {
                return Err("no questions".to_string());
            }
            g.validate()
        })
    };
    gateway
        .request(AgentRole::InitialRespondent, "insights", "insight graph", GRAPH_SCHEMA, vec![ChatMessage::user(prompt)], parse)
        .await
        .map_err(|e| match e {
            GatewayError::Unparseable { detail, .. } => InsightError::Extraction(detail),
            other => InsightError::Gateway(other),
        })
}

/// Escapes text for a quoted Mermaid label using numeric entity codes.
pub fn escape_label(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '#' | '"' | '|' | '<' | '>' | '`' | '\n' | '\r' => {
                let _ = write!(out, "#{};", c as u32);
            }
            _ => out.push(c),
        }
    }
    out
}

pub const MERMAID_HEADER: &str = "flowchart TD\n    classDef yellowNode fill:#F7E7A1,stroke:#C9A227,color:#3A3000\n    classDef greenNode fill:#BBE5B3,stroke:#4E9A48,color:#0F3A0B\n";

/// Renders the graph as a Mermaid flowchart. Node ids are `Q<i>N<j>`
/// (1-based), one subgraph per question.
pub fn to_mermaid(g: &InsightGraph) -> String {
    let mut out = String::from(MERMAID_HEADER);
    for (qi, q) in g.questions.iter().enumerate() {
        let qn = qi + 1;
        let _ = writeln!(out, "    subgraph Q{qn}[\"{}\"]", escape_label(&q.question));
        let ids: HashMap<&str, String> = q.nodes.iter().enumerate().map(|(j, n)| (n.id.as_str(), format!("Q{qn}N{}", j + 1))).collect();
        for node in &q.nodes {
            let _ = writeln!(out, "        {}[\"{}\"]:::{}", ids[node.id.as_str()], escape_label(&node.label), node.kind.class());
        }
        for edge in &q.edges {
            let _ = writeln!(out, "        {} -->|{}| {}", ids[edge.from.as_str()], escape_label(&edge.operation), ids[edge.to.as_str()]);
        }
        out.push_str("    end\n");
    }
    out
}

/// Distinct alphanumeric tokens, lowercased char by char.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

/// Cell sharing the most tokens with `label`; ties go to the latest cell.
pub fn lexical_match(nb: &Notebook, label: &str) -> Option<String> {
    let wanted = tokens(label);
    let mut best: Option<(usize, &str)> = None;
    for cell in &nb.cells {
        let text = format!("{}\n{}", cell.source, cell.output_text());
        let score = tokens(&text).intersection(&wanted).count();
        if best.is_none_or(|(s, _)| score >= s) {
            best = Some((score, &cell.id));
        }
    }
    best.map(|(_, id)| id.to_string())
}

#[derive(Deserialize)]
struct CellPick {
    cell_id: String,
}

/// Cell most relevant to `element`. The model's pick is used when it names
/// a cell of `nb`; otherwise the lexical match.
pub async fn resolve_cell(
    gateway: &Gateway,
    prompts: &PromptAssets,
    g: &InsightGraph,
    element: &GraphElement,
    nb: &Notebook,
    context_budget: usize,
) -> Result<String, InsightError> {
    let description = element.describe(g).ok_or_else(|| InsightError::UnknownElement(format!("{element:?}")))?;
    let label = element.label(g).unwrap_or_default();
    match nb.cells.as_slice() {
        [] => return Err(InsightError::EmptyNotebook),
        [only] => return Ok(only.id.clone()),
        _ => {}
    }
    let prompt = prompts.render(
        "resolve",
        &[("element", &description), ("notebook_context", &render_context(nb, context_budget))],
    );
    let picked = match gateway.complete(AgentRole::InitialRespondent, "resolve", &[ChatMessage::user(prompt)]).await {
        Ok(raw) => structured::extract(&raw, |p: &CellPick| {
            nb.cell(&p.cell_id).map(|_| ()).ok_or_else(|| format!("no cell {}", p.cell_id))
        })
        .ok()
        .map(|p| p.cell_id),
        Err(e) => {
            tracing::warn!("resolve call failed, using lexical match: {e}");
            None
        }
    };
    Ok(picked.unwrap_or_else(|| lexical_match(nb, label).expect("notebook is nonempty")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, kind: NodeKind) -> InsightNode {
        InsightNode { id: id.into(), label: format!("label {id}"), kind }
    }

    fn edge(from: &str, to: &str) -> InsightEdge {
        InsightEdge { from: from.into(), to: to.into(), operation: "op".into() }
    }

    fn question(nodes: &[&str], edges: &[(&str, &str)]) -> QuestionGraph {
        QuestionGraph {
            question: "q".into(),
            nodes: nodes.iter().map(|n| node(n, NodeKind::DataDerived)).collect(),
            edges: edges.iter().map(|(a, b)| edge(a, b)).collect(),
        }
    }

    #[test]
    fn cycles_and_bad_edges_rejected() {
        assert!(question(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("a", "c")]).validate().is_ok());
        assert!(question(&["a", "b"], &[("a", "b"), ("b", "a")]).validate().unwrap_err().contains("cycle"));
        assert!(question(&["a"], &[("a", "a")]).validate().unwrap_err().contains("self-loop"));
        assert!(question(&["a"], &[("a", "z")]).validate().is_err());
        assert!(question(&["a", "a"], &[]).validate().unwrap_err().contains("duplicate"));
    }

    #[test]
    fn empty_graph_is_header_only() {
        assert_eq!(to_mermaid(&InsightGraph::default()), MERMAID_HEADER);
    }

    #[test]
    fn single_edge_line() {
        let g = InsightGraph { questions: vec![question(&["a", "b"], &[("a", "b")])] };
        let text = to_mermaid(&g);
        let edges: Vec<&str> = text.lines().filter(|l| l.contains("-->")).map(str::trim).collect();
        assert_eq!(edges, ["Q1N1 -->|op| Q1N2"]);
    }

    #[test]
    fn labels_escape_grammar_characters() {
        assert_eq!(escape_label("a \"b\" | #1\n<x>"), "a #34;b#34; #124; #35;1#10;#60;x#62;");
    }

    #[test]
    fn lexical_ties_go_to_latest() {
        let mut nb = Notebook::new();
        use crate::notebook::{CellKind, Provenance};
        nb.append_cell(CellKind::Code, "gap by industry", Provenance::User);
        let last = nb.append_cell(CellKind::Code, "industry gap", Provenance::User);
        assert_eq!(lexical_match(&nb, "Gap per Industry").unwrap(), last);
        assert_eq!(lexical_match(&nb, "zzz").unwrap(), last);
    }
}
