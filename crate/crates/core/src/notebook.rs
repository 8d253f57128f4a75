//! Canonical notebook document with lossless nbformat v4 read/write.
//!
//! Cells carry a provenance tag (`user` or `assistant`) stored in cell
//! metadata under [`PROVENANCE_KEY`], so third-party tools keep it intact.
//! Parsing normalizes the file: sources become single strings, text mime
//! payloads given as line lists are joined, every cell receives an id and
//! `nbformat_minor` is raised to 5 (the first minor with cell ids). The
//! serializer writes sorted keys with one-space indentation, the same layout
//! Jupyter uses, so `serialize(parse(x))` is a fixed point after one pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Cell metadata key holding the provenance tag.
pub const PROVENANCE_KEY: &str = "capy_provenance";

/// Rich payloads above this size are shown to models as a placeholder.
pub const RICH_PLACEHOLDER_BYTES: usize = 64 * 1024;

const OUTPUT_CHARS_PER_ITEM: usize = 2_000;

#[derive(Debug, Error)]
pub enum NotebookError {
    #[error("malformed notebook file: {0}")]
    MalformedFile(String),
    #[error("unsupported nbformat major version {0} (only 4 is supported)")]
    UnsupportedVersion(u64),
}

fn malformed(msg: impl Into<String>) -> NotebookError {
    NotebookError::MalformedFile(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Code,
    Markdown,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Code => "code",
            CellKind::Markdown => "markdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    User,
    Assistant,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::User => "user",
            Provenance::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamName {
    Stdout,
    Stderr,
}

/// Mime type to payload. Text payloads are strings; JSON payloads stay values.
pub type MimeBundle = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "output_type", rename_all = "snake_case")]
pub enum Output {
    Stream {
        name: StreamName,
        text: String,
    },
    DisplayData {
        data: MimeBundle,
        #[serde(default)]
        metadata: Map<String, Value>,
    },
    ExecuteResult {
        data: MimeBundle,
        #[serde(default)]
        metadata: Map<String, Value>,
        execution_count: Option<u64>,
    },
    Error {
        ename: String,
        evalue: String,
        #[serde(default)]
        traceback: Vec<String>,
    },
}

impl Output {
    pub fn stdout(text: impl Into<String>) -> Self {
        Output::Stream { name: StreamName::Stdout, text: text.into() }
    }

    pub fn stderr(text: impl Into<String>) -> Self {
        Output::Stream { name: StreamName::Stderr, text: text.into() }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, Output::Error { .. })
    }

    /// Mime bundle of rich outputs.
    pub fn data(&self) -> Option<&MimeBundle> {
        match self {
            Output::DisplayData { data, .. } | Output::ExecuteResult { data, .. } => Some(data),
            _ => None,
        }
    }

    /// Base64 PNG payload, if this output carries one.
    pub fn png(&self) -> Option<&str> {
        self.data()?.get("image/png")?.as_str()
    }

    fn from_json(value: Value) -> Result<Self, NotebookError> {
        let mut value = value;
        if let Some(obj) = value.as_object_mut() {
            if let Some(Value::Array(_)) = obj.get("text") {
                let joined = join_lines(obj.get("text").unwrap());
                obj.insert("text".into(), Value::String(joined));
            }
            if let Some(Value::Object(data)) = obj.get_mut("data") {
                for payload in data.values_mut() {
                    if is_line_list(payload) {
                        *payload = Value::String(join_lines(payload));
                    }
                }
            }
        }
        let output: Output =
            serde_json::from_value(value).map_err(|e| malformed(format!("output: {e}")))?;
        if let Some(data) = output.data() {
            if data.is_empty() || data.keys().any(|k| k.is_empty()) {
                return Err(malformed("rich output without a mime type"));
            }
        }
        Ok(output)
    }
}

fn is_line_list(value: &Value) -> bool {
    matches!(value, Value::Array(items) if items.iter().all(Value::is_string))
}

fn join_lines(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().filter_map(Value::as_str).collect(),
        _ => String::new(),
    }
}

fn split_lines(text: &str) -> Value {
    Value::Array(text.split_inclusive('\n').map(|l| Value::String(l.to_string())).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub kind: CellKind,
    pub source: String,
    pub outputs: Vec<Output>,
    pub provenance: Provenance,
    pub execution_count: Option<u64>,
    /// Cell metadata minus the provenance key.
    pub metadata: Map<String, Value>,
    /// Unrecognized top-level cell fields, kept verbatim.
    pub extra: Map<String, Value>,
}

impl Cell {
    /// Concatenated text of stream and text/plain outputs.
    pub fn output_text(&self) -> String {
        let mut text = String::new();
        for output in &self.outputs {
            match output {
                Output::Stream { text: t, .. } => text.push_str(t),
                Output::Error { ename, evalue, .. } => {
                    let _ = writeln!(text, "{ename}: {evalue}");
                }
                other => {
                    if let Some(plain) = other.data().and_then(|d| d.get("text/plain")) {
                        text.push_str(&join_lines(plain));
                        text.push('\n');
                    }
                }
            }
        }
        text
    }

    pub fn has_image(&self) -> bool {
        self.outputs.iter().any(|o| o.png().is_some())
    }
}

#[derive(Debug, Clone)]
pub struct Notebook {
    pub cells: Vec<Cell>,
    pub nbformat_minor: u64,
    /// Notebook-level metadata, retained verbatim.
    pub metadata: Map<String, Value>,
    /// Unrecognized top-level fields, retained verbatim.
    pub extra: Map<String, Value>,
    next_id: u64,
}

impl PartialEq for Notebook {
    fn eq(&self, other: &Self) -> bool {
        self.cells == other.cells
            && self.nbformat_minor == other.nbformat_minor
            && self.metadata == other.metadata
            && self.extra == other.extra
    }
}

impl Default for Notebook {
    fn default() -> Self {
        Notebook {
            cells: Vec::new(),
            nbformat_minor: 5,
            metadata: Map::new(),
            extra: Map::new(),
            next_id: 1,
        }
    }
}

impl Notebook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, id: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn cell_mut(&mut self, id: &str) -> Option<&mut Cell> {
        self.cells.iter_mut().find(|c| c.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.cells.iter().position(|c| c.id == id)
    }

    /// Kernel language from `language_info.name` or `kernelspec.language`,
    /// defaulting to python.
    pub fn kernel_language(&self) -> &str {
        let from = |outer: &str, inner: &str| {
            self.metadata.get(outer)?.get(inner)?.as_str()
        };
        from("language_info", "name")
            .or_else(|| from("kernelspec", "language"))
            .unwrap_or("python")
    }

    pub fn set_kernel_language(&mut self, language: &str) {
        let info = self
            .metadata
            .entry("language_info")
            .or_insert_with(|| Value::Object(Map::new()));
        if !info.is_object() {
            *info = Value::Object(Map::new());
        }
        info.as_object_mut()
            .unwrap()
            .insert("name".into(), Value::String(language.into()));
    }

    /// Appends a cell at the end and returns its fresh id.
    pub fn append_cell(
        &mut self,
        kind: CellKind,
        source: impl Into<String>,
        provenance: Provenance,
    ) -> String {
        let id = format!("cell-{}", self.next_id);
        self.next_id += 1;
        self.cells.push(Cell {
            id: id.clone(),
            kind,
            source: source.into(),
            outputs: Vec::new(),
            provenance,
            execution_count: None,
            metadata: Map::new(),
            extra: Map::new(),
        });
        id
    }

    /// Largest execution count present, used to number the next execution.
    pub fn max_execution_count(&self) -> u64 {
        self.cells.iter().filter_map(|c| c.execution_count).max().unwrap_or(0)
    }

    /// Latest PNG output in document order, searching backwards.
    pub fn latest_png(&self) -> Option<&str> {
        self.cells
            .iter()
            .rev()
            .flat_map(|c| c.outputs.iter().rev())
            .find_map(Output::png)
    }

    fn recompute_next_id(&mut self) {
        let max = self
            .cells
            .iter()
            .filter_map(|c| c.id.strip_prefix("cell-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        self.next_id = max + 1;
    }
}

/// Parses an nbformat v4 JSON document.
pub fn parse_notebook(bytes: &[u8]) -> Result<Notebook, NotebookError> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
    let Value::Object(mut root) = root else {
        return Err(malformed("top level is not an object"));
    };
    let major = root
        .remove("nbformat")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing nbformat"))?;
    if major != 4 {
        return Err(NotebookError::UnsupportedVersion(major));
    }
    let minor = root.remove("nbformat_minor").and_then(|v| v.as_u64()).unwrap_or(0);
    let metadata = match root.remove("metadata") {
        Some(Value::Object(m)) => m,
        None => Map::new(),
        Some(_) => return Err(malformed("metadata is not an object")),
    };
    let raw_cells = match root.remove("cells") {
        Some(Value::Array(cells)) => cells,
        None => Vec::new(),
        Some(_) => return Err(malformed("cells is not an array")),
    };

    let mut cells = Vec::with_capacity(raw_cells.len());
    for (index, raw) in raw_cells.into_iter().enumerate() {
        cells.push(parse_cell(raw).map_err(|e| match e {
            NotebookError::MalformedFile(m) => malformed(format!("cell {index}: {m}")),
            other => other,
        })?);
    }

    let mut nb = Notebook {
        cells,
        nbformat_minor: minor.max(5),
        metadata,
        extra: root,
        next_id: 1,
    };
    nb.recompute_next_id();

    // Assign ids to cells that had none (nbformat < 4.5) or duplicates.
    let mut seen = std::collections::HashSet::new();
    for i in 0..nb.cells.len() {
        if nb.cells[i].id.is_empty() || !seen.insert(nb.cells[i].id.clone()) {
            let id = format!("cell-{}", nb.next_id);
            nb.next_id += 1;
            seen.insert(id.clone());
            nb.cells[i].id = id;
        }
    }
    Ok(nb)
}

fn parse_cell(raw: Value) -> Result<Cell, NotebookError> {
    let Value::Object(mut obj) = raw else {
        return Err(malformed("cell is not an object"));
    };
    let kind = match obj.remove("cell_type").as_ref().and_then(Value::as_str) {
        Some("code") => CellKind::Code,
        Some("markdown") => CellKind::Markdown,
        Some(other) => return Err(malformed(format!("unsupported cell_type {other:?}"))),
        None => return Err(malformed("missing cell_type")),
    };
    let source = match obj.remove("source") {
        Some(v @ (Value::String(_) | Value::Array(_))) => join_lines(&v),
        None => String::new(),
        Some(_) => return Err(malformed("source must be a string or list")),
    };
    let id = match obj.remove("id") {
        Some(Value::String(s)) => s,
        _ => String::new(),
    };
    let mut metadata = match obj.remove("metadata") {
        Some(Value::Object(m)) => m,
        None => Map::new(),
        Some(_) => return Err(malformed("cell metadata is not an object")),
    };
    let provenance = match metadata.remove(PROVENANCE_KEY).as_ref().and_then(Value::as_str) {
        Some("assistant") => Provenance::Assistant,
        _ => Provenance::User,
    };
    let (outputs, execution_count) = if kind == CellKind::Code {
        let outputs = match obj.remove("outputs") {
            Some(Value::Array(items)) => {
                items.into_iter().map(Output::from_json).collect::<Result<Vec<_>, _>>()?
            }
            None => Vec::new(),
            Some(_) => return Err(malformed("outputs is not an array")),
        };
        let count = obj.remove("execution_count").and_then(|v| v.as_u64());
        (outputs, count)
    } else {
        obj.remove("outputs");
        obj.remove("execution_count");
        (Vec::new(), None)
    };
    Ok(Cell { id, kind, source, outputs, provenance, execution_count, metadata, extra: obj })
}

/// Serializes to nbformat v4 JSON (sorted keys, one-space indent, trailing newline).
pub fn serialize_notebook(nb: &Notebook) -> Vec<u8> {
    let mut root = nb.extra.clone();
    root.insert("nbformat".into(), Value::from(4u64));
    root.insert("nbformat_minor".into(), Value::from(nb.nbformat_minor));
    root.insert("metadata".into(), Value::Object(nb.metadata.clone()));
    root.insert("cells".into(), Value::Array(nb.cells.iter().map(cell_to_json).collect()));

    let mut out = Vec::new();
    let formatter = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, formatter);
    Value::Object(root).serialize(&mut ser).expect("in-memory JSON serialization");
    out.push(b'\n');
    out
}

fn cell_to_json(cell: &Cell) -> Value {
    let mut obj = cell.extra.clone();
    obj.insert("id".into(), Value::String(cell.id.clone()));
    obj.insert("cell_type".into(), Value::String(cell.kind.as_str().into()));
    obj.insert("source".into(), split_lines(&cell.source));
    let mut metadata = cell.metadata.clone();
    if cell.provenance == Provenance::Assistant {
        metadata.insert(PROVENANCE_KEY.into(), Value::String("assistant".into()));
    }
    obj.insert("metadata".into(), Value::Object(metadata));
    if cell.kind == CellKind::Code {
        let outputs = cell
            .outputs
            .iter()
            .map(|o| serde_json::to_value(o).expect("output serializes"))
            .collect();
        obj.insert("outputs".into(), Value::Array(outputs));
        obj.insert(
            "execution_count".into(),
            cell.execution_count.map(Value::from).unwrap_or(Value::Null),
        );
    }
    Value::Object(obj)
}

fn truncate_chars(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        None => text.to_string(),
        Some((cut, _)) => {
            let dropped = text[cut..].chars().count();
            format!("{}… [{dropped} more chars]", &text[..cut])
        }
    }
}

fn render_output(output: &Output, out: &mut String) {
    match output {
        Output::Stream { name, text } => {
            let tag = match name {
                StreamName::Stdout => "stdout",
                StreamName::Stderr => "stderr",
            };
            let _ = writeln!(out, "[{tag}]\n{}", truncate_chars(text, OUTPUT_CHARS_PER_ITEM));
        }
        Output::Error { ename, evalue, .. } => {
            let _ = writeln!(out, "[error] {ename}: {evalue}");
        }
        Output::DisplayData { data, .. } | Output::ExecuteResult { data, .. } => {
            for (mime, payload) in data {
                let text = match payload {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                if mime.starts_with("image/") || text.len() > RICH_PLACEHOLDER_BYTES {
                    let _ = writeln!(out, "[{mime}: {} bytes]", text.len());
                } else if mime == "text/plain" {
                    let _ = writeln!(out, "[result]\n{}", truncate_chars(&text, OUTPUT_CHARS_PER_ITEM));
                }
            }
        }
    }
}

fn render_cell(index: usize, cell: &Cell) -> String {
    let mut out = format!(
        "### Cell {} ({}, {}, id={})\n{}\n",
        index + 1,
        cell.kind.as_str(),
        cell.provenance.as_str(),
        cell.id,
        cell.source
    );
    if !cell.outputs.is_empty() {
        out.push_str("Outputs:\n");
        for output in &cell.outputs {
            render_output(output, &mut out);
        }
    }
    out
}

fn elided_marker(index: usize, cell: &Cell) -> String {
    format!("### Cell {} ({}, id={}) [elided]\n", index + 1, cell.kind.as_str(), cell.id)
}

/// Renders the notebook as prompt context of at most `budget` characters.
///
/// Oldest cell bodies are elided first. The last cell is kept whole whenever
/// its own rendering fits in the budget.
pub fn render_context(nb: &Notebook, budget: usize) -> String {
    let full: Vec<String> = nb.cells.iter().enumerate().map(|(i, c)| render_cell(i, c)).collect();
    let len = |parts: &[String]| parts.iter().map(|p| p.chars().count()).sum::<usize>();
    if len(&full) <= budget {
        return full.concat();
    }

    let n = full.len();
    let mut parts = full.clone();
    for i in 0..n.saturating_sub(1) {
        parts[i] = elided_marker(i, &nb.cells[i]);
        if len(&parts) <= budget {
            return parts.concat();
        }
    }

    // Collapse all elision markers into one line.
    let last = &full[n - 1];
    let collapsed = if n > 1 {
        format!("[{} earlier cells elided]\n", n - 1)
    } else {
        String::new()
    };
    let with_marker = format!("{collapsed}{last}");
    if with_marker.chars().count() <= budget {
        return with_marker;
    }
    if last.chars().count() <= budget {
        return last.clone();
    }
    // The last cell alone exceeds the budget: hard cut.
    last.chars().take(budget).collect()
}
