//! Parser for the flowchart subset emitted by the insight renderer.
//! Any line outside the subset is an error.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuestion {
    pub title: String,
    /// (id, label, class)
    pub nodes: Vec<(String, String, String)>,
    /// (from, operation, to)
    pub edges: Vec<(String, String, String)>,
}

fn decode(text: &str) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(pos) = rest.find('#') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 1..];
        let end = tail.find(';').ok_or_else(|| format!("unterminated entity in {text:?}"))?;
        let code: u32 = tail[..end].parse().map_err(|_| format!("bad entity in {text:?}"))?;
        out.push(char::from_u32(code).ok_or("bad code point")?);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn quoted(s: &str) -> Result<(String, &str), String> {
    let s = s.strip_prefix("[\"").ok_or_else(|| format!("expected [\" in {s:?}"))?;
    let end = s.find("\"]").ok_or_else(|| format!("expected \"] in {s:?}"))?;
    let body = &s[..end];
    if body.contains('"') || body.contains('|') {
        return Err(format!("raw grammar character in label {body:?}"));
    }
    Ok((decode(body)?, &s[end + 2..]))
}

fn ident(s: &str) -> Result<(&str, &str), String> {
    let end = s.find(|c: char| !c.is_ascii_alphanumeric()).unwrap_or(s.len());
    if end == 0 {
        return Err(format!("expected identifier in {s:?}"));
    }
    Ok((&s[..end], &s[end..]))
}

pub fn parse(text: &str) -> Result<Vec<ParsedQuestion>, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("flowchart TD") {
        return Err("missing flowchart TD header".into());
    }
    let mut questions: Vec<ParsedQuestion> = Vec::new();
    let mut open: Option<ParsedQuestion> = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("classDef ") {
            let (name, _) = ident(rest)?;
            if name != "yellowNode" && name != "greenNode" {
                return Err(format!("unexpected class {name}"));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("subgraph ") {
            if open.is_some() {
                return Err("nested subgraph".into());
            }
            let (_, rest) = ident(rest)?;
            let (title, rest) = quoted(rest)?;
            if !rest.is_empty() {
                return Err(format!("trailing text {rest:?}"));
            }
            open = Some(ParsedQuestion { title, nodes: vec![], edges: vec![] });
            continue;
        }
        if line == "end" {
            let q = open.take().ok_or("end without subgraph")?;
            for (from, _, to) in &q.edges {
                for id in [from, to] {
                    if !q.nodes.iter().any(|(n, _, _)| n == id) {
                        return Err(format!("edge references undefined node {id}"));
                    }
                }
            }
            questions.push(q);
            continue;
        }
        let q = open.as_mut().ok_or_else(|| format!("statement outside subgraph: {line}"))?;
        let (id, rest) = ident(line)?;
        if let Some(rest) = rest.strip_prefix(" -->|") {
            let end = rest.find("| ").ok_or("unterminated edge label")?;
            let op = decode(&rest[..end])?;
            let (to, tail) = ident(&rest[end + 2..])?;
            if !tail.is_empty() {
                return Err(format!("trailing text {tail:?}"));
            }
            q.edges.push((id.to_string(), op, to.to_string()));
        } else {
            let (label, rest) = quoted(rest)?;
            let class = rest.strip_prefix(":::").ok_or("missing class")?;
            if class != "yellowNode" && class != "greenNode" {
                return Err(format!("unexpected class {class}"));
            }
            if q.nodes.iter().any(|(n, _, _)| n == id) {
                return Err(format!("node {id} defined twice"));
            }
            q.nodes.push((id.to_string(), label, class.to_string()));
        }
    }
    if open.is_some() {
        return Err("unterminated subgraph".into());
    }
    Ok(questions)
}
