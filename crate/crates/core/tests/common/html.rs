//! Minimal reader for exported story pages: recovers each block's text and
//! the marks inside it, with char offsets into the recovered text.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mark {
    pub start: usize,
    pub end: usize,
    pub dimension: String,
    pub title: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: String,
    pub tag: String,
    pub text: String,
    pub marks: Vec<Mark>,
    pub image_src: Option<String>,
}

fn decode(s: &str) -> String {
    let mut out = String::new();
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let end = tail.find(';').expect("unterminated entity");
        let name = &tail[1..end];
        let c = match name {
            "amp" => '&',
            "lt" => '<',
            "gt" => '>',
            "quot" => '"',
            "apos" => '\'',
            _ if name.starts_with('#') => char::from_u32(name[1..].parse().expect("numeric entity")).unwrap(),
            _ => panic!("unknown entity {name}"),
        };
        out.push(c);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    out
}

struct Tag {
    name: String,
    closing: bool,
    attrs: Vec<(String, String)>,
}

impl Tag {
    fn attr(&self, name: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }
}

fn parse_tag(raw: &str) -> Tag {
    let raw = raw.trim_end_matches('/');
    let (closing, raw) = match raw.strip_prefix('/') {
        Some(r) => (true, r),
        None => (false, raw),
    };
    let name_end = raw.find(char::is_whitespace).unwrap_or(raw.len());
    let name = raw[..name_end].to_ascii_lowercase();
    let mut attrs = Vec::new();
    let mut rest = raw[name_end..].trim_start();
    while !rest.is_empty() {
        let eq = rest.find('=');
        let ws = rest.find(char::is_whitespace);
        match (eq, ws) {
            (Some(e), w) if w.is_none_or(|w| e < w) => {
                let key = rest[..e].to_string();
                let after = &rest[e + 1..];
                let after = after.strip_prefix('"').expect("quoted attribute");
                let close = after.find('"').expect("closing quote");
                attrs.push((key, decode(&after[..close])));
                rest = after[close + 1..].trim_start();
            }
            (_, Some(w)) => {
                attrs.push((rest[..w].to_string(), String::new()));
                rest = rest[w..].trim_start();
            }
            (_, None) => {
                attrs.push((rest.to_string(), String::new()));
                rest = "";
            }
        }
    }
    Tag { name, closing, attrs }
}

pub fn parse(html: &str) -> Vec<Block> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut current: Option<Block> = None;
    let mut in_li = false;
    let mut li_count = 0;
    let mut open_mark: Option<Mark> = None;
    let mut rest = html;
    while !rest.is_empty() {
        if let Some(after) = rest.strip_prefix('<') {
            if let Some(comment) = after.strip_prefix("!--") {
                rest = &comment[comment.find("-->").unwrap() + 3..];
                continue;
            }
            let end = after.find('>').expect("unterminated tag");
            let tag = parse_tag(&after[..end]);
            rest = &after[end + 1..];
            match (&mut current, tag.closing) {
                (None, false) => {
                    if let Some(id) = tag.attr("data-block") {
                        let mut block = Block { id: id.to_string(), tag: tag.name.clone(), text: String::new(), marks: vec![], image_src: None };
                        if let Some(cell) = tag.attr("data-cell") {
                            block.text = cell.to_string();
                        }
                        current = Some(block);
                        li_count = 0;
                    }
                }
                (Some(block), false) => match tag.name.as_str() {
                    "li" => {
                        if li_count > 0 {
                            block.text.push('\n');
                        }
                        li_count += 1;
                        in_li = true;
                    }
                    "mark" => {
                        assert!(open_mark.is_none(), "nested mark");
                        open_mark = Some(Mark {
                            start: block.text.chars().count(),
                            end: 0,
                            dimension: tag.attr("data-dimension").unwrap_or_default().to_string(),
                            title: tag.attr("title").unwrap_or_default().to_string(),
                            class: tag.attr("class").unwrap_or_default().to_string(),
                        });
                    }
                    "img" => block.image_src = tag.attr("src").map(str::to_string),
                    other => panic!("unexpected <{other}> inside block"),
                },
                (Some(block), true) => match tag.name.as_str() {
                    "li" => in_li = false,
                    "mark" => {
                        let mut mark = open_mark.take().expect("unopened mark");
                        mark.end = block.text.chars().count();
                        block.marks.push(mark);
                    }
                    name if name == block.tag => blocks.push(current.take().unwrap()),
                    other => panic!("unexpected </{other}>"),
                },
                (None, true) => {}
            }
            continue;
        }
        let end = rest.find('<').unwrap_or(rest.len());
        if let Some(block) = current.as_mut() {
            if block.tag != "ul" || in_li {
                block.text.push_str(&decode(&rest[..end]));
            }
        }
        rest = &rest[end..];
    }
    assert!(current.is_none(), "unterminated block");
    blocks
}

/// Number of `<mark` elements anywhere in the page.
pub fn count_marks(html: &str) -> usize {
    html.matches("<mark").count()
}
