//! Reduction of HTML and Markdown to plain text.
//!
//! Both reducers emit paragraphs separated by one blank line. Inline
//! whitespace is collapsed, line breaks inside a paragraph are kept as
//! single newlines and empty lines never appear inside a paragraph.

use pulldown_cmark::{Event, Options, Parser, Tag, TagEnd};

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "aside", "blockquote", "body", "dd", "details", "div", "dl", "dt",
    "figcaption", "figure", "footer", "form", "h1", "h2", "h3", "h4", "h5", "h6", "head",
    "header", "hr", "html", "li", "main", "nav", "ol", "p", "pre", "section", "summary", "table",
    "tbody", "thead", "tfoot", "title", "tr", "ul",
];

const CELL_TAGS: &[&str] = &["td", "th"];
const SKIP_TAGS: &[&str] = &["script", "style", "template", "noscript"];

#[derive(Default)]
struct TextSink {
    paragraphs: Vec<String>,
    current: String,
}

impl TextSink {
    fn text(&mut self, s: &str) {
        self.current.push_str(s);
    }

    fn line_break(&mut self) {
        self.current.push('\n');
    }

    fn block_break(&mut self) {
        let para = self
            .current
            .split('\n')
            .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|line| !line.is_empty())
            .collect::<Vec<_>>()
            .join("\n");
        if !para.is_empty() {
            self.paragraphs.push(para);
        }
        self.current.clear();
    }

    fn finish(mut self) -> String {
        self.block_break();
        self.paragraphs.join("\n\n")
    }
}

/// Strips tags, drops script/style bodies and decodes common entities.
pub fn html_to_text(html: &str) -> String {
    let mut sink = TextSink::default();
    let mut rest = html;
    while let Some(lt) = rest.find('<') {
        sink.text(&collapse_inline(&decode_entities(&rest[..lt])));
        rest = &rest[lt..];
        if let Some(after) = rest.strip_prefix("<!--") {
            rest = match after.find("-->") {
                Some(end) => &after[end + 3..],
                None => "",
            };
            continue;
        }
        let Some(gt) = rest.find('>') else {
            // Unterminated tag: treat the remainder as text.
            sink.text(&collapse_inline(&decode_entities(rest)));
            rest = "";
            break;
        };
        let inner = &rest[1..gt];
        rest = &rest[gt + 1..];
        if inner.starts_with('!') || inner.starts_with('?') {
            continue;
        }
        let closing = inner.starts_with('/');
        let name: String = inner
            .trim_start_matches('/')
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        if name.is_empty() {
            continue;
        }
        if !closing && SKIP_TAGS.contains(&name.as_str()) && !inner.ends_with('/') {
            let close = format!("</{name}");
            let lower = rest.to_ascii_lowercase();
            rest = match lower.find(&close) {
                Some(pos) => match rest[pos..].find('>') {
                    Some(end) => &rest[pos + end + 1..],
                    None => "",
                },
                None => "",
            };
            continue;
        }
        if name == "br" {
            sink.line_break();
        } else if BLOCK_TAGS.contains(&name.as_str()) {
            sink.block_break();
        } else if CELL_TAGS.contains(&name.as_str()) {
            sink.text(" ");
        }
    }
    sink.text(&collapse_inline(&decode_entities(rest)));
    sink.finish()
}

/// Source newlines inside HTML text are ordinary whitespace.
fn collapse_inline(s: &str) -> String {
    s.replace(['\n', '\r', '\t'], " ")
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let decoded = rest[1..].find(';').filter(|&end| end <= 10).and_then(|end| {
            let name = &rest[1..1 + end];
            let ch = match name {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                _ => {
                    if let Some(hex) = name.strip_prefix("#x").or_else(|| name.strip_prefix("#X")) {
                        u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
                    } else if let Some(dec) = name.strip_prefix('#') {
                        dec.parse::<u32>().ok().and_then(char::from_u32)
                    } else {
                        None
                    }
                }
            };
            ch.map(|c| (c, end + 2))
        });
        match decoded {
            Some((c, len)) => {
                out.push(c);
                rest = &rest[len..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Renders Markdown to plain text, one paragraph per block element.
pub fn markdown_to_text(md: &str) -> String {
    let mut sink = TextSink::default();
    let parser = Parser::new_ext(md, Options::ENABLE_TABLES | Options::ENABLE_STRIKETHROUGH);
    for event in parser {
        match event {
            Event::Text(t) | Event::Code(t) => sink.text(&t),
            Event::SoftBreak | Event::HardBreak => sink.line_break(),
            Event::Start(Tag::Paragraph | Tag::Heading { .. } | Tag::Item | Tag::CodeBlock(_) | Tag::TableRow | Tag::TableHead)
            | Event::End(
                TagEnd::Paragraph
                | TagEnd::Heading(_)
                | TagEnd::Item
                | TagEnd::CodeBlock
                | TagEnd::BlockQuote
                | TagEnd::TableRow
                | TagEnd::TableHead
                | TagEnd::List(_),
            )
            | Event::Rule => sink.block_break(),
            Event::End(TagEnd::TableCell) => sink.text(" "),
            Event::Html(h) | Event::InlineHtml(h) => {
                let text = html_to_text(&h);
                if !text.is_empty() {
                    sink.text(&text);
                }
            }
            _ => {}
        }
    }
    sink.finish()
}
