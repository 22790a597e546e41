//! Segmentation of a post body into prose and `<pre><code>` blocks.
//!
//! Post bodies are HTML fragments, not well-formed XML, so this is a small
//! tolerant scanner rather than a parser.

const BLOCK_TAGS: &[&str] = &[
    "p", "div", "br", "li", "ul", "ol", "blockquote", "h1", "h2", "h3", "h4", "h5", "h6", "hr",
    "table", "tr", "td", "th", "pre", "dl", "dt", "dd",
];

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub(crate) struct Segments {
    /// Raw text of every `<pre><code>` block, entities decoded, in order.
    pub code_blocks: Vec<String>,
    /// Everything else with tags stripped, entities decoded and whitespace
    /// collapsed to single spaces.
    pub description: String,
}

struct Tag<'a> {
    name: &'a str,
    closing: bool,
}

/// Parses the tag starting at `s[0] == '<'`. Returns the tag and its byte
/// length, or `None` if this `<` does not open a tag.
fn parse_tag(s: &str) -> Option<(Tag<'_>, usize)> {
    let bytes = s.as_bytes();
    let mut i = 1;
    let closing = bytes.get(i) == Some(&b'/');
    if closing {
        i += 1;
    }
    let name_start = i;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'!' || bytes[i] == b'-') {
        i += 1;
    }
    if i == name_start {
        return None;
    }
    let name = &s[name_start..i];
    let mut quote = None;
    while i < bytes.len() {
        match (quote, bytes[i]) {
            (None, b'>') => return Some((Tag { name, closing }, i + 1)),
            (None, q @ (b'"' | b'\'')) => quote = Some(q),
            (Some(q), c) if c == q => quote = None,
            _ => {}
        }
        i += 1;
    }
    None
}

pub(crate) fn segment(html: &str) -> Segments {
    let mut desc = String::new();
    let mut blocks = Vec::new();
    let mut in_pre = false;
    let mut code: Option<String> = None;
    let mut rest = html;

    while !rest.is_empty() {
        let Some(lt) = rest.find('<') else {
            push_text(&mut desc, &mut code, rest);
            break;
        };
        push_text(&mut desc, &mut code, &rest[..lt]);
        rest = &rest[lt..];
        let Some((tag, len)) = parse_tag(rest) else {
            push_text(&mut desc, &mut code, "<");
            rest = &rest[1..];
            continue;
        };
        rest = &rest[len..];
        let name = tag.name.to_ascii_lowercase();
        match (name.as_str(), tag.closing) {
            ("pre", false) => {
                in_pre = true;
                desc.push(' ');
            }
            ("pre", true) => {
                if let Some(c) = code.take() {
                    blocks.push(c);
                }
                in_pre = false;
                desc.push(' ');
            }
            ("code", false) if in_pre && code.is_none() => code = Some(String::new()),
            ("code", true) if in_pre && code.is_some() => {
                blocks.extend(code.take());
            }
            (n, _) if code.is_none() && BLOCK_TAGS.contains(&n) => desc.push(' '),
            _ => {}
        }
    }
    if let Some(c) = code {
        blocks.push(c);
    }

    Segments {
        code_blocks: blocks.iter().map(|b| decode_entities(b)).collect(),
        description: collapse_whitespace(&decode_entities(&desc)),
    }
}

fn push_text(desc: &mut String, code: &mut Option<String>, text: &str) {
    match code {
        Some(c) => c.push_str(text),
        None => desc.push_str(text),
    }
}

/// Trims a code block: leading blank lines and trailing whitespace go,
/// indentation stays.
pub(crate) fn trim_code_block(block: &str) -> &str {
    block.trim_start_matches(['\n', '\r']).trim_end()
}

pub(crate) fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Decodes the five XML entities and numeric character references. Anything
/// else is left as written.
pub(crate) fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        rest = &rest[amp..];
        let decoded = rest[1..].find(';').filter(|&end| end <= 10).and_then(|end| {
            let entity = &rest[1..1 + end];
            let c = match entity {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                _ => entity.strip_prefix('#').and_then(|num| {
                    let code = match num.strip_prefix(['x', 'X']) {
                        Some(hex) => u32::from_str_radix(hex, 16).ok(),
                        None => num.parse().ok(),
                    };
                    code.and_then(char::from_u32)
                }),
            };
            c.map(|c| (c, end + 2))
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_prose_and_code() {
        let s = segment("<p>Why NPE?</p><pre><code>int x;</code></pre>");
        assert_eq!(s.description, "Why NPE?");
        assert_eq!(s.code_blocks, vec!["int x;"]);
    }

    #[test]
    fn inline_code_stays_in_description() {
        let s = segment("<p>Call <code>foo()</code> twice</p><pre class=\"lang-js\"><code>foo();\nfoo();\n</code></pre>");
        assert_eq!(s.description, "Call foo() twice");
        assert_eq!(s.code_blocks, vec!["foo();\nfoo();\n"]);
    }

    #[test]
    fn entities_decoded_in_both_parts() {
        let s = segment("<p>a &lt; b &amp;&amp; c&#39;s &#x263A;</p><pre><code>if (a &lt; b) {}</code></pre>");
        assert_eq!(s.description, "a < b && c's \u{263A}");
        assert_eq!(s.code_blocks, vec!["if (a < b) {}"]);
    }

    #[test]
    fn unknown_entity_and_stray_lt_kept() {
        assert_eq!(decode_entities("a &nbsp; b & c"), "a &nbsp; b & c");
        let s = segment("<p>x < y</p>");
        assert_eq!(s.description, "x < y");
    }

    #[test]
    fn pre_without_code_is_prose() {
        let s = segment("<pre>plain</pre><p>text</p>");
        assert!(s.code_blocks.is_empty());
        assert_eq!(s.description, "plain text");
    }

    #[test]
    fn tags_inside_code_are_stripped() {
        let s = segment("<pre><code>a <b>bold</b> c</code></pre>");
        assert_eq!(s.code_blocks, vec!["a bold c"]);
    }

    #[test]
    fn paragraphs_do_not_glue_words() {
        let s = segment("<p>first</p><p>second<br/>third</p>");
        assert_eq!(s.description, "first second third");
    }

    #[test]
    fn trims_code_block_edges() {
        assert_eq!(trim_code_block("\n\n    x = 1\n  \n"), "    x = 1");
    }
}
