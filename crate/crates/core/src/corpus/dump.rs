//! Streaming reader for the Stack Exchange `Posts.xml` row format.

use std::io::BufRead;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{CorpusError, PostType, RawPost};

/// Iterator over the question rows of a posts dump.
///
/// Holds one row in memory at a time. Rows that are not questions are
/// passed over silently; question rows missing a required attribute are
/// skipped and counted in [`DumpReader::skipped`].
pub struct DumpReader<R: BufRead> {
    reader: Reader<R>,
    buf: Vec<u8>,
    depth: usize,
    rows: u64,
    skipped: u64,
    done: bool,
}

impl<R: BufRead> DumpReader<R> {
    pub fn new(input: R) -> Self {
        let mut reader = Reader::from_reader(input);
        reader.config_mut().check_end_names = true;
        Self {
            reader,
            buf: Vec::with_capacity(64 * 1024),
            depth: 0,
            rows: 0,
            skipped: 0,
            done: false,
        }
    }

    /// Number of `row` elements seen so far, of any post type.
    pub fn rows_seen(&self) -> u64 {
        self.rows
    }

    /// Question rows dropped for missing or malformed attributes.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    fn next_post(&mut self) -> Result<Option<RawPost>, CorpusError> {
        loop {
            self.buf.clear();
            let event = match self.reader.read_event_into(&mut self.buf) {
                Ok(ev) => ev,
                Err(e) => {
                    return Err(CorpusError::Xml {
                        offset: self.reader.error_position(),
                        message: e.to_string(),
                    })
                }
            };
            match event {
                Event::Start(e) => {
                    let is_row = e.local_name().as_ref() == b"row";
                    self.depth += 1;
                    if is_row {
                        self.rows += 1;
                        let parsed = row_to_post(&e);
                        if let Some(post) = self.accept(parsed) {
                            return Ok(Some(post));
                        }
                    }
                }
                Event::Empty(e) => {
                    if e.local_name().as_ref() == b"row" {
                        self.rows += 1;
                        let parsed = row_to_post(&e);
                        if let Some(post) = self.accept(parsed) {
                            return Ok(Some(post));
                        }
                    }
                }
                Event::End(_) => self.depth = self.depth.saturating_sub(1),
                Event::Eof => {
                    if self.depth > 0 {
                        return Err(CorpusError::Xml {
                            offset: self.reader.buffer_position(),
                            message: "unexpected end of input inside an open element".into(),
                        });
                    }
                    return Ok(None);
                }
                _ => {}
            }
        }
    }

    fn accept(&mut self, parsed: RowParse) -> Option<RawPost> {
        match parsed {
            RowParse::Question(p) => Some(p),
            RowParse::NotQuestion => None,
            RowParse::Invalid => {
                self.skipped += 1;
                None
            }
        }
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<RawPost, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_post() {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Convenience wrapper: a streaming iterator over question posts.
pub fn parse_dump<R: BufRead>(input: R) -> DumpReader<R> {
    DumpReader::new(input)
}

enum RowParse {
    Question(RawPost),
    NotQuestion,
    Invalid,
}

#[derive(Default)]
struct RowAttrs {
    id: Option<String>,
    post_type: Option<String>,
    score: Option<String>,
    accepted: Option<String>,
    tags: Option<String>,
    title: Option<String>,
    body: Option<String>,
}

fn row_to_post(e: &BytesStart<'_>) -> RowParse {
    let mut a = RowAttrs::default();
    for attr in e.attributes() {
        let Ok(attr) = attr else { return RowParse::Invalid };
        let slot = match attr.key.as_ref() {
            b"Id" => &mut a.id,
            b"PostTypeId" => &mut a.post_type,
            b"Score" => &mut a.score,
            b"AcceptedAnswerId" => &mut a.accepted,
            b"Tags" => &mut a.tags,
            b"Title" => &mut a.title,
            b"Body" => &mut a.body,
            _ => continue,
        };
        match attr.unescape_value() {
            Ok(v) => *slot = Some(v.into_owned()),
            Err(_) => return RowParse::Invalid,
        }
    }

    let post_type = match a.post_type.as_deref().map(str::parse::<u32>) {
        Some(Ok(1)) => PostType::Question,
        Some(Ok(_)) => return RowParse::NotQuestion,
        _ => return RowParse::Invalid,
    };
    let id = match a.id.as_deref().map(str::parse::<u64>) {
        Some(Ok(id)) if id > 0 => id,
        _ => return RowParse::Invalid,
    };
    let Some(Ok(score)) = a.score.as_deref().map(str::parse::<i64>) else {
        return RowParse::Invalid;
    };
    let accepted_answer_id = match a.accepted.as_deref().map(str::parse::<u64>) {
        None => None,
        Some(Ok(v)) => Some(v),
        Some(Err(_)) => return RowParse::Invalid,
    };
    let (Some(title), Some(body), Some(tags)) = (a.title, a.body, a.tags) else {
        return RowParse::Invalid;
    };
    let tags = parse_tags(&tags);
    if tags.is_empty() {
        return RowParse::Invalid;
    }
    RowParse::Question(RawPost {
        id,
        post_type,
        score,
        accepted_answer_id,
        tags,
        title,
        body_html: body,
    })
}

/// Accepts both `<java><generics>` and `|java|generics|` tag encodings.
pub(crate) fn parse_tags(raw: &str) -> Vec<String> {
    raw.split(['<', '>', '|'])
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}
