//! Mining question posts into ⟨description, code, title⟩ triplets.
//!
//! The pipeline is: stream rows out of a `Posts.xml` dump ([`parse_dump`]),
//! keep questions that pass the three quality rules
//! ([`passes_quality_rules`]), split each body into prose and code
//! ([`extract_triplet`]), then shuffle into train/validation/test splits
//! ([`split_corpus`]).

mod dump;
mod html;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dump::{parse_dump, DumpReader};

use crate::par;

/// Minimum question score (Rule 1).
pub const MIN_SCORE: i64 = 5;
/// Length cutoff reported for code and description statistics.
pub const BODY_LENGTH_CUTOFF: usize = 256;
/// Length cutoff reported for title statistics.
pub const TITLE_LENGTH_CUTOFF: usize = 16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed XML at byte {offset}: {message}")]
    Xml { offset: u64, message: String },
    #[error("post {0} has no code block")]
    NoCode(u64),
    #[error("post {0} has an empty description")]
    EmptyDescription(u64),
    #[error("need {need} triplets for the requested split, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// The four tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Java,
    #[serde(rename = "csharp")]
    CSharp,
    Python,
    JavaScript,
}

impl Language {
    pub const ALL: [Language; 4] = [
        Language::Java,
        Language::CSharp,
        Language::Python,
        Language::JavaScript,
    ];

    /// Stack Overflow tag that selects this language.
    pub fn tag(self) -> &'static str {
        match self {
            Self::Java => "java",
            Self::CSharp => "c#",
            Self::Python => "python",
            Self::JavaScript => "javascript",
        }
    }

    /// Task prefix placed in front of the encoder input.
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Java => "Java: ",
            Self::CSharp => "C#: ",
            Self::Python => "Python: ",
            Self::JavaScript => "JS: ",
        }
    }

    /// Name used in file paths, CLI flags and wire formats.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Java => "java",
            Self::CSharp => "csharp",
            Self::Python => "python",
            Self::JavaScript => "javascript",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Every target language whose tag appears in `tags`.
    pub fn from_tags(tags: &[String]) -> Vec<Language> {
        Self::ALL
            .into_iter()
            .filter(|l| tags.iter().any(|t| t == l.tag()))
            .collect()
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "java" => Ok(Self::Java),
            "csharp" | "c#" | "cs" => Ok(Self::CSharp),
            "python" | "py" => Ok(Self::Python),
            "javascript" | "js" => Ok(Self::JavaScript),
            _ => Err(CorpusError::UnknownLanguage(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PostType {
    Question,
    Answer,
    Other,
}

/// One `row` of the dump, before extraction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPost {
    pub id: u64,
    pub post_type: PostType,
    pub score: i64,
    pub accepted_answer_id: Option<u64>,
    pub tags: Vec<String>,
    pub title: String,
    pub body_html: String,
}

/// A mined question post.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostTriplet {
    pub post_id: u64,
    pub language: Language,
    pub description: String,
    pub code: String,
    pub title: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<PostTriplet>,
    pub validation: Vec<PostTriplet>,
    pub test: Vec<PostTriplet>,
    pub seed: u64,
}

/// Score ≥ 5, has an accepted answer, and contains a `<pre><code>` block.
pub fn passes_quality_rules(post: &RawPost) -> bool {
    post.score >= MIN_SCORE
        && post.accepted_answer_id.is_some()
        && !html::segment(&post.body_html).code_blocks.is_empty()
}

/// Splits a qualifying post into its triplet.
///
/// Code is every `<pre><code>` block in document order joined by `\n`; the
/// description is the rest of the body as plain text. The title is kept
/// verbatim.
pub fn extract_triplet(post: &RawPost, language: Language) -> Result<PostTriplet, CorpusError> {
    let seg = html::segment(&post.body_html);
    let code = seg
        .code_blocks
        .iter()
        .map(|b| html::trim_code_block(b))
        .filter(|b| !b.is_empty())
        .collect::<Vec<_>>()
        .join("\n");
    if code.is_empty() {
        return Err(CorpusError::NoCode(post.id));
    }
    if seg.description.is_empty() {
        return Err(CorpusError::EmptyDescription(post.id));
    }
    Ok(PostTriplet {
        post_id: post.id,
        language,
        description: seg.description,
        code,
        title: post.title.clone(),
    })
}

/// Seeded shuffle into `train_n` training, `test_n` test, and the remainder
/// as validation. Input order does not matter: triplets are sorted by id
/// before shuffling.
pub fn split_corpus(
    mut triplets: Vec<PostTriplet>,
    seed: u64,
    train_n: usize,
    test_n: usize,
) -> Result<CorpusSplit, CorpusError> {
    let need = train_n + test_n;
    if need > triplets.len() {
        return Err(CorpusError::InsufficientData {
            need,
            have: triplets.len(),
        });
    }
    triplets.sort_by_key(|t| t.post_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    triplets.shuffle(&mut rng);
    let validation = triplets.split_off(need);
    let test = triplets.split_off(train_n);
    Ok(CorpusSplit {
        train: triplets,
        validation,
        test,
        seed,
    })
}

/// Average, mode, median and share under a cutoff for one field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldStats {
    pub average: f64,
    pub mode: usize,
    pub median: f64,
    pub cutoff: usize,
    pub fraction_below: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub count: usize,
    pub code: FieldStats,
    pub description: FieldStats,
    pub title: FieldStats,
}

fn field_stats(mut lengths: Vec<usize>, cutoff: usize) -> FieldStats {
    lengths.sort_unstable();
    let n = lengths.len();
    let average = lengths.iter().sum::<usize>() as f64 / n as f64;
    let median = if n % 2 == 1 {
        lengths[n / 2] as f64
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
    };
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &lengths {
        *counts.entry(l).or_default() += 1;
    }
    // Smallest length wins ties.
    let mode = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&l, _)| l)
        .unwrap_or(0);
    let below = lengths.iter().filter(|&&l| l < cutoff).count();
    FieldStats {
        average,
        mode,
        median,
        cutoff,
        fraction_below: below as f64 / n as f64,
    }
}

/// Whitespace-token length statistics per field.
pub fn corpus_stats(triplets: &[PostTriplet]) -> Result<CorpusStats, CorpusError> {
    if triplets.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let len = |s: &str| s.split_whitespace().count();
    Ok(CorpusStats {
        count: triplets.len(),
        code: field_stats(triplets.iter().map(|t| len(&t.code)).collect(), BODY_LENGTH_CUTOFF),
        description: field_stats(
            triplets.iter().map(|t| len(&t.description)).collect(),
            BODY_LENGTH_CUTOFF,
        ),
        title: field_stats(triplets.iter().map(|t| len(&t.title)).collect(), TITLE_LENGTH_CUTOFF),
    })
}

/// Counters from one mining pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MiningReport {
    pub rows_seen: u64,
    pub questions: u64,
    pub skipped_rows: u64,
    pub in_target_languages: u64,
    pub passed_rules: u64,
    pub extraction_failures: u64,
}

/// Triplets per language, sorted by post id.
#[derive(Clone, Debug, Default)]
pub struct MinedCorpus {
    pub by_language: BTreeMap<Language, Vec<PostTriplet>>,
    pub report: MiningReport,
}

const MINE_CHUNK: usize = 4096;

/// Streams a dump and keeps every question in `languages` that passes the
/// quality rules. A post tagged with several target languages lands in each
/// of their corpora.
pub fn mine<R: BufRead>(input: R, languages: &[Language]) -> Result<MinedCorpus, CorpusError> {
    let mut reader = parse_dump(input);
    let mut out = MinedCorpus::default();
    for &l in languages {
        out.by_language.entry(l).or_default();
    }
    let mut chunk = Vec::with_capacity(MINE_CHUNK);
    loop {
        let post = reader.next().transpose()?;
        let finished = post.is_none();
        if let Some(p) = post {
            out.report.questions += 1;
            let langs: Vec<Language> = Language::from_tags(&p.tags)
                .into_iter()
                .filter(|l| languages.contains(l))
                .collect();
            if !langs.is_empty() {
                out.report.in_target_languages += 1;
                chunk.push((p, langs));
            }
        }
        if chunk.len() >= MINE_CHUNK || (finished && !chunk.is_empty()) {
            mine_chunk(&chunk, &mut out);
            chunk.clear();
        }
        if finished {
            break;
        }
    }
    out.report.rows_seen = reader.rows_seen();
    out.report.skipped_rows = reader.skipped();
    for v in out.by_language.values_mut() {
        v.sort_by_key(|t| t.post_id);
    }
    Ok(out)
}

fn mine_chunk(chunk: &[(RawPost, Vec<Language>)], out: &mut MinedCorpus) {
    let results = par::map(chunk, |(post, langs)| {
        if !passes_quality_rules(post) {
            return None;
        }
        Some(
            langs
                .iter()
                .map(|&l| extract_triplet(post, l))
                .collect::<Vec<_>>(),
        )
    });
    for r in results.into_iter().flatten() {
        out.report.passed_rules += 1;
        for t in r {
            match t {
                Ok(t) => out.by_language.entry(t.language).or_default().push(t),
                Err(_) => out.report.extraction_failures += 1,
            }
        }
    }
}

/// File name of one split inside a language directory.
pub fn split_file(dir: &Path, language: Language, split: &str) -> PathBuf {
    dir.join(language.as_str()).join(format!("{split}.jsonl"))
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

/// Writes one JSON object per line; newlines inside fields are escaped.
pub fn write_triplets(path: &Path, triplets: &[PostTriplet]) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        let line = serde_json::to_string(t).expect("triplet serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_triplets(path: &Path) -> Result<Vec<PostTriplet>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| CorpusError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_split(dir: &Path, language: Language, split: &CorpusSplit) -> Result<(), CorpusError> {
    for (name, items) in SPLIT_NAMES.iter().zip([&split.train, &split.validation, &split.test]) {
        write_triplets(&split_file(dir, language, name), items)?;
    }
    Ok(())
}

/// Loads every language directory present under `dir`.
pub fn read_corpus_dir(dir: &Path) -> Result<BTreeMap<Language, CorpusSplit>, CorpusError> {
    if !dir.is_dir() {
        return Err(CorpusError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        });
    }
    let mut out = BTreeMap::new();
    for lang in Language::ALL {
        if !dir.join(lang.as_str()).is_dir() {
            continue;
        }
        let load = |name| {
            let p = split_file(dir, lang, name);
            if p.exists() {
                read_triplets(&p)
            } else {
                Ok(Vec::new())
            }
        };
        out.insert(
            lang,
            CorpusSplit {
                train: load("train")?,
                validation: load("valid")?,
                test: load("test")?,
                seed: 0,
            },
        );
    }
    Ok(out)
}
