//! Byte-level BPE vocabulary shared by all tasks and both input modalities,
//! plus construction of the encoder input sequence.
//!
//! Ids `0..5` are reserved specials, `5..261` are the 256 byte values, and
//! every id after that is a learned merge in the order it was learned.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Language, PostTriplet};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const CODE_SEP_ID: TokenId = 4;

/// Surface form of the separator between description and code.
pub const CODE_SEP: &str = "<code>";

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", CODE_SEP];
const BYTE_BASE: TokenId = SPECIALS.len() as TokenId;

/// Smallest vocabulary that can hold the specials and the byte alphabet.
pub const BASE_VOCAB_SIZE: usize = SPECIALS.len() + 256;
pub const DEFAULT_VOCAB_SIZE: usize = 16_000;
/// Encoder length limit.
pub const MAX_ENCODER_LEN: usize = 512;

const FILE_MAGIC: &str = "title-forge-vocab 1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target size {target} must exceed the {BASE_VOCAB_SIZE}-entry base alphabet")]
    TargetTooSmall { target: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("corpus ran out of mergeable pairs at {reached} pieces (target {target})")]
    NotEnoughPairs { reached: usize, target: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("both description and code are empty")]
    EmptyInput,
    #[error("invalid vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Learned subword inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordVocabulary {
    pieces: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), TokenId>,
}

/// Splits text before each whitespace run that follows a non-whitespace
/// character, so a word carries its leading whitespace. Concatenating the
/// chunks gives back the input.
fn pre_split(text: &str) -> impl Iterator<Item = &str> {
    let mut start = 0;
    let mut prev_ws = true;
    let mut bounds = Vec::new();
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && i > start {
            bounds.push((start, i));
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        bounds.push((start, text.len()));
    }
    bounds.into_iter().map(move |(a, b)| &text[a..b])
}

fn byte_id(b: u8) -> TokenId {
    BYTE_BASE + b as TokenId
}

impl SubwordVocabulary {
    /// Vocabulary with no merges: specials plus the byte alphabet.
    pub fn bytes_only() -> Self {
        let mut pieces: Vec<Vec<u8>> = SPECIALS.iter().map(|s| s.as_bytes().to_vec()).collect();
        pieces.extend((0..=255u8).map(|b| vec![b]));
        Self {
            pieces,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Learns merges until the vocabulary holds exactly `target_size` pieces.
    ///
    /// Each round merges the most frequent adjacent pair; ties go to the
    /// lexicographically smallest merged byte string.
    pub fn train<S: AsRef<str>>(texts: &[S], target_size: usize) -> Result<Self, TokenizerError> {
        Self::learn(texts, target_size, true)
    }

    /// Like [`SubwordVocabulary::train`] but stops early, without error, when
    /// the corpus has no pair left to merge.
    pub fn train_up_to<S: AsRef<str>>(texts: &[S], target_size: usize) -> Result<Self, TokenizerError> {
        Self::learn(texts, target_size, false)
    }

    fn learn<S: AsRef<str>>(texts: &[S], target_size: usize, exact: bool) -> Result<Self, TokenizerError> {
        if target_size <= BASE_VOCAB_SIZE {
            return Err(TokenizerError::TargetTooSmall {
                target: target_size,
            });
        }
        let mut chunk_freq: HashMap<&str, i64> = HashMap::new();
        for t in texts {
            for chunk in pre_split(t.as_ref()) {
                *chunk_freq.entry(chunk).or_default() += 1;
            }
        }
        if chunk_freq.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut chunks: Vec<(&str, i64)> = chunk_freq.into_iter().collect();
        chunks.sort_unstable();
        let mut words: Vec<Vec<TokenId>> = chunks
            .iter()
            .map(|(c, _)| c.bytes().map(byte_id).collect())
            .collect();
        let freqs: Vec<i64> = chunks.iter().map(|&(_, f)| f).collect();

        let mut vocab = Self::bytes_only();
        let mut counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
        let mut where_: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
        for (w, word) in words.iter().enumerate() {
            for p in word.windows(2) {
                let pair = (p[0], p[1]);
                *counts.entry(pair).or_default() += freqs[w];
                where_.entry(pair).or_default().insert(w);
            }
        }
        let key = |v: &Self, pair: (TokenId, TokenId), count: i64| {
            let mut merged = v.pieces[pair.0 as usize].clone();
            merged.extend_from_slice(&v.pieces[pair.1 as usize]);
            (std::cmp::Reverse(count), merged, pair)
        };
        let mut queue: BTreeSet<_> = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(&p, &c)| key(&vocab, p, c))
            .collect();

        while vocab.pieces.len() < target_size {
            let Some((_, merged, pair)) = queue.pop_first() else {
                if !exact {
                    break;
                }
                return Err(TokenizerError::NotEnoughPairs {
                    reached: vocab.pieces.len(),
                    target: target_size,
                });
            };
            let new_id = vocab.pieces.len() as TokenId;
            vocab.pieces.push(merged);
            vocab.merges.push(pair);
            vocab.ranks.insert(pair, new_id);

            let mut touched: HashMap<(TokenId, TokenId), i64> = HashMap::new();
            let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            for w in affected {
                let f = freqs[w];
                let word = &mut words[w];
                for p in word.windows(2) {
                    *touched.entry((p[0], p[1])).or_default() -= f;
                }
                *word = merge_pair(word, pair, new_id);
                for p in word.windows(2) {
                    let pr = (p[0], p[1]);
                    *touched.entry(pr).or_default() += f;
                    where_.entry(pr).or_default().insert(w);
                }
            }
            for (pr, delta) in touched {
                if delta == 0 || pr == pair {
                    continue;
                }
                let old = counts.get(&pr).copied().unwrap_or(0);
                if old > 0 {
                    queue.remove(&key(&vocab, pr, old));
                }
                let new = old + delta;
                counts.insert(pr, new);
                if new > 0 {
                    queue.insert(key(&vocab, pr, new));
                }
            }
            counts.remove(&pair);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Bytes of a piece (the surface form for specials).
    pub fn piece(&self, id: TokenId) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Encodes ordinary text. Never emits special ids.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for chunk in pre_split(text) {
            out.extend(self.encode_chunk(chunk));
        }
        out
    }

    fn encode_chunk(&self, chunk: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = chunk.bytes().map(byte_id).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&id| (id, (p[0], p[1]))))
                .min();
            let Some((id, pair)) = best else { break };
            ids = merge_pair(&ids, pair, id);
        }
        ids
    }

    /// Concatenates piece bytes. Padding, BOS and EOS are dropped; the code
    /// separator is rendered as `<code>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(TokenizerError::UnknownId(id))?;
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                _ => bytes.extend_from_slice(piece),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Line-oriented text form: a manifest, then one piece per line (hex
    /// bytes, or `!surface` for specials), then one merge per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_MAGIC}");
        let _ = writeln!(s, "size {}", self.pieces.len());
        let specials: Vec<String> = SPECIALS.iter().enumerate().map(|(i, n)| format!("{n}={i}")).collect();
        let _ = writeln!(s, "specials {}", specials.join(" "));
        let _ = writeln!(s, "pieces {}", self.pieces.len());
        for (i, p) in self.pieces.iter().enumerate() {
            if i < SPECIALS.len() {
                let _ = writeln!(s, "!{}", SPECIALS[i]);
            } else {
                let _ = writeln!(s, "{}", hex::encode(p));
            }
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let bad = |m: &str| TokenizerError::Format(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(FILE_MAGIC) {
            return Err(bad("missing header"));
        }
        let mut field = |name: &str| -> Result<usize, TokenizerError> {
            let line = lines.next().ok_or_else(|| bad("truncated manifest"))?;
            let rest = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(&format!("expected `{name}`")))?;
            if name == "specials" {
                return Ok(0);
            }
            rest.trim().parse().map_err(|_| bad(&format!("bad `{name}` count")))
        };
        let size = field("size")?;
        field("specials")?;
        let n_pieces = field("pieces")?;
        if n_pieces != size || size < BASE_VOCAB_SIZE {
            return Err(bad("inconsistent sizes"));
        }
        let mut vocab = Self::bytes_only();
        let mut listed = Vec::with_capacity(n_pieces);
        for _ in 0..n_pieces {
            listed.push(lines.next().ok_or_else(|| bad("truncated piece list"))?.to_string());
        }
        let merges_line = lines.next().ok_or_else(|| bad("missing merges"))?;
        let n_merges: usize = merges_line
            .strip_prefix("merges ")
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad("expected `merges`"))?;
        if BASE_VOCAB_SIZE + n_merges != size {
            return Err(bad("merge count does not match size"));
        }
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merge list"))?;
            let mut it = line.split(' ').map(str::parse::<TokenId>);
            let (Some(Ok(a)), Some(Ok(b)), None) = (it.next(), it.next(), it.next()) else {
                return Err(bad("malformed merge"));
            };
            let n = vocab.pieces.len() as TokenId;
            if a < BYTE_BASE || b < BYTE_BASE || a >= n || b >= n {
                return Err(bad("merge refers to an invalid id"));
            }
            let mut merged = vocab.pieces[a as usize].clone();
            merged.extend_from_slice(&vocab.pieces[b as usize]);
            vocab.pieces.push(merged);
            vocab.merges.push((a, b));
            vocab.ranks.insert((a, b), n);
        }
        for (i, line) in listed.iter().enumerate() {
            let ok = if i < SPECIALS.len() {
                line.strip_prefix('!') == Some(SPECIALS[i])
            } else {
                hex::decode(line).ok().as_deref() == Some(vocab.pieces[i].as_slice())
            };
            if !ok {
                return Err(bad(&format!("piece {i} does not match its merge")));
            }
        }
        Ok(vocab)
    }
}

fn merge_pair(ids: &[TokenId], pair: (TokenId, TokenId), new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Which modalities go into the encoder input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Both,
    CodeOnly,
    DescOnly,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::CodeOnly => "code_only",
            Self::DescOnly => "desc_only",
        }
    }

    /// Blanks out the modality this mode drops.
    pub fn select<'a>(self, description: &'a str, code: &'a str) -> (&'a str, &'a str) {
        match self {
            Self::Both => (description, code),
            Self::CodeOnly => ("", code),
            Self::DescOnly => (description, ""),
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Self::Both),
            "code_only" => Ok(Self::CodeOnly),
            "desc_only" => Ok(Self::DescOnly),
            _ => Err(format!("unknown input mode {s:?} (expected both, code_only or desc_only)")),
        }
    }
}

/// Encoder input: `prefix ⊕ description ⊕ <code> ⊕ code`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    token_ids: Vec<TokenId>,
    language: Language,
}

impl ModelInput {
    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.token_ids
    }

    pub fn from_triplet(
        vocab: &SubwordVocabulary,
        triplet: &PostTriplet,
        mode: InputMode,
        max_len: usize,
    ) -> Result<Self, TokenizerError> {
        let (d, c) = mode.select(&triplet.description, &triplet.code);
        build_model_input(vocab, triplet.language, d, c, max_len)
    }
}

/// Builds the encoder input. When the sequence would exceed `max_len`, code
/// tokens are dropped from the end first, then description tokens; the
/// prefix and the separator always survive.
pub fn build_model_input(
    vocab: &SubwordVocabulary,
    language: Language,
    description: &str,
    code: &str,
    max_len: usize,
) -> Result<ModelInput, TokenizerError> {
    if description.trim().is_empty() && code.trim().is_empty() {
        return Err(TokenizerError::EmptyInput);
    }
    let prefix = vocab.encode(language.prefix());
    let mut desc = vocab.encode(description);
    let mut code = vocab.encode(code);
    let budget = max_len.saturating_sub(prefix.len() + 1);
    if desc.len() + code.len() > budget {
        code.truncate(budget.saturating_sub(desc.len()));
        desc.truncate(budget);
    }
    let mut ids = prefix;
    ids.extend(desc);
    ids.push(CODE_SEP_ID);
    ids.extend(code);
    Ok(ModelInput {
        token_ids: ids,
        language,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn small_vocab() -> SubwordVocabulary {
        let texts = [
            "public static void main(String[] args) { int x = 0; }",
            "How do I convert a string to an int in Java?",
            "def f(x):\n    return x + 1  # café ☕",
            "const x = [1, 2, 3].map(v => v * 2);",
        ];
        SubwordVocabulary::train(&texts, 300).unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // Pair counts over "aaab" ×2: (a,a)=4, (a,b)=2.
        let v = SubwordVocabulary::train(&["aaab", "aaab"], BASE_VOCAB_SIZE + 1).unwrap();
        assert_eq!(v.merges(), &[(byte_id(b'a'), byte_id(b'a'))]);
        assert_eq!(v.piece(BASE_VOCAB_SIZE as TokenId), Some(&b"aa"[..]));
    }

    #[test]
    fn ties_go_to_smallest_merged_string() {
        let v = SubwordVocabulary::train(&["ba ab"], BASE_VOCAB_SIZE + 1).unwrap();
        // Chunks: "ba", " ab"; pairs (b,a)=1, (' ',a)=1, (a,b)=1. Smallest bytes: " a".
        assert_eq!(v.piece(BASE_VOCAB_SIZE as TokenId), Some(&b" a"[..]));
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            SubwordVocabulary::train(&["abc"], 200),
            Err(TokenizerError::TargetTooSmall { target: 200 })
        ));
        let empty: [&str; 1] = [""];
        assert!(matches!(
            SubwordVocabulary::train(&empty, 300),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            SubwordVocabulary::train(&["ab"], 300),
            Err(TokenizerError::NotEnoughPairs { .. })
        ));
        let capped = SubwordVocabulary::train_up_to(&["ab"], 300).unwrap();
        assert_eq!(capped.len(), BASE_VOCAB_SIZE + 1);
        assert_eq!(capped.encode("ab").len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        assert_eq!(small_vocab(), small_vocab());
        assert_eq!(small_vocab().len(), 300);
    }

    #[test]
    fn encode_decode_examples() {
        let v = small_vocab();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&v.encode("int x = 0;")).unwrap(), "int x = 0;");
        assert_eq!(v.decode(&[BOS_ID, EOS_ID]).unwrap(), "");
        assert_eq!(v.decode(&[CODE_SEP_ID]).unwrap(), "<code>");
        assert!(matches!(v.decode(&[1_000_000_000]), Err(TokenizerError::UnknownId(_))));
        assert!(v.encode("<code>").iter().all(|&id| id >= BYTE_BASE));
    }

    #[test]
    fn file_roundtrip_preserves_encoding() {
        let v = small_vocab();
        let back = SubwordVocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        let s = "return x + 1  # café";
        assert_eq!(back.encode(s), v.encode(s));
        let mut broken = v.to_text();
        broken = broken.replacen("merges ", "merges 9", 1);
        assert!(SubwordVocabulary::from_text(&broken).is_err());
    }

    #[test]
    fn model_input_layout() {
        let v = small_vocab();
        let input = build_model_input(&v, Language::JavaScript, "why", "x()", 512).unwrap();
        let prefix = v.encode("JS: ");
        assert_eq!(&input.token_ids()[..prefix.len()], &prefix[..]);
        assert_eq!(v.decode(input.token_ids()).unwrap(), "JS: why<code>x()");

        let no_code = build_model_input(&v, Language::Java, "why", "", 512).unwrap();
        assert_eq!(*no_code.token_ids().last().unwrap(), CODE_SEP_ID);

        assert!(matches!(
            build_model_input(&v, Language::Java, " ", "", 512),
            Err(TokenizerError::EmptyInput)
        ));
    }

    #[test]
    fn truncation_drops_code_then_description() {
        let v = SubwordVocabulary::bytes_only();
        let desc = "d".repeat(600);
        let code = "c".repeat(600);
        let input = build_model_input(&v, Language::Java, &desc, &code, 512).unwrap();
        let ids = input.token_ids();
        assert_eq!(ids.len(), 512);
        assert_eq!(ids.iter().filter(|&&i| i == CODE_SEP_ID).count(), 1);
        assert_eq!(*ids.last().unwrap(), CODE_SEP_ID);

        let input = build_model_input(&v, Language::Java, "dd", &code, 20).unwrap();
        let text = v.decode(input.token_ids()).unwrap();
        assert_eq!(text, format!("Java: dd<code>{}", "c".repeat(20 - 6 - 2 - 1)));
    }

    #[test]
    fn input_modes() {
        let v = small_vocab();
        let t = PostTriplet {
            post_id: 1,
            language: Language::Python,
            description: "why".into(),
            code: "x = 1".into(),
            title: "t".into(),
        };
        let code_only = ModelInput::from_triplet(&v, &t, InputMode::CodeOnly, 512).unwrap();
        assert_eq!(v.decode(code_only.token_ids()).unwrap(), "Python: <code>x = 1");
        let desc_only = ModelInput::from_triplet(&v, &t, InputMode::DescOnly, 512).unwrap();
        assert_eq!(v.decode(desc_only.token_ids()).unwrap(), "Python: why<code>");
    }

    proptest! {
        #[test]
        fn roundtrip_and_length_bound(s in "\\PC{0,64}") {
            let v = small_vocab();
            let ids = v.encode(&s);
            prop_assert!(ids.len() <= s.len());
            prop_assert!(ids.iter().all(|&i| i >= BYTE_BASE));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }

        #[test]
        fn single_separator_and_prefix(d in "[a-z ]{0,30}", c in "[a-z(); ]{0,30}", max in 12usize..64) {
            prop_assume!(!d.trim().is_empty() || !c.trim().is_empty());
            let v = small_vocab();
            let input = build_model_input(&v, Language::CSharp, &d, &c, max).unwrap();
            let ids = input.token_ids();
            let prefix = v.encode("C#: ");
            prop_assert!(ids.len() <= max);
            prop_assert!(ids.starts_with(&prefix));
            prop_assert_eq!(ids.iter().filter(|&&i| i == CODE_SEP_ID).count(), 1);
        }
    }
}
