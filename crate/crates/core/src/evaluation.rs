//! ROUGE scoring, the BM25 retrieval baseline, and corpus-level evaluation.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Language, PostTriplet};
use crate::decoding::{generate_titles, BeamConfig, DecodeError};
use crate::model::Seq2Seq;
use crate::par;
use crate::tokenizer::{InputMode, ModelInput, SubwordVocabulary, TokenizerError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("nothing to score")]
    EmptyList,
    #[error("BM25 index needs at least one document")]
    EmptyCorpus,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("no retrieval index for {0}")]
    NoIndex(Language),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn eval_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if overlap == 0 || candidate_total == 0 || reference_total == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }

    fn scaled(self, factor: f64) -> Self {
        Self {
            precision: self.precision * factor,
            recall: self.recall * factor,
            f1: self.f1 * factor,
        }
    }

    fn add(self, o: Self) -> Self {
        Self {
            precision: self.precision + o.precision,
            recall: self.recall + o.recall,
            f1: self.f1 + o.f1,
        }
    }

    fn rounded(self, decimals: i32) -> Self {
        let p = 10f64.powi(decimals);
        Self {
            precision: (self.precision * p).round() / p,
            recall: (self.recall * p).round() / p,
            f1: (self.f1 * p).round() / p,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| refs.get(g).map_or(0, |&r| c.min(r)))
        .sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    Prf::from_counts(overlap, total(candidate.len()), total(reference.len()))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    Prf::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

impl RougeScore {
    fn add(self, o: Self) -> Self {
        Self {
            rouge1: self.rouge1.add(o.rouge1),
            rouge2: self.rouge2.add(o.rouge2),
            rouge_l: self.rouge_l.add(o.rouge_l),
        }
    }

    fn scaled(self, f: f64) -> Self {
        Self {
            rouge1: self.rouge1.scaled(f),
            rouge2: self.rouge2.scaled(f),
            rouge_l: self.rouge_l.scaled(f),
        }
    }

    /// Values ×100, rounded to three decimals.
    pub fn as_percentages(self) -> Self {
        let s = self.scaled(100.0);
        Self {
            rouge1: s.rouge1.rounded(3),
            rouge2: s.rouge2.rounded(3),
            rouge_l: s.rouge_l.rounded(3),
        }
    }
}

/// ROUGE-1/2/L of two strings under [`eval_tokens`].
pub fn rouge(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (eval_tokens(candidate), eval_tokens(reference));
    RougeScore {
        rouge1: rouge_n(&c, &r, 1),
        rouge2: rouge_n(&c, &r, 2),
        rouge_l: rouge_l(&c, &r),
    }
}

/// Unweighted mean of per-pair scores, as fractions.
pub fn corpus_rouge<S: AsRef<str> + Sync>(candidates: &[S], references: &[S]) -> Result<RougeScore, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let scores = par::map_range(candidates.len(), |i| rouge(candidates[i].as_ref(), references[i].as_ref()));
    let sum = scores.into_iter().fold(RougeScore::default(), RougeScore::add);
    Ok(sum.scaled(1.0 / candidates.len() as f64))
}

/// [`corpus_rouge`] computed one pair at a time on the calling thread.
pub fn corpus_rouge_sequential<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<RougeScore, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let sum = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge(c.as_ref(), r.as_ref()))
        .fold(RougeScore::default(), RougeScore::add);
    Ok(sum.scaled(1.0 / candidates.len() as f64))
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Okapi BM25 over bag-of-words documents.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    doc_freq: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_len: Vec<usize>,
    avgdl: f64,
    titles: Vec<String>,
}

impl Bm25Index {
    /// Indexes `description ⊕ code` of each triplet.
    pub fn build(triplets: &[PostTriplet]) -> Result<Self, EvalError> {
        let docs = par::map(triplets, |t| {
            let mut d = eval_tokens(&t.description);
            d.extend(eval_tokens(&t.code));
            d
        });
        let titles = triplets.iter().map(|t| t.title.clone()).collect();
        Self::from_documents(docs, titles)
    }

    pub fn from_documents(docs: Vec<Vec<String>>, titles: Vec<String>) -> Result<Self, EvalError> {
        if docs.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (id, doc) in docs.into_iter().enumerate() {
            doc_len.push(doc.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in doc {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, n) in tf {
                postings.entry(term).or_default().push((id, n));
            }
        }
        for p in postings.values_mut() {
            p.sort_unstable();
        }
        let doc_freq = postings.iter().map(|(t, p)| (t.clone(), p.len())).collect();
        let avgdl = doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64;
        Ok(Self {
            k1: BM25_K1,
            b: BM25_B,
            doc_freq,
            postings,
            doc_len,
            avgdl,
            titles,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn title(&self, doc: usize) -> Option<&str> {
        self.titles.get(doc).map(String::as_str)
    }

    /// `ln((N − df + 0.5) / (df + 0.5) + 1)`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// The `top_k` best documents by score, ties by ascending id. Each
    /// query token contributes once per occurrence.
    pub fn rank<S: AsRef<str>>(&self, query: &[S], top_k: usize) -> Vec<(usize, f64)> {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in query {
            let term = term.as_ref();
            let Some(posts) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(doc, tf) in posts {
                let tf = f64::from(tf);
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc] as f64 / self.avgdl);
                *scores.entry(doc).or_insert(0.0) += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        if ranked.len() < top_k {
            let seen: std::collections::HashSet<usize> = ranked.iter().map(|r| r.0).collect();
            let fill = (0..self.num_docs()).filter(|d| !seen.contains(d)).take(top_k - ranked.len());
            ranked.extend(fill.map(|d| (d, 0.0)));
        }
        ranked
    }
}

/// Something that proposes a title for a post.
pub trait TitleGenerator: Sync {
    fn name(&self) -> String;

    fn generate(&self, post: &PostTriplet, mode: InputMode) -> Result<String, EvalError>;
}

pub struct ModelGenerator<'a> {
    pub model: &'a Seq2Seq<f32>,
    pub vocab: &'a SubwordVocabulary,
    pub beam: BeamConfig,
}

impl TitleGenerator for ModelGenerator<'_> {
    fn name(&self) -> String {
        format!("model:{}", self.model.model_id())
    }

    fn generate(&self, post: &PostTriplet, mode: InputMode) -> Result<String, EvalError> {
        let input = ModelInput::from_triplet(self.vocab, post, mode, self.model.config().max_encoder_len)?;
        let titles = generate_titles(self.model, self.vocab, &input, &self.beam, 1)?;
        Ok(titles.into_iter().next().map(|t| t.text).unwrap_or_default())
    }
}

/// Answers each query with the title of the most similar training post of
/// the same language.
pub struct Bm25Baseline {
    indexes: BTreeMap<Language, Bm25Index>,
}

impl Bm25Baseline {
    pub fn build(train: &BTreeMap<Language, Vec<PostTriplet>>) -> Result<Self, EvalError> {
        let mut indexes = BTreeMap::new();
        for (&lang, posts) in train {
            if !posts.is_empty() {
                indexes.insert(lang, Bm25Index::build(posts)?);
            }
        }
        if indexes.is_empty() {
            return Err(EvalError::EmptyCorpus);
        }
        Ok(Self { indexes })
    }
}

impl TitleGenerator for Bm25Baseline {
    fn name(&self) -> String {
        "bm25".into()
    }

    fn generate(&self, post: &PostTriplet, mode: InputMode) -> Result<String, EvalError> {
        let index = self.indexes.get(&post.language).ok_or(EvalError::NoIndex(post.language))?;
        let (d, c) = mode.select(&post.description, &post.code);
        let mut query = eval_tokens(d);
        query.extend(eval_tokens(c));
        let best = index.rank(&query, 1);
        Ok(best.first().and_then(|&(doc, _)| index.title(doc)).unwrap_or("").to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageReport {
    pub language: Language,
    pub count: usize,
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub system: String,
    pub input_mode: InputMode,
    /// One record per language with test posts; scores in percent.
    pub records: Vec<LanguageReport>,
}

impl EvaluationReport {
    pub fn record(&self, language: Language) -> Option<&LanguageReport> {
        self.records.iter().find(|r| r.language == language)
    }
}

/// Generates one title per test post and scores each language separately.
pub fn evaluate(
    generator: &dyn TitleGenerator,
    test: &[PostTriplet],
    mode: InputMode,
) -> Result<EvaluationReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let generated = par::try_map(test, |p| generator.generate(p, mode))?;
    let mut records = Vec::new();
    for lang in Language::ALL {
        let (cands, refs): (Vec<&str>, Vec<&str>) = test
            .iter()
            .zip(&generated)
            .filter(|(p, _)| p.language == lang)
            .map(|(p, g)| (g.as_str(), p.title.as_str()))
            .unzip();
        if cands.is_empty() {
            continue;
        }
        let score = corpus_rouge(&cands, &refs)?.as_percentages();
        records.push(LanguageReport {
            language: lang,
            count: cands.len(),
            rouge1: score.rouge1,
            rouge2: score.rouge2,
            rouge_l: score.rouge_l,
        });
    }
    Ok(EvaluationReport {
        system: generator.name(),
        input_mode: mode,
        records,
    })
}
