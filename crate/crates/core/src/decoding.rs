//! Greedy and beam-search generation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncoderOutput, ModelError, Seq2Seq};
use crate::par;
use crate::tensor::Scalar;
use crate::tokenizer::{ModelInput, SubwordVocabulary, TokenId, TokenizerError, BOS_ID, EOS_ID};

/// Generated-token limit.
pub const MAX_TITLE_TOKENS: usize = 30;
pub const DEFAULT_BEAM_WIDTH: usize = 5;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid beam config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Anything that yields next-token log-probabilities for a prefix.
pub trait StepModel: Sync {
    fn vocab_size(&self) -> usize;

    fn eos_id(&self) -> TokenId {
        EOS_ID
    }

    /// Longest prefix (including BOS) the model accepts, if bounded.
    fn max_prefix_len(&self) -> Option<usize> {
        None
    }

    /// Natural-log probabilities over the vocabulary after `prefix`, which
    /// starts with BOS.
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError>;
}

/// A model paired with the encoded source it is generating for.
pub struct Conditioned<'a, T: Scalar> {
    model: &'a Seq2Seq<T>,
    enc: EncoderOutput<T>,
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn condition(&self, source: &[TokenId]) -> Result<Conditioned<'_, T>, ModelError> {
        Ok(Conditioned {
            model: self,
            enc: self.encode(source)?,
        })
    }
}

impl<T: Scalar> StepModel for Conditioned<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_prefix_len(&self) -> Option<usize> {
        Some(self.model.config().max_decoder_len)
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
        Ok(self.model.next_log_probs(prefix, &self.enc)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// BOS first; ends with EOS when finished.
    pub token_ids: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Self {
            token_ids: vec![BOS_ID],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Generated tokens, EOS included.
    pub fn generated(&self) -> &[TokenId] {
        &self.token_ids[1..]
    }

    /// Generated tokens without the trailing EOS.
    pub fn title_ids(&self) -> &[TokenId] {
        let g = self.generated();
        if self.finished {
            &g[..g.len() - 1]
        } else {
            g
        }
    }

    /// `log_prob / len^alpha`, with `len` the number of generated tokens
    /// including EOS.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        let len = self.generated().len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Length-normalization exponent used only for the final ranking.
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: DEFAULT_BEAM_WIDTH,
            max_len: MAX_TITLE_TOKENS,
            alpha: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn with_width(beam_width: usize) -> Self {
        Self {
            beam_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_width == 0 {
            return Err(DecodeError::InvalidConfig("beam_width must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DecodeError::InvalidConfig("alpha must be a finite value ≥ 0".into()));
        }
        Ok(())
    }
}

fn token_limit<M: StepModel + ?Sized>(model: &M, max_len: usize) -> usize {
    match model.max_prefix_len() {
        Some(p) => max_len.min(p),
        None => max_len,
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token until EOS or `max_len` generated tokens.
pub fn greedy_decode<M: StepModel + ?Sized>(model: &M, max_len: usize) -> Result<Hypothesis, DecodeError> {
    let limit = token_limit(model, max_len);
    let eos = model.eos_id();
    let mut h = Hypothesis::start();
    while h.generated().len() < limit {
        let lp = model.next_log_probs(&h.token_ids)?;
        let tok = argmax(&lp);
        h.log_prob += lp[tok];
        h.token_ids.push(tok as TokenId);
        if tok as TokenId == eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

fn rank_desc(a: f64, a_ids: &[TokenId], b: f64, b_ids: &[TokenId]) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal).then_with(|| a_ids.cmp(b_ids))
}

/// Beam search. Every live hypothesis is expanded over the full vocabulary
/// and the `beam_width` best candidates by cumulative log-probability are
/// kept; candidates ending in EOS leave the beam and wait in the finished
/// pool. The result holds up to `beam_width` hypotheses sorted by
/// length-normalized score, ties by token sequence.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, cfg: &BeamConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    let limit = token_limit(model, cfg.max_len);
    let eos = model.eos_id();
    let mut live = vec![Hypothesis::start()];
    let mut pool = Vec::new();
    for _ in 0..limit {
        if live.is_empty() {
            break;
        }
        let dists = par::try_map(&live, |h| model.next_log_probs(&h.token_ids))?;
        let mut cands: Vec<(f64, Vec<TokenId>)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (h, lp) in live.iter().zip(&dists) {
            for (tok, &l) in lp.iter().enumerate() {
                let mut ids = Vec::with_capacity(h.token_ids.len() + 1);
                ids.extend_from_slice(&h.token_ids);
                ids.push(tok as TokenId);
                cands.push((h.log_prob + l, ids));
            }
        }
        cands.sort_by(|a, b| rank_desc(a.0, &a.1, b.0, &b.1));
        cands.truncate(cfg.beam_width);
        live = Vec::with_capacity(cands.len());
        for (log_prob, token_ids) in cands {
            let finished = token_ids.last() == Some(&eos);
            let h = Hypothesis {
                token_ids,
                log_prob,
                finished,
            };
            if finished {
                pool.push(h);
            } else {
                live.push(h);
            }
        }
    }
    pool.extend(live);
    pool.sort_by(|a, b| {
        rank_desc(
            a.normalized_score(cfg.alpha),
            &a.token_ids,
            b.normalized_score(cfg.alpha),
            &b.token_ids,
        )
    });
    pool.truncate(cfg.beam_width);
    Ok(pool)
}

/// Every sequence up to `max_len` generated tokens (stopping at EOS), ranked
/// like [`beam_search`]. Exponential in `max_len`; for checking only.
pub fn exhaustive_search<M: StepModel + ?Sized>(
    model: &M,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>, DecodeError> {
    let limit = token_limit(model, max_len);
    let eos = model.eos_id();
    let mut out = Vec::new();
    let mut frontier = vec![Hypothesis::start()];
    for _ in 0..limit {
        let mut next = Vec::new();
        for h in frontier {
            let lp = model.next_log_probs(&h.token_ids)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut c = h.clone();
                c.token_ids.push(tok as TokenId);
                c.log_prob += l;
                if tok as TokenId == eos {
                    c.finished = true;
                    out.push(c);
                } else {
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    out.extend(frontier);
    out.sort_by(|a, b| rank_desc(a.normalized_score(alpha), &a.token_ids, b.normalized_score(alpha), &b.token_ids));
    Ok(out)
}

/// Sum of per-step log-probabilities of `hyp`'s tokens under `model`.
pub fn rescore<M: StepModel + ?Sized>(model: &M, hyp: &Hypothesis) -> Result<f64, DecodeError> {
    let mut total = 0.0;
    for t in 1..hyp.token_ids.len() {
        let lp = model.next_log_probs(&hyp.token_ids[..t])?;
        total += lp[hyp.token_ids[t] as usize];
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTitle {
    pub text: String,
    pub normalized_score: f64,
}

/// Beam-searches titles for an already built input and decodes them to
/// text, best first.
pub fn generate_titles<T: Scalar>(
    model: &Seq2Seq<T>,
    vocab: &SubwordVocabulary,
    input: &ModelInput,
    cfg: &BeamConfig,
    num_titles: usize,
) -> Result<Vec<GeneratedTitle>, DecodeError> {
    let conditioned = model.condition(input.token_ids())?;
    let hyps = beam_search(&conditioned, cfg)?;
    hyps.iter()
        .take(num_titles)
        .map(|h| {
            Ok(GeneratedTitle {
                text: vocab.decode(h.title_ids())?.trim().to_string(),
                normalized_score: h.normalized_score(cfg.alpha),
            })
        })
        .collect()
}

/// A fixed table of next-token distributions keyed by the prefix after BOS.
/// Unlisted prefixes fall back to `default`.
#[derive(Clone, Debug)]
pub struct TableModel {
    pub vocab: usize,
    pub table: Vec<(Vec<TokenId>, Vec<f64>)>,
    pub default: Vec<f64>,
}

impl TableModel {
    /// Builds from probabilities; they are converted to logs.
    pub fn from_probs(vocab: usize, entries: &[(&[TokenId], &[f64])], default: &[f64]) -> Self {
        let logs = |p: &[f64]| p.iter().map(|v| v.ln()).collect::<Vec<_>>();
        Self {
            vocab,
            table: entries.iter().map(|(k, p)| (k.to_vec(), logs(p))).collect(),
            default: logs(default),
        }
    }
}

impl StepModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
        let key = &prefix[1..];
        Ok(self
            .table
            .iter()
            .find(|(k, _)| k == key)
            .map_or_else(|| self.default.clone(), |(_, p)| p.clone()))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::ModelConfig;

    // Vocabulary of 6: ids 0..5 with EOS = 2.
    fn uniformish(v: usize) -> Vec<f64> {
        vec![1.0 / v as f64; v]
    }

    #[test]
    fn greedy_follows_hand_built_chain() {
        let m = TableModel::from_probs(
            6,
            &[
                (&[], &[0.05, 0.05, 0.1, 0.1, 0.6, 0.1]),
                (&[4], &[0.05, 0.05, 0.1, 0.7, 0.05, 0.05]),
                (&[4, 3], &[0.05, 0.05, 0.8, 0.05, 0.0, 0.05]),
            ],
            &uniformish(6),
        );
        let h = greedy_decode(&m, 30).unwrap();
        assert_eq!(h.token_ids, vec![BOS_ID, 4, 3, EOS_ID]);
        assert!(h.finished);
        assert_eq!(h.title_ids(), &[4, 3]);
        let want = 0.6f64.ln() + 0.7f64.ln() + 0.8f64.ln();
        assert!((h.log_prob - want).abs() < 1e-12);
    }

    #[test]
    fn greedy_immediate_eos() {
        let m = TableModel::from_probs(6, &[], &[0.1, 0.1, 0.5, 0.1, 0.1, 0.1]);
        let h = greedy_decode(&m, 30).unwrap();
        assert!(h.finished);
        assert!(h.title_ids().is_empty());
    }

    #[test]
    fn greedy_stops_at_thirty_tokens() {
        let m = TableModel::from_probs(6, &[], &[0.1, 0.1, 0.1, 0.1, 0.5, 0.1]);
        let h = greedy_decode(&m, MAX_TITLE_TOKENS).unwrap();
        assert!(!h.finished);
        assert_eq!(h.generated().len(), 30);
    }

    #[test]
    fn argmax_tie_takes_lowest_id() {
        let m = TableModel::from_probs(6, &[], &[0.1, 0.1, 0.1, 0.3, 0.3, 0.1]);
        let h = greedy_decode(&m, 1).unwrap();
        assert_eq!(h.token_ids, vec![BOS_ID, 3]);
    }

    #[test]
    fn beam_beats_greedy_on_garden_path() {
        // Greedy takes 3 (0.5) then faces a flat distribution; 4 (0.4) leads
        // to a near-certain EOS.
        let m = TableModel::from_probs(
            6,
            &[
                (&[], &[0.0, 0.0, 0.0, 0.5, 0.4, 0.1]),
                (&[3], &[0.0, 0.0, 0.2, 0.2, 0.2, 0.4]),
                (&[3, 5], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
                (&[4], &[0.0, 0.0, 0.95, 0.05, 0.0, 0.0]),
            ],
            &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        );
        let greedy = greedy_decode(&m, 30).unwrap();
        assert_eq!(greedy.token_ids, vec![BOS_ID, 3, 5, EOS_ID]);
        let beam = beam_search(&m, &BeamConfig::with_width(2)).unwrap();
        assert_eq!(beam[0].token_ids, vec![BOS_ID, 4, EOS_ID]);
        assert!(beam[0].log_prob > greedy.log_prob);
    }

    #[test]
    fn invalid_beam_config() {
        let m = TableModel::from_probs(6, &[], &uniformish(6));
        assert!(matches!(
            beam_search(&m, &BeamConfig::with_width(0)),
            Err(DecodeError::InvalidConfig(_))
        ));
        let cfg = BeamConfig {
            alpha: -1.0,
            ..BeamConfig::default()
        };
        assert!(beam_search(&m, &cfg).is_err());
    }

    fn toy_model(seed: u64, vocab: usize) -> Seq2Seq<f32> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: vocab,
            max_encoder_len: 16,
            max_decoder_len: 8,
            dropout: 0.0,
        };
        let mut m = Seq2Seq::new(cfg, seed).unwrap();
        // Sharpen the output distribution so search choices matter.
        let emb = m.params().id("embedding").unwrap();
        for v in m.params_mut().value_mut(emb).data_mut() {
            *v *= 60.0;
        }
        m
    }

    #[test]
    fn model_prefix_limit_caps_generation() {
        let m = toy_model(1, 6);
        let c = m.condition(&[5, 3]).unwrap();
        let h = greedy_decode(&c, 100).unwrap();
        assert!(h.generated().len() <= 8);
        let beams = beam_search(&c, &BeamConfig { max_len: 100, ..BeamConfig::default() }).unwrap();
        assert!(beams.iter().all(|h| h.token_ids.len() <= 9));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn width_one_is_greedy(seed in any::<u64>()) {
            let m = toy_model(seed, 12);
            let c = m.condition(&[5, 6, 7]).unwrap();
            let g = greedy_decode(&c, 6).unwrap();
            let b = beam_search(&c, &BeamConfig { beam_width: 1, max_len: 6, alpha: 1.0 }).unwrap();
            prop_assert_eq!(&b[0].token_ids, &g.token_ids);
            prop_assert_eq!(b[0].log_prob, g.log_prob);
        }

        #[test]
        fn wide_beam_is_exhaustive(seed in any::<u64>()) {
            let m = toy_model(seed, 6);
            let c = m.condition(&[5, 4]).unwrap();
            let best = &exhaustive_search(&c, 3, 1.0).unwrap()[0];
            let b = beam_search(&c, &BeamConfig { beam_width: 216, max_len: 3, alpha: 1.0 }).unwrap();
            prop_assert_eq!(&b[0].token_ids, &best.token_ids);
            prop_assert!((b[0].normalized_score(1.0) - best.normalized_score(1.0)).abs() < 1e-6);
        }

        #[test]
        fn results_sorted_and_rescorable(seed in any::<u64>(), width in 1usize..6) {
            let m = toy_model(seed, 10);
            let c = m.condition(&[5, 6, 9]).unwrap();
            let cfg = BeamConfig { beam_width: width, max_len: 5, alpha: 1.0 };
            let b = beam_search(&c, &cfg).unwrap();
            prop_assert!(!b.is_empty() && b.len() <= width);
            for w in b.windows(2) {
                prop_assert!(w[0].normalized_score(1.0) >= w[1].normalized_score(1.0));
            }
            for h in &b {
                prop_assert!(h.log_prob <= 0.0);
                prop_assert!((rescore(&c, h).unwrap() - h.log_prob).abs() < 1e-5);
            }
            prop_assert_eq!(b, beam_search(&c, &cfg).unwrap());
        }
    }
}
