//! Pre-layer-norm Transformer encoder-decoder.
//!
//! Sequences are packed row-wise: a batch of sources of lengths `l₁, l₂, …`
//! becomes one `[Σlᵢ, d_model]` matrix, and attention is restricted to each
//! sequence through [`AttentionSegment`]s. No padding is needed, but PAD
//! tokens inside a source are masked out as keys.

mod checkpoint;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};

use crate::tensor::kernels;
use crate::tensor::{
    AttentionSegment, ParamId, ParamKind, ParamStore, Scalar, Tape, Tensor, TensorError, Var,
};
use crate::tokenizer::{TokenId, PAD_ID};

const LN_EPS: f64 = 1e-6;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Base-size configuration: 768 wide, 12 heads, 12 layers.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            d_ff: 3072,
            vocab_size,
            max_encoder_len: 512,
            max_decoder_len: 30,
            dropout: 0.1,
        }
    }

    /// Small configuration for tests and laptop experiments.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            ..Self::base(vocab_size)
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return fail("n_layers and d_ff must be positive");
        }
        if self.vocab_size <= PAD_ID as usize + 4 {
            return fail("vocab_size must cover the special tokens");
        }
        if self.max_encoder_len == 0 || self.max_decoder_len == 0 {
            return fail("maximum lengths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} length {len} exceeds the maximum of {max}")]
    LengthExceeded { what: &'static str, len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("batch has {sources} sources but {targets} decoder inputs")]
    BatchMismatch { sources: usize, targets: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
}

/// Parameters bound to one tape, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

/// Randomness source for dropout; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

/// Encoder states for one source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T: Scalar = f32> {
    /// `[src_len, d_model]`.
    pub h: Tensor<T>,
    /// `false` at padding positions.
    pub key_allowed: Vec<bool>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.key_allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_allowed.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq<T: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, kind: ParamKind, shape: &[usize]) -> ParamId {
        let value = match kind {
            ParamKind::NormGain => Tensor::filled(shape, T::one()),
            _ => Tensor::zeros(shape),
        };
        self.store.add(name, kind, value)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), ParamKind::NormGain, &[d]),
            bias: self.add(format!("{prefix}.bias"), ParamKind::NormBias, &[d]),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        let mut w = |n: &str| self.add(format!("{prefix}.{n}"), ParamKind::Weight, &[d, d]);
        Attention {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            w1: self.add(format!("{prefix}.w1"), ParamKind::Weight, &[d, d_ff]),
            b1: self.add(format!("{prefix}.b1"), ParamKind::Bias, &[d_ff]),
            w2: self.add(format!("{prefix}.w2"), ParamKind::Weight, &[d_ff, d]),
            b2: self.add(format!("{prefix}.b2"), ParamKind::Bias, &[d]),
        }
    }
}

impl<T: Scalar> Seq2Seq<T> {
    /// A model with zero weights (unit layer-norm gains), ready to be filled
    /// from a checkpoint.
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store };
        let embedding = b.add("embedding".into(), ParamKind::Embedding, &[config.vocab_size, d]);
        let enc_pos = b.add("encoder.position".into(), ParamKind::Embedding, &[config.max_encoder_len, d]);
        let dec_pos = b.add("decoder.position".into(), ParamKind::Embedding, &[config.max_decoder_len, d]);
        let encoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    norm_attn: b.norm(&format!("{p}.attn_norm"), d),
                    attn: b.attention(&format!("{p}.attn"), d),
                    norm_ff: b.norm(&format!("{p}.ff_norm"), d),
                    ff: b.ff(&format!("{p}.ff"), d, config.d_ff),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm", d);
        let decoder = (0..config.n_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    norm_self: b.norm(&format!("{p}.self_norm"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    norm_cross: b.norm(&format!("{p}.cross_norm"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    norm_ff: b.norm(&format!("{p}.ff_norm"), d),
                    ff: b.ff(&format!("{p}.ff"), d, config.d_ff),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm", d);
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                embedding,
                enc_pos,
                dec_pos,
                encoder,
                enc_norm,
                decoder,
                dec_norm,
            },
        })
    }

    /// Random initialisation: embeddings `N(0, 0.02²)`, weight matrices
    /// `N(0, 1/fan_in)`, biases zero, layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let p = model.params.get(id);
            let std = match p.kind() {
                ParamKind::Embedding => EMBED_STD,
                ParamKind::Weight => 1.0 / (p.value().shape()[0] as f64).sqrt(),
                _ => continue,
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in model.params.value_mut(id).data_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same model in another element type.
    pub fn cast<U: Scalar>(&self) -> Seq2Seq<U> {
        Seq2Seq {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.ids().map(|id| tape.param(&self.params, id)).collect())
    }

    fn check_ids(&self, ids: &[TokenId], what: &'static str, max: usize) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence(what));
        }
        if ids.len() > max {
            return Err(ModelError::LengthExceeded {
                what,
                len: ids.len(),
                max,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var, TensorError> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => tape.dropout(x, self.config.dropout, &mut **r),
            _ => Ok(x),
        }
    }

    fn norm(&self, tape: &mut Tape<T>, p: &Bound, n: Norm, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, p.get(n.gain), p.get(n.bias), LN_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        a: Attention,
        queries: Var,
        keys: Var,
        segments: &[AttentionSegment],
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var, TensorError> {
        let q = tape.matmul(queries, p.get(a.wq))?;
        let k = tape.matmul(keys, p.get(a.wk))?;
        let v = tape.matmul(keys, p.get(a.wv))?;
        let heads = self.config.n_heads;
        let ctx = match rng {
            Some(r) if self.config.dropout > 0.0 => {
                tape.attention_dropout(q, k, v, segments, heads, self.config.dropout, &mut **r)?
            }
            _ => tape.attention(q, k, v, segments, heads)?,
        };
        tape.matmul(ctx, p.get(a.wo))
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        f: FeedForward,
        x: Var,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var, TensorError> {
        let h = tape.matmul(x, p.get(f.w1))?;
        let h = tape.add_row(h, p.get(f.b1))?;
        let h = tape.relu(h)?;
        let h = self.dropout(tape, h, rng)?;
        let h = tape.matmul(h, p.get(f.w2))?;
        tape.add_row(h, p.get(f.b2))
    }

    /// Token plus position embeddings of packed sequences.
    fn embed(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seqs: &[&[TokenId]],
        positions: ParamId,
    ) -> Result<Var, TensorError> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let tok = tape.gather_rows(p.get(self.layout.embedding), &ids)?;
        let pos = tape.gather_rows(p.get(positions), &pos)?;
        tape.add(tok, pos)
    }

    /// Runs the encoder over packed sources. Returns the final states and the
    /// row range and key mask of each source.
    pub fn encode_packed(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        sources: &[&[TokenId]],
        rng: &mut DropoutRng<'_>,
    ) -> Result<(Var, Vec<AttentionSegment>), ModelError> {
        for s in sources {
            self.check_ids(s, "encoder", self.config.max_encoder_len)?;
        }
        let mut segments = Vec::with_capacity(sources.len());
        let mut start = 0;
        for s in sources {
            let allowed: Vec<bool> = s.iter().map(|&t| t != PAD_ID).collect();
            let key_allowed = if allowed.iter().all(|&a| a) { None } else { Some(allowed) };
            segments.push(AttentionSegment {
                queries: start..start + s.len(),
                keys: start..start + s.len(),
                causal: false,
                key_allowed,
            });
            start += s.len();
        }
        let mut x = self.embed(tape, p, sources, self.layout.enc_pos)?;
        x = self.dropout(tape, x, rng)?;
        for layer in &self.layout.encoder {
            let h = self.norm(tape, p, layer.norm_attn, x)?;
            let a = self.attend(tape, p, layer.attn, h, h, &segments, rng)?;
            let a = self.dropout(tape, a, rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, p, layer.norm_ff, x)?;
            let f = self.feed_forward(tape, p, layer.ff, h, rng)?;
            let f = self.dropout(tape, f, rng)?;
            x = tape.add(x, f)?;
        }
        let h = self.norm(tape, p, self.layout.enc_norm, x)?;
        Ok((h, segments))
    }

    /// Runs the decoder over packed target prefixes, each attending to the
    /// encoder segment at the same index. Returns `[Σ prefix_len, vocab]`
    /// logits.
    pub fn decode_packed(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        enc: Var,
        enc_segments: &[AttentionSegment],
        prefixes: &[&[TokenId]],
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var, ModelError> {
        if prefixes.len() != enc_segments.len() {
            return Err(ModelError::BatchMismatch {
                sources: enc_segments.len(),
                targets: prefixes.len(),
            });
        }
        for s in prefixes {
            self.check_ids(s, "decoder", self.config.max_decoder_len)?;
        }
        let mut self_segs = Vec::with_capacity(prefixes.len());
        let mut cross_segs = Vec::with_capacity(prefixes.len());
        let mut start = 0;
        for (s, e) in prefixes.iter().zip(enc_segments) {
            let rows = start..start + s.len();
            self_segs.push(AttentionSegment::causal(rows.clone()));
            cross_segs.push(AttentionSegment {
                queries: rows,
                keys: e.keys.clone(),
                causal: false,
                key_allowed: e.key_allowed.clone(),
            });
            start += s.len();
        }
        let mut x = self.embed(tape, p, prefixes, self.layout.dec_pos)?;
        x = self.dropout(tape, x, rng)?;
        for layer in &self.layout.decoder {
            let h = self.norm(tape, p, layer.norm_self, x)?;
            let a = self.attend(tape, p, layer.self_attn, h, h, &self_segs, rng)?;
            let a = self.dropout(tape, a, rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, p, layer.norm_cross, x)?;
            let a = self.attend(tape, p, layer.cross_attn, h, enc, &cross_segs, rng)?;
            let a = self.dropout(tape, a, rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, p, layer.norm_ff, x)?;
            let f = self.feed_forward(tape, p, layer.ff, h, rng)?;
            let f = self.dropout(tape, f, rng)?;
            x = tape.add(x, f)?;
        }
        let h = self.norm(tape, p, self.layout.dec_norm, x)?;
        Ok(tape.matmul_nt(h, p.get(self.layout.embedding))?)
    }

    /// Teacher-forced logits for a batch: one row per decoder input token.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        sources: &[&[TokenId]],
        decoder_inputs: &[&[TokenId]],
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var, ModelError> {
        if sources.len() != decoder_inputs.len() {
            return Err(ModelError::BatchMismatch {
                sources: sources.len(),
                targets: decoder_inputs.len(),
            });
        }
        let (enc, segs) = self.encode_packed(tape, p, sources, rng)?;
        self.decode_packed(tape, p, enc, &segs, decoder_inputs, rng)
    }

    /// Encoder states for one source in evaluation mode.
    pub fn encode(&self, ids: &[TokenId]) -> Result<EncoderOutput<T>, ModelError> {
        let mut tape = Tape::inference();
        let p = self.bind(&mut tape);
        let (h, segs) = self.encode_packed(&mut tape, &p, &[ids], &mut None)?;
        Ok(EncoderOutput {
            h: tape.value(h)?.clone(),
            key_allowed: segs[0].key_allowed.clone().unwrap_or_else(|| vec![true; ids.len()]),
        })
    }

    /// Logits at every position of `prefix` in evaluation mode,
    /// `[prefix_len, vocab]`.
    pub fn decoder_logits(&self, prefix: &[TokenId], enc: &EncoderOutput<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::inference();
        let p = self.bind(&mut tape);
        let h = tape.constant(enc.h.clone());
        let seg = AttentionSegment {
            queries: 0..enc.len(),
            keys: 0..enc.len(),
            causal: false,
            key_allowed: Some(enc.key_allowed.clone()),
        };
        let logits = self.decode_packed(&mut tape, &p, h, &[seg], &[prefix], &mut None)?;
        Ok(tape.value(logits)?.clone())
    }

    /// Next-token distribution after `prefix` (which starts with BOS).
    pub fn decode_step(&self, prefix: &[TokenId], enc: &EncoderOutput<T>) -> Result<Vec<T>, ModelError> {
        let logits = self.decoder_logits(prefix, enc)?;
        let mut last = logits.row(logits.rows() - 1).to_vec();
        kernels::softmax_in_place(&mut last);
        Ok(last)
    }

    /// Natural-log next-token probabilities after `prefix`, in `f64`.
    pub fn next_log_probs(&self, prefix: &[TokenId], enc: &EncoderOutput<T>) -> Result<Vec<f64>, ModelError> {
        let logits = self.decoder_logits(prefix, enc)?;
        let last = logits.row(logits.rows() - 1);
        let lse = kernels::log_sum_exp(last);
        Ok(last.iter().map(|&v| (v - lse).to_f64_lossy()).collect())
    }
}
