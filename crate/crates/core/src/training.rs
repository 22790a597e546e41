//! Multi-task training: one mini-batch per language per step, the four task
//! losses averaged, one backward pass, one Adam step.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Language, PostTriplet};
use crate::model::{ModelConfig, ModelError, Seq2Seq};
use crate::par;
use crate::tensor::{ParamStore, Scalar, Tape, TensorError, Var};
use crate::tokenizer::{
    InputMode, ModelInput, SubwordVocabulary, TokenId, TokenizerError, BOS_ID, EOS_ID, PAD_ID,
};

pub const NUM_TASKS: usize = Language::ALL.len();

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("expected exactly {NUM_TASKS} task losses, got {0}")]
    WrongArity(usize),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("no {split} examples for {language}")]
    MissingTask { language: Language, split: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub freeze_norm_and_bias: bool,
    pub input_mode: InputMode,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let toy = ModelConfig::toy(0);
        Self {
            learning_rate: 5e-4,
            batch_size: 30,
            dropout: 0.1,
            max_epochs: 20,
            patience: 3,
            seed: 42,
            freeze_norm_and_bias: true,
            input_mode: InputMode::Both,
            max_grad_norm: Some(1.0),
            d_model: toy.d_model,
            n_heads: toy.n_heads,
            n_layers: toy.n_layers,
            d_ff: toy.d_ff,
            max_encoder_len: toy.max_encoder_len,
            max_decoder_len: toy.max_decoder_len,
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str, line: usize) -> Result<V, TrainingError> {
    raw.parse().map_err(|_| TrainingError::ConfigSyntax {
        line,
        message: format!("invalid value {raw:?} for {key}"),
    })
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |m: &str| Err(TrainingError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive");
        }
        if self.max_grad_norm.is_some_and(|n| n <= 0.0) {
            return fail("max_grad_norm must be positive");
        }
        self.model_config(300).validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            vocab_size,
            max_encoder_len: self.max_encoder_len,
            max_decoder_len: self.max_decoder_len,
            dropout: self.dropout,
        }
    }

    /// Parses a flat `key = value` file. Blank lines and `#` comments are
    /// ignored; keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self, TrainingError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(TrainingError::ConfigSyntax {
                    line,
                    message: format!("expected key = value, got {content:?}"),
                });
            };
            let (key, v) = (key.trim(), value.trim());
            match key {
                "learning_rate" => c.learning_rate = parse_value(key, v, line)?,
                "batch_size" => c.batch_size = parse_value(key, v, line)?,
                "dropout" => c.dropout = parse_value(key, v, line)?,
                "max_epochs" => c.max_epochs = parse_value(key, v, line)?,
                "patience" => c.patience = parse_value(key, v, line)?,
                "seed" => c.seed = parse_value(key, v, line)?,
                "freeze_norm_and_bias" => c.freeze_norm_and_bias = parse_value(key, v, line)?,
                "input_mode" => c.input_mode = parse_value(key, v, line)?,
                "max_grad_norm" => {
                    c.max_grad_norm = match v {
                        "none" | "off" => None,
                        _ => Some(parse_value(key, v, line)?),
                    }
                }
                "d_model" => c.d_model = parse_value(key, v, line)?,
                "n_heads" => c.n_heads = parse_value(key, v, line)?,
                "n_layers" => c.n_layers = parse_value(key, v, line)?,
                "d_ff" => c.d_ff = parse_value(key, v, line)?,
                "max_encoder_len" => c.max_encoder_len = parse_value(key, v, line)?,
                "max_decoder_len" => c.max_decoder_len = parse_value(key, v, line)?,
                _ => {
                    return Err(TrainingError::ConfigSyntax {
                        line,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainingError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

/// One tokenized training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<TokenId>,
    /// Title tokens without BOS or EOS.
    pub title: Vec<TokenId>,
}

impl Example {
    /// Decoder input `BOS ⊕ y` and target `y ⊕ EOS`, with `y` cut so both fit
    /// in `max_decoder_len`.
    pub fn decoder_pair(&self, max_decoder_len: usize) -> (Vec<TokenId>, Vec<TokenId>) {
        let keep = self.title.len().min(max_decoder_len.saturating_sub(1));
        let y = &self.title[..keep];
        let mut input = Vec::with_capacity(keep + 1);
        input.push(BOS_ID);
        input.extend_from_slice(y);
        let mut target = y.to_vec();
        target.push(EOS_ID);
        (input, target)
    }
}

/// Tokenizes triplets for one modality mode. Triplets whose selected
/// modalities are empty are dropped.
pub fn prepare_examples(
    vocab: &SubwordVocabulary,
    triplets: &[PostTriplet],
    mode: InputMode,
    max_encoder_len: usize,
) -> Vec<Example> {
    par::map(triplets, |t| match ModelInput::from_triplet(vocab, t, mode, max_encoder_len) {
        Ok(input) => Some(Example {
            source: input.into_ids(),
            title: vocab.encode(&t.title),
        }),
        Err(_) => None,
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Teacher-forcing batch for one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskBatch {
    pub language: Language,
    pub sources: Vec<Vec<TokenId>>,
    pub decoder_inputs: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
}

impl TaskBatch {
    pub fn new(language: Language, examples: &[&Example], max_decoder_len: usize) -> Self {
        let mut b = Self {
            language,
            sources: Vec::with_capacity(examples.len()),
            decoder_inputs: Vec::with_capacity(examples.len()),
            targets: Vec::with_capacity(examples.len()),
        };
        for e in examples {
            let (input, target) = e.decoder_pair(max_decoder_len);
            b.sources.push(e.source.clone());
            b.decoder_inputs.push(input);
            b.targets.push(target);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn num_target_tokens(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != PAD_ID).count()
    }
}

/// Records the per-task loss of `batch` on `tape`: the mean over non-pad
/// target positions of `−log p(y_j | y_<j, x)`.
pub fn task_loss_var<T: Scalar>(
    model: &Seq2Seq<T>,
    tape: &mut Tape<T>,
    bound: &crate::model::Bound,
    batch: &TaskBatch,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<Var, TrainingError> {
    if batch.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    let sources: Vec<&[TokenId]> = batch.sources.iter().map(Vec::as_slice).collect();
    let inputs: Vec<&[TokenId]> = batch.decoder_inputs.iter().map(Vec::as_slice).collect();
    let logits = model.forward(tape, bound, &sources, &inputs, rng)?;
    let targets: Vec<usize> = batch.targets.iter().flatten().map(|&t| t as usize).collect();
    Ok(tape.cross_entropy(logits, &targets, PAD_ID as usize)?)
}

/// Per-task loss in evaluation mode.
pub fn task_loss<T: Scalar>(model: &Seq2Seq<T>, batch: &TaskBatch) -> Result<f64, TrainingError> {
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape);
    let loss = task_loss_var(model, &mut tape, &bound, batch, &mut None)?;
    Ok(tape.value(loss)?.item()?.to_f64_lossy())
}

/// Average of exactly four task losses.
pub fn multi_task_loss(losses: &[f64]) -> Result<f64, TrainingError> {
    if losses.len() != NUM_TASKS {
        return Err(TrainingError::WrongArity(losses.len()));
    }
    Ok(losses.iter().sum::<f64>() / NUM_TASKS as f64)
}

/// Tape version of [`multi_task_loss`].
pub fn multi_task_loss_var<T: Scalar>(tape: &mut Tape<T>, losses: &[Var]) -> Result<Var, TrainingError> {
    if losses.len() != NUM_TASKS {
        return Err(TrainingError::WrongArity(losses.len()));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / NUM_TASKS as f64)?)
}

/// Adam with an optional freeze of biases and layer-norm parameters and an
/// optional global gradient-norm cap.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub freeze_norm_and_bias: bool,
    pub max_grad_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_norm_and_bias: false,
            max_grad_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(config: &TrainingConfig) -> Self {
        Self {
            freeze_norm_and_bias: config.freeze_norm_and_bias,
            max_grad_norm: config.max_grad_norm,
            ..Self::new(config.learning_rate)
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn trainable(&self, params: &ParamStore<T>, id: crate::tensor::ParamId) -> bool {
        !(self.freeze_norm_and_bias && params.get(id).kind().is_norm_or_bias())
    }

    /// Applies one update from the gradients accumulated in `params`.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<f64, TrainingError> {
        let ids: Vec<_> = params.ids().filter(|&id| self.trainable(params, id)).collect();
        let mut sq = 0.0;
        for &id in &ids {
            let g = params
                .grad(id)
                .ok_or_else(|| TrainingError::MissingGrad(params.get(id).name().to_string()))?;
            sq += g.iter().map(|&x| x.to_f64_lossy().powi(2)).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        if self.m.len() != params.len() {
            self.m = params.iter().map(|_| Vec::new()).collect();
            self.v = params.iter().map(|_| Vec::new()).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = T::from_f64_lossy(self.learning_rate / bc1);
        let eps = T::from_f64_lossy(self.eps);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
        let clip = T::from_f64_lossy(clip);
        for id in ids {
            let grad: Vec<T> = params.grad(id).expect("checked above").to_vec();
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![T::zero(); grad.len()];
                self.v[i] = vec![T::zero(); grad.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = params.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let g = grad[j] * clip;
                m[j] = b1t * m[j] + one_b1 * g;
                v[j] = b2t * v[j] + one_b2 * g * g;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                value[j] = value[j] - step_size * m[j] / denom;
            }
        }
        Ok(norm)
    }
}

/// Per-step training record, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub epoch: usize,
    pub task_losses: BTreeMap<Language, f64>,
    pub combined_loss: f64,
    pub grad_norm: f64,
    /// Set on the last step of an epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

/// Owns the optimizer and dropout randomness across steps.
pub struct Trainer {
    pub optimizer: Adam<f32>,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: &TrainingConfig) -> Self {
        Self {
            optimizer: Adam::from_config(config),
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d20f),
        }
    }

    /// One optimization step on one batch per task. Returns the task losses
    /// (in [`Language::ALL`] order), the combined loss and the gradient norm.
    pub fn step(
        &mut self,
        model: &mut Seq2Seq<f32>,
        batches: &[TaskBatch],
    ) -> Result<([f64; NUM_TASKS], f64, f64), TrainingError> {
        if batches.len() != NUM_TASKS {
            return Err(TrainingError::WrongArity(batches.len()));
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut rng: Option<&mut dyn RngCore> = Some(&mut self.dropout_rng);
        let mut vars = Vec::with_capacity(NUM_TASKS);
        for b in batches {
            vars.push(task_loss_var(model, &mut tape, &bound, b, &mut rng)?);
        }
        let combined = multi_task_loss_var(&mut tape, &vars)?;
        let mut losses = [0.0; NUM_TASKS];
        for (l, &v) in losses.iter_mut().zip(&vars) {
            *l = f64::from(tape.value(v)?.item()?);
        }
        let combined_value = f64::from(tape.value(combined)?.item()?);
        let grads = tape.backward(combined)?;
        drop(tape);
        let params = model.params_mut();
        params.zero_grads();
        params.accumulate(&grads);
        drop(grads);
        let norm = self.optimizer.step(params)?;
        Ok((losses, combined_value, norm))
    }
}

/// Training or validation examples for all four tasks.
#[derive(Clone, Debug, Default)]
pub struct TaskSets {
    pub sets: [Vec<Example>; NUM_TASKS],
}

impl TaskSets {
    pub fn get(&self, language: Language) -> &[Example] {
        &self.sets[language.index()]
    }

    pub fn get_mut(&mut self, language: Language) -> &mut Vec<Example> {
        &mut self.sets[language.index()]
    }

    fn require_all(&self, split: &'static str) -> Result<(), TrainingError> {
        for lang in Language::ALL {
            if self.get(lang).is_empty() {
                return Err(TrainingError::MissingTask { language: lang, split });
            }
        }
        Ok(())
    }
}

/// Combined validation loss: per task, the mean NLL over every target token
/// of the split, then the mean over tasks.
pub fn validation_loss<T: Scalar>(
    model: &Seq2Seq<T>,
    sets: &TaskSets,
    batch_size: usize,
) -> Result<f64, TrainingError> {
    let max_dec = model.config().max_decoder_len;
    let mut per_task = Vec::with_capacity(NUM_TASKS);
    for lang in Language::ALL {
        let chunks: Vec<&[Example]> = sets.get(lang).chunks(batch_size.max(1)).collect();
        if chunks.is_empty() {
            return Err(TrainingError::MissingTask {
                language: lang,
                split: "validation",
            });
        }
        let parts = par::try_map(&chunks, |chunk| {
            let refs: Vec<&Example> = chunk.iter().collect();
            let batch = TaskBatch::new(lang, &refs, max_dec);
            let n = batch.num_target_tokens();
            task_loss(model, &batch).map(|l| (l * n as f64, n))
        })?;
        let (sum, n) = parts.iter().fold((0.0, 0), |(s, c), &(l, k)| (s + l, c + k));
        per_task.push(sum / n as f64);
    }
    multi_task_loss(&per_task)
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub history: Vec<HistoryRecord>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Builds the per-task batches of one epoch. Each task's examples are
/// shuffled and the epoch covers `ceil(min_len / batch_size)` steps.
pub fn epoch_batches(
    train: &TaskSets,
    batch_size: usize,
    max_decoder_len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<TaskBatch>> {
    let min_len = train.sets.iter().map(Vec::len).min().unwrap_or(0);
    let steps = min_len.div_ceil(batch_size);
    let orders: Vec<Vec<usize>> = train
        .sets
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.shuffle(rng);
            idx.truncate(min_len);
            idx
        })
        .collect();
    (0..steps)
        .map(|step| {
            Language::ALL
                .iter()
                .map(|&lang| {
                    let order = &orders[lang.index()];
                    let end = ((step + 1) * batch_size).min(order.len());
                    let refs: Vec<&Example> =
                        order[step * batch_size..end].iter().map(|&i| &train.get(lang)[i]).collect();
                    TaskBatch::new(lang, &refs, max_decoder_len)
                })
                .collect()
        })
        .collect()
}

/// Trains with early stopping on the value returned by `validate` after
/// each epoch (lower is better). On return `model` holds the parameters of
/// the best epoch.
pub fn fit_with_validator(
    model: &mut Seq2Seq<f32>,
    train: &TaskSets,
    config: &TrainingConfig,
    mut validate: impl FnMut(&Seq2Seq<f32>, usize) -> Result<f64, TrainingError>,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<FitReport, TrainingError> {
    config.validate()?;
    train.require_all("training")?;
    let mut trainer = Trainer::new(config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let max_dec = model.config().max_decoder_len;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let batches = epoch_batches(train, config.batch_size, max_dec, &mut shuffle_rng);
        let last = batches.len().saturating_sub(1);
        for (i, step_batches) in batches.iter().enumerate() {
            let (losses, combined, grad_norm) = trainer.step(model, step_batches)?;
            let mut record = HistoryRecord {
                step: trainer.optimizer.steps_taken(),
                epoch,
                task_losses: Language::ALL.iter().map(|&l| (l, losses[l.index()])).collect(),
                combined_loss: combined,
                grad_norm,
                validation_loss: None,
            };
            if i == last {
                record.validation_loss = Some(validate(model, epoch)?);
            }
            on_record(&record);
            history.push(record);
        }
        epochs_run += 1;
        let val = history.last().and_then(|r| r.validation_loss).unwrap_or(f64::INFINITY);
        log::info!("epoch {epoch}: validation loss {val:.4}");
        match &best {
            Some((b, _, _)) if val >= *b => {
                since_best += 1;
                if since_best >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
            _ => {
                best = Some((val, epoch, model.params().clone()));
                since_best = 0;
            }
        }
    }
    let (best_validation, best_epoch, params) = best.expect("at least one epoch runs");
    *model.params_mut() = params;
    model.params_mut().zero_grads();
    Ok(FitReport {
        history,
        best_epoch,
        best_validation,
        epochs_run,
        stopped_early,
    })
}

/// Trains with early stopping on the combined validation loss.
pub fn fit(
    model: &mut Seq2Seq<f32>,
    train: &TaskSets,
    validation: &TaskSets,
    config: &TrainingConfig,
    on_record: impl FnMut(&HistoryRecord),
) -> Result<FitReport, TrainingError> {
    validation.require_all("validation")?;
    let batch = config.batch_size;
    fit_with_validator(model, train, config, |m, _| validation_loss(m, validation, batch), on_record)
}
