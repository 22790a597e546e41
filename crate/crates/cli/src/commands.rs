use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use title_forge::corpus::{self, Language, PostTriplet};
use title_forge::decoding::{generate_titles, BeamConfig, DEFAULT_BEAM_WIDTH, MAX_TITLE_TOKENS};
use title_forge::evaluation::{evaluate, Bm25Baseline, EvaluationReport, ModelGenerator, TitleGenerator};
use title_forge::model::Checkpoint;
use title_forge::model::Seq2Seq;
use title_forge::tokenizer::{build_model_input, InputMode, SubwordVocabulary, DEFAULT_VOCAB_SIZE};
use title_forge::training::{fit, prepare_examples, TaskSets, TrainingConfig};

use crate::service;

#[derive(Debug, Parser)]
#[command(name = "title-forge", version, about = "Mine Stack Overflow posts, train a title generator, evaluate and serve it")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus mining and splitting.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Subword vocabulary training.
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Train a model on a split corpus and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or the BM25 baseline on the test split.
    Evaluate(EvaluateArgs),
    /// Generate titles for one post.
    Generate(GenerateArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Stream a Posts.xml dump, keep qualifying questions and write per-language splits.
    Build(CorpusBuildArgs),
}

#[derive(Debug, Args)]
pub struct CorpusBuildArgs {
    /// Stack Exchange Posts.xml file.
    #[arg(long)]
    pub dump: PathBuf,
    /// Output directory; receives <lang>/{train,valid,test}.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Shuffle seed for the split.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Training posts per language.
    #[arg(long)]
    pub train_n: usize,
    /// Test posts per language; the remainder becomes validation.
    #[arg(long)]
    pub test_n: usize,
    /// Comma-separated languages.
    #[arg(long, value_delimiter = ',', default_value = "java,csharp,python,javascript")]
    pub langs: Vec<Language>,
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCommand {
    /// Learn a vocabulary from the training split of a corpus.
    Train(TokenizerTrainArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    /// Corpus directory written by `corpus build`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Target vocabulary size; smaller corpora stop when no pair is left.
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Mode {
    Both,
    CodeOnly,
    DescOnly,
}

impl From<Mode> for InputMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Both => InputMode::Both,
            Mode::CodeOnly => InputMode::CodeOnly,
            Mode::DescOnly => InputMode::DescOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory written by `corpus build`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's input_mode.
    #[arg(long, value_enum)]
    pub input_mode: Option<Mode>,
    /// Existing vocabulary; otherwise one is learned from the training split.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Target size when learning a vocabulary.
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
    /// Write history records here instead of stdout.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baseline {
    Bm25,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub ckpt: Option<PathBuf>,
    /// Evaluate a retrieval baseline instead of a checkpoint.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Vocabulary, when the checkpoint does not embed one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Corpus directory written by `corpus build`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub input_mode: Mode,
    /// JSON report to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Beam width for model decoding.
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary, when the checkpoint does not embed one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub lang: Language,
    /// Problem description, inline or as a path to a file.
    #[arg(long, default_value = "")]
    pub desc: String,
    /// Code snippet, inline or as a path to a file.
    #[arg(long, default_value = "")]
    pub code: String,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam: usize,
    #[arg(long, default_value_t = 3)]
    pub num_titles: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocabulary, when the checkpoint does not embed one.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Beam width used when a request omits beam_width.
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam_default: usize,
    /// Concurrent decodes; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(CorpusCommand::Build(a)) => corpus_build(a),
        Command::Tokenizer(TokenizerCommand::Train(a)) => tokenizer_train(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Serve(a) => serve(a),
    }
}

fn corpus_build(a: CorpusBuildArgs) -> Result<()> {
    let file = File::open(&a.dump).with_context(|| format!("cannot open dump {}", a.dump.display()))?;
    let mined = corpus::mine(BufReader::new(file), &a.langs)?;
    log::info!("mining report: {:?}", mined.report);
    let mut summary = BTreeMap::new();
    for (lang, triplets) in mined.by_language {
        let have = triplets.len();
        let split = corpus::split_corpus(triplets, a.seed, a.train_n, a.test_n)
            .with_context(|| format!("splitting {lang} ({have} triplets)"))?;
        corpus::write_split(&a.out, lang, &split)?;
        summary.insert(
            lang,
            serde_json::json!({
                "train": split.train.len(),
                "valid": split.validation.len(),
                "test": split.test.len(),
            }),
        );
    }
    let out = serde_json::json!({ "report": mined.report, "splits": summary });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn training_texts(splits: &BTreeMap<Language, corpus::CorpusSplit>) -> Vec<String> {
    let mut texts = Vec::new();
    for (lang, s) in splits {
        texts.push(lang.prefix().to_string());
        for t in &s.train {
            texts.push(t.description.clone());
            texts.push(t.code.clone());
            texts.push(t.title.clone());
        }
    }
    texts
}

fn learn_vocab(splits: &BTreeMap<Language, corpus::CorpusSplit>, size: usize) -> Result<SubwordVocabulary> {
    let vocab = SubwordVocabulary::train_up_to(&training_texts(splits), size)?;
    if vocab.len() < size {
        log::warn!("corpus exhausted its pairs at {} pieces (asked for {size})", vocab.len());
    }
    Ok(vocab)
}

fn read_corpus(dir: &Path) -> Result<BTreeMap<Language, corpus::CorpusSplit>> {
    let splits = corpus::read_corpus_dir(dir)?;
    if splits.is_empty() {
        bail!("{} holds no language directories", dir.display());
    }
    Ok(splits)
}

fn tokenizer_train(a: TokenizerTrainArgs) -> Result<()> {
    let splits = read_corpus(&a.corpus)?;
    let vocab = learn_vocab(&splits, a.vocab_size)?;
    vocab.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} pieces, {} merges -> {}", vocab.len(), vocab.merges().len(), a.out.display());
    Ok(())
}

fn load_vocab(path: &Path) -> Result<SubwordVocabulary> {
    SubwordVocabulary::load(path).with_context(|| format!("reading vocabulary {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(m) = a.input_mode {
        config.input_mode = m.into();
    }
    config.validate()?;
    let splits = read_corpus(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(p) => load_vocab(p)?,
        None => learn_vocab(&splits, a.vocab_size)?,
    };
    let mut train_sets = TaskSets::default();
    let mut valid_sets = TaskSets::default();
    for (&lang, s) in &splits {
        *train_sets.get_mut(lang) = prepare_examples(&vocab, &s.train, config.input_mode, config.max_encoder_len);
        *valid_sets.get_mut(lang) =
            prepare_examples(&vocab, &s.validation, config.input_mode, config.max_encoder_len);
    }
    let model_cfg = config.model_config(vocab.len());
    let mut model = Seq2Seq::<f32>::new(model_cfg, config.seed)?;
    log::info!("training {} parameters", model.params().num_elements());

    let mut sink: Box<dyn Write> = match &a.history {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let mut write_err = None;
    let report = fit(&mut model, &train_sets, &valid_sets, &config, |r| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("record serializes");
            if let Err(e) = writeln!(sink, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context("writing history"));
    }
    sink.flush()?;
    let ckpt = Checkpoint::new(model, Some(vocab));
    ckpt.save(&a.out)?;
    log::info!(
        "best epoch {} (validation {:.4}), {} epochs, checkpoint {} id {}",
        report.best_epoch,
        report.best_validation,
        report.epochs_run,
        a.out.display(),
        ckpt.model.model_id()
    );
    Ok(())
}

/// Loads a checkpoint and resolves its vocabulary: an explicit file wins
/// over the embedded copy.
pub fn load_model(ckpt: &Path, vocab: Option<&Path>) -> Result<(Seq2Seq<f32>, SubwordVocabulary)> {
    let loaded = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let vocab = match (vocab, loaded.vocabulary) {
        (Some(p), _) => load_vocab(p)?,
        (None, Some(v)) => v,
        (None, None) => bail!("{} has no embedded vocabulary; pass --vocab", ckpt.display()),
    };
    let expected = loaded.model.config().vocab_size;
    if vocab.len() != expected {
        bail!("vocabulary has {} pieces but the model expects {expected}", vocab.len());
    }
    Ok((loaded.model, vocab))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let splits = read_corpus(&a.corpus)?;
    let test: Vec<PostTriplet> = splits.values().flat_map(|s| s.test.iter().cloned()).collect();
    let mode: InputMode = a.input_mode.into();
    let report: EvaluationReport = match (&a.ckpt, a.baseline) {
        (Some(ckpt), _) => {
            let (model, vocab) = load_model(ckpt, a.vocab.as_deref())?;
            let beam = BeamConfig {
                beam_width: a.beam,
                ..BeamConfig::default()
            };
            beam.validate()?;
            let generator = ModelGenerator {
                model: &model,
                vocab: &vocab,
                beam,
            };
            run_evaluation(&generator, &test, mode)?
        }
        (None, Some(Baseline::Bm25)) => {
            let train = splits.iter().map(|(&l, s)| (l, s.train.clone())).collect();
            run_evaluation(&Bm25Baseline::build(&train)?, &test, mode)?
        }
        (None, None) => bail!("pass --ckpt or --baseline"),
    };
    fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", a.report.display()))?;
    for r in &report.records {
        println!(
            "{:<10} n={:<6} R1 {:>7.3}  R2 {:>7.3}  RL {:>7.3}",
            r.language.as_str(),
            r.count,
            r.rouge1.f1,
            r.rouge2.f1,
            r.rouge_l.f1
        );
    }
    Ok(())
}

fn run_evaluation(g: &dyn TitleGenerator, test: &[PostTriplet], mode: InputMode) -> Result<EvaluationReport> {
    log::info!("evaluating {} on {} posts", g.name(), test.len());
    Ok(evaluate(g, test, mode)?)
}

/// Reads `value` as a file when it names one, otherwise returns it as is.
fn text_or_file(value: &str) -> Result<String> {
    let p = Path::new(value);
    if !value.is_empty() && p.is_file() {
        return fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    }
    Ok(value.to_string())
}

fn generate(a: GenerateArgs) -> Result<()> {
    if a.num_titles == 0 || a.num_titles > a.beam {
        bail!("--num-titles must be between 1 and --beam ({})", a.beam);
    }
    let (model, vocab) = load_model(&a.ckpt, a.vocab.as_deref())?;
    let desc = text_or_file(&a.desc)?;
    let code = text_or_file(&a.code)?;
    let input = build_model_input(&vocab, a.lang, &desc, &code, model.config().max_encoder_len)?;
    let cfg = BeamConfig {
        beam_width: a.beam,
        max_len: MAX_TITLE_TOKENS.min(model.config().max_decoder_len),
        ..BeamConfig::default()
    };
    let titles = generate_titles(&model, &vocab, &input, &cfg, a.num_titles)?;
    let mut out = io::stdout().lock();
    for t in titles {
        writeln!(out, "{}", t.text)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let workers = a.workers.unwrap_or_else(service::default_workers);
    if a.beam_default == 0 {
        bail!("--beam-default must be at least 1");
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    rt.block_on(async move {
        let state = service::ServiceState::new(a.beam_default, workers);
        let listener = tokio::net::TcpListener::bind(a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        log::info!("listening on {}", listener.local_addr()?);
        let loader = state.clone();
        let (ckpt, vocab) = (a.ckpt, a.vocab);
        let load = tokio::task::spawn_blocking(move || -> Result<()> {
            let (model, vocab) = load_model(&ckpt, vocab.as_deref())?;
            let id = model.model_id();
            loader.install(model, vocab);
            log::info!("model {id} ready");
            Ok(())
        });
        let server = tokio::spawn(async move { axum::serve(listener, service::router(state)).await });
        match load.await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(e),
            Err(e) => return Err(anyhow!(e).context("model loader panicked")),
        }
        server.await?.context("server stopped")
    })
}
