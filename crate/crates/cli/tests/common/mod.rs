#![allow(dead_code)]

use std::path::{Path, PathBuf};

use title_forge::corpus::{write_split, CorpusSplit, Language, PostTriplet};
use title_forge::model::Checkpoint;
use title_forge::model::{ModelConfig, Seq2Seq};
use title_forge::tokenizer::SubwordVocabulary;

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        vocab_size,
        max_encoder_len: 64,
        max_decoder_len: 8,
        dropout: 0.0,
    }
}

pub fn tiny_model() -> (Seq2Seq<f32>, SubwordVocabulary) {
    let vocab = SubwordVocabulary::bytes_only();
    let model = Seq2Seq::new(tiny_config(vocab.len()), 11).unwrap();
    (model, vocab)
}

/// Writes a checkpoint with the vocabulary embedded and returns its path.
pub fn write_checkpoint(dir: &Path) -> PathBuf {
    let (model, vocab) = tiny_model();
    let path = dir.join("tiny.ckpt");
    Checkpoint::new(model, Some(vocab)).save(&path).unwrap();
    path
}

fn triplet(id: u64, language: Language) -> PostTriplet {
    let topic = ["list", "map", "string", "file", "thread", "socket"][id as usize % 6];
    PostTriplet {
        post_id: id,
        language,
        description: format!("How can I sort a {topic} in {}?", language.as_str()),
        code: format!("sort({topic}_{id});"),
        title: format!("Sort a {topic}"),
    }
}

/// A corpus directory with every language and `train`/2/2 posts per split.
pub fn write_corpus(dir: &Path, train: usize) -> PathBuf {
    let root = dir.join("corpus");
    for lang in Language::ALL {
        let base = 1000 * (lang.index() as u64 + 1);
        let mk = |r: std::ops::Range<u64>| r.map(|i| triplet(base + i, lang)).collect::<Vec<_>>();
        let split = CorpusSplit {
            train: mk(0..train as u64),
            validation: mk(100..102),
            test: mk(200..202),
            seed: 0,
        };
        write_split(&root, lang, &split).unwrap();
    }
    root
}
