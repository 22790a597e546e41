//! Checkpoint file: a header line, a JSON manifest, then raw little-endian
//! `f32` tensor data.
//!
//! ```text
//! title-forge-checkpoint 1\n
//! <manifest byte length>\n
//! <manifest JSON>
//! <tensor data>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelConfig, ModelError, Seq2Seq};
use crate::tensor::ParamKind;
use crate::tokenizer::{SubwordVocabulary, TokenizerError};

const MAGIC: &str = "title-forge-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file: {0}")]
    Format(String),
    #[error("checksum mismatch: manifest says {expected}, data hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("embedded vocabulary: {0}")]
    Vocabulary(#[from] TokenizerError),
    #[error("embedded vocabulary has {vocab} pieces but the model expects {model}")]
    VocabularySize { vocab: usize, model: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    data_bytes: usize,
    sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocabulary: Option<String>,
}

/// A trained model plus, optionally, the vocabulary it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Seq2Seq<f32>,
    pub vocabulary: Option<SubwordVocabulary>,
}

fn tensor_data(model: &Seq2Seq<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(model.params.num_elements() * 4);
    for (_, p) in model.params.iter() {
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

impl Seq2Seq<f32> {
    /// Hex SHA-256 of the serialized tensor data.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(tensor_data(self)))
    }

    /// Short identifier derived from the weights.
    pub fn model_id(&self) -> String {
        self.checksum()[..12].to_string()
    }
}

impl Checkpoint {
    pub fn new(model: Seq2Seq<f32>, vocabulary: Option<SubwordVocabulary>) -> Self {
        Self { model, vocabulary }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let data = tensor_data(&self.model);
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .iter()
            .map(|(_, p)| {
                let e = TensorEntry {
                    name: p.name().to_string(),
                    kind: p.kind(),
                    shape: p.value().shape().to_vec(),
                    offset,
                };
                offset += p.value().len() * 4;
                e
            })
            .collect();
        let manifest = Manifest {
            config: self.model.config.clone(),
            tensors,
            data_bytes: data.len(),
            sha256: hex::encode(Sha256::digest(&data)),
            vocabulary: self.vocabulary.as_ref().map(SubwordVocabulary::to_text),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = format!("{MAGIC}\n{}\n", json.len()).into_bytes();
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Format(m.to_string());
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .and_then(|r| r.strip_prefix(b"\n"))
            .ok_or_else(|| bad("missing header line"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing manifest length"))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed manifest length"))?;
        let rest = &rest[nl + 1..];
        if rest.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&rest[..len]).map_err(|e| bad(&format!("manifest: {e}")))?;
        let data = &rest[len..];
        if data.len() != manifest.data_bytes {
            return Err(bad(&format!(
                "data section is {} bytes, manifest says {}",
                data.len(),
                manifest.data_bytes
            )));
        }
        let actual = hex::encode(Sha256::digest(data));
        if actual != manifest.sha256 {
            return Err(CheckpointError::Checksum {
                expected: manifest.sha256,
                actual,
            });
        }

        let mut model = Seq2Seq::<f32>::zeroed(manifest.config)?;
        if manifest.tensors.len() != model.params.len() {
            return Err(bad(&format!(
                "{} tensors listed, the configured model has {}",
                manifest.tensors.len(),
                model.params.len()
            )));
        }
        for entry in &manifest.tensors {
            let tensor_err = |m: &str| CheckpointError::Tensor {
                name: entry.name.clone(),
                message: m.to_string(),
            };
            let id = model.params.id(&entry.name).ok_or_else(|| tensor_err("unknown name"))?;
            let expected = model.params.get(id);
            if expected.value().shape() != entry.shape.as_slice() || expected.kind() != entry.kind {
                return Err(tensor_err("shape or kind does not match the config"));
            }
            let n = expected.value().len();
            let end = entry.offset.checked_add(n * 4).filter(|&e| e <= data.len());
            let Some(end) = end else {
                return Err(tensor_err("data range out of bounds"));
            };
            for (dst, chunk) in model
                .params
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .zip(data[entry.offset..end].chunks_exact(4))
            {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
        }
        let vocabulary = match manifest.vocabulary {
            Some(text) => {
                let v = SubwordVocabulary::from_text(&text)?;
                if v.len() != model.config.vocab_size {
                    return Err(CheckpointError::VocabularySize {
                        vocab: v.len(),
                        model: model.config.vocab_size,
                    });
                }
                Some(v)
            }
            None => None,
        };
        Ok(Self { model, vocabulary })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
