//! Model artifacts: a TOML manifest plus a blob of little-endian `f32`
//! values concatenated in directory order.
//!
//! Weights are always stored as `f32`; an `f64` model is rounded on save.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SentimentModel};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{Encoder, LabelSpace, Sentiment, Vocabulary};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub max_len: usize,
    pub kernel: usize,
    pub fold_case: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weight blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub classes: Vec<Sentiment>,
    pub encoder: EncoderSettings,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorRecord>,
}

impl Manifest {
    fn blob_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum()
    }
}

/// Serializes `model` to (manifest text, weight blob).
pub fn to_bytes<S: Scalar>(model: &SentimentModel<S>) -> Result<(String, Vec<u8>)> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut blob = Vec::new();
    for entry in model.params.entries() {
        tensors.push(TensorRecord {
            name: entry.name.clone(),
            shape: entry.tensor.shape().to_vec(),
            offset: blob.len(),
            trainable: entry.trainable,
        });
        for v in entry.tensor.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        classes: model.classes.classes().to_vec(),
        encoder: EncoderSettings {
            max_len: model.encoder.max_len,
            kernel: model.encoder.kernel,
            fold_case: model.encoder.fold_case,
        },
        config: model.config.clone(),
        vocabulary: model.encoder.vocab.tokens().to_vec(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    Ok((text, blob))
}

pub fn from_bytes<S: Scalar>(manifest: &str, blob: &[u8]) -> Result<SentimentModel<S>> {
    let manifest: Manifest = toml::from_str(manifest).map_err(|e| Error::Serde(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Incompatible(format!(
            "manifest schema version {} is not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let expected = manifest.blob_len();
    if blob.len() != expected {
        return Err(Error::Incompatible(format!(
            "weight blob has {} bytes, manifest expects {expected}",
            blob.len()
        )));
    }
    let classes = LabelSpace::from_classes(manifest.classes)?;
    if classes.len() != manifest.config.classes {
        return Err(Error::Incompatible(format!(
            "manifest lists {} classes but the config has {}",
            classes.len(),
            manifest.config.classes
        )));
    }
    let vocab = Vocabulary::from_tokens(manifest.vocabulary)?;
    let encoder = Encoder {
        vocab,
        max_len: manifest.encoder.max_len,
        kernel: manifest.encoder.kernel,
        fold_case: manifest.encoder.fold_case,
    };
    let mut params = ParamStore::new();
    let mut cursor = 0;
    for rec in &manifest.tensors {
        if rec.offset != cursor {
            return Err(Error::Incompatible(format!(
                "tensor {:?} starts at byte {} but the previous tensor ends at {cursor}",
                rec.name, rec.offset
            )));
        }
        let n: usize = rec.shape.iter().product();
        let data: Vec<S> = blob[cursor..cursor + 4 * n]
            .chunks_exact(4)
            .map(|b| S::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        cursor += 4 * n;
        params.insert(&rec.name, Tensor::new(rec.shape.clone(), data)?, rec.trainable)?;
    }
    let model = SentimentModel::from_parts(manifest.config, encoder, params)?;
    if model.classes != classes {
        return Err(Error::Incompatible("class order differs from the config's label space".into()));
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &SentimentModel<S>, dir: &Path) -> Result<()> {
    let (manifest, blob) = to_bytes(model)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, manifest).map_err(|e| Error::io(&m, e))?;
    let w = dir.join(WEIGHTS_FILE);
    fs::write(&w, blob).map_err(|e| Error::io(&w, e))?;
    Ok(())
}

pub fn load<S: Scalar>(dir: &Path) -> Result<SentimentModel<S>> {
    let m = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let w = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&w).map_err(|e| Error::io(&w, e))?;
    from_bytes(&manifest, &blob)
}
