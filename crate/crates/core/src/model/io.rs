//! Single-file model container.
//!
//! ```text
//! "MMCR" | u16 version | 32-byte vocabulary digest | u32 header length |
//! JSON header | f64 parameters | f64 statistics | SHA-256 of all preceding bytes
//! ```
//! Integers and floats are little endian.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, ClassifierModel, ModelMetadata};
use crate::error::{Error, Result};
use crate::manifest::LabelVocabulary;
use crate::preprocess::PreprocessConfig;

pub const MAGIC: &[u8; 4] = b"MMCR";
pub const FORMAT_VERSION: u16 = 1;
const SCHEMA: &str = "mmcr-model/1";
const PREFIX: usize = 4 + 2 + 32 + 4;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    architecture: Architecture,
    vocabulary: LabelVocabulary,
    preprocess: PreprocessConfig,
    metadata: ModelMetadata,
    n_params: usize,
    n_stats: usize,
}

fn body(model: &ClassifierModel) -> Vec<u8> {
    let header = Header {
        schema: SCHEMA.into(),
        architecture: model.architecture().clone(),
        vocabulary: (**model.vocabulary()).clone(),
        preprocess: *model.preprocess(),
        metadata: model.metadata().clone(),
        n_params: model.params().len(),
        n_stats: model.stats().len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * (header.n_params + header.n_stats) + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.vocabulary().digest_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params().iter().chain(model.stats()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn model_to_bytes(model: &ClassifierModel) -> Vec<u8> {
    let mut out = body(model);
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

pub(crate) fn content_digest(model: &ClassifierModel) -> String {
    hex::encode(Sha256::digest(body(model)))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ClassifierModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing MMCR magic".into()));
    }
    if bytes.len() < PREFIX + 32 {
        return Err(Error::Corrupt("file is truncated".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::SchemaVersion(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let (content, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(content).as_slice() != trailer {
        return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[38..42].try_into().unwrap()) as usize;
    let Some(json) = content.get(PREFIX..PREFIX + header_len) else {
        return Err(Error::Corrupt("header length exceeds file".into()));
    };
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    if value.get("vocabulary").map_or(true, |v| v.is_null()) {
        return Err(Error::SchemaVersion("header carries no vocabulary".into()));
    }
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(SCHEMA) => {}
        other => {
            return Err(Error::SchemaVersion(format!(
                "header schema {other:?}, expected {SCHEMA:?}"
            )))
        }
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let vocabulary = LabelVocabulary::new(header.vocabulary.classes().to_vec(), header.vocabulary.granularity())
        .map_err(|e| Error::Corrupt(format!("vocabulary: {e}")))?;
    if vocabulary.digest_bytes().as_slice() != &bytes[6..38] {
        return Err(Error::Corrupt("vocabulary digest mismatch".into()));
    }
    let floats = &content[PREFIX + header_len..];
    if floats.len() != 8 * (header.n_params + header.n_stats) {
        return Err(Error::Corrupt(format!(
            "expected {} weight bytes, found {}",
            8 * (header.n_params + header.n_stats),
            floats.len()
        )));
    }
    let mut values = floats.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params: Vec<f64> = values.by_ref().take(header.n_params).collect();
    let stats: Vec<f64> = values.collect();
    ClassifierModel::from_parts(
        &header.architecture,
        Arc::new(vocabulary),
        params,
        stats,
        header.preprocess,
        header.metadata,
    )
    .map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        Error::SchemaVersion(m) => Error::SchemaVersion(format!("{}: {m}", path.display())),
        other => other,
    })
}
