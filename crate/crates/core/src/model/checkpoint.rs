//! On-disk model format: `model.json` (config, label scheme, parameter
//! manifest, fingerprint), `params.bin` (little-endian f64 in manifest
//! order) and `vocab.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{fingerprint, EncoderConfig, LayeredModel, ParamMap};
use crate::data::{LabelScheme, Vocab};
use crate::error::{Error, Result};
use crate::util::write_atomic;

const MODEL_FILE: &str = "model.json";
const PARAMS_FILE: &str = "params.bin";
const VOCAB_FILE: &str = "vocab.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: EncoderConfig,
    scheme: LabelScheme,
    params: Vec<ParamEntry>,
    fingerprint: String,
}

/// Writes the model atomically: everything goes to a sibling temp
/// directory which then replaces `dir`.
pub fn save(model: &LayeredModel, vocab: &Vocab, dir: &Path) -> Result<()> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} pieces, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid checkpoint path {}", dir.display())))?
        .to_string_lossy();
    let tmp: PathBuf = parent.join(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, v) in &model.params {
        entries.push(ParamEntry {
            name: name.clone(),
            rows: v.nrows(),
            cols: v.ncols(),
        });
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        scheme: model.scheme.clone(),
        params: entries,
        fingerprint: model.fingerprint(),
    };
    write_atomic(&tmp.join(PARAMS_FILE), &bytes)?;
    write_atomic(
        &tmp.join(MODEL_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    vocab.save(&tmp.join(VOCAB_FILE))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load(dir: &Path) -> Result<(LayeredModel, Vocab)> {
    let manifest_path = dir.join(MODEL_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols * 8).sum();
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{} holds {} bytes, manifest describes {expected}",
            params_path.display(),
            bytes.len()
        )));
    }
    let mut params = ParamMap::new();
    let mut chunks = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for entry in &manifest.params {
        let values: Vec<f64> = chunks.by_ref().take(entry.rows * entry.cols).collect();
        let array = Array2::from_shape_vec((entry.rows, entry.cols), values).map_err(|e| Error::Data(e.to_string()))?;
        params.insert(entry.name.clone(), array);
    }
    if fingerprint(&params) != manifest.fingerprint {
        return Err(Error::Data(format!("{} fingerprint mismatch", dir.display())));
    }
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != manifest.config.vocab_size {
        return Err(Error::Data("vocabulary size does not match model".into()));
    }
    Ok((
        LayeredModel {
            config: manifest.config,
            scheme: manifest.scheme,
            params,
        },
        vocab,
    ))
}
