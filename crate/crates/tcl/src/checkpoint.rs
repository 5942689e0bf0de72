//! Checkpoints: a JSON manifest of named tensors (name, shape, row-major
//! values) together with the encoder configuration and the vocabulary.
//! Loading validates every tensor shape by name.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Result, TclError};
use crate::ingest::Vocab;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<Scalar>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    config: EncoderConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorRecord>,
}

fn dtype() -> String {
    if cfg!(feature = "f32") { "f32" } else { "f64" }.to_string()
}

/// Serialize a model and its vocabulary to the manifest JSON.
pub fn to_json(params: &ModelParams, vocab: &Vocab) -> Result<String> {
    let manifest = Manifest {
        dtype: dtype(),
        config: params.cfg.clone(),
        vocab: vocab.names().to_vec(),
        tensors: params
            .iter()
            .map(|(_, name, t)| TensorRecord {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&manifest)?)
}

pub fn save(params: &ModelParams, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(params, vocab)?)?;
    Ok(())
}

/// Parse a manifest, rebuilding the vocabulary and every named tensor.
/// Unknown, missing, or reshaped tensors are errors.
pub fn from_json(text: &str) -> Result<(ModelParams, Arc<Vocab>)> {
    let manifest: Manifest = serde_json::from_str(text)?;
    let mut vocab = Vocab::new();
    for name in &manifest.vocab {
        vocab.intern(name);
    }
    let mut params = ModelParams::init(&manifest.config, vocab.len(), 0)?;
    let mut seen = vec![false; params.n_tensors()];
    for rec in manifest.tensors {
        let pid = params
            .pid_by_name(&rec.name)
            .ok_or_else(|| TclError::Config(format!("unexpected tensor `{}`", rec.name)))?;
        let expected = params.tensor(pid).shape();
        if expected != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
            return Err(TclError::ShapeMismatch {
                name: rec.name,
                expected: format!("{}x{}", expected.0, expected.1),
                found: format!("{}x{}", rec.rows, rec.cols),
            });
        }
        *params.tensor_mut(pid) = Tensor::new(rec.rows, rec.cols, rec.data);
        seen[pid.0] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(TclError::MissingTensor(
            params.name_of(crate::autodiff::ParamId(missing)).to_string(),
        ));
    }
    Ok((params, Arc::new(vocab)))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, Arc<Vocab>)> {
    let text = fs::read_to_string(path)?;
    from_json(&text)
}

/// Check that a checkpoint's vocabulary matches the data's, entry by
/// entry (order included: embedding rows are positional).
pub fn check_vocab(checkpoint: &Vocab, data: &Vocab) -> Result<()> {
    if checkpoint.names() != data.names() {
        return Err(TclError::CheckpointVocab(format!(
            "{} checkpoint entries vs {} data entries",
            checkpoint.len(),
            data.len()
        )));
    }
    Ok(())
}
