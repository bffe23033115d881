//! On-disk form of trained networks: a JSON header next to an `MFWB` weight blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binfmt::F32Matrix;
use crate::error::{Error, Result};
use crate::nn::{param_count, Activation};

pub const MODEL_FORMAT: &str = "mfwb-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsRef {
    pub file: String,
    pub rows: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub kind: String,
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub config: serde_json::Value,
    pub weights: WeightsRef,
}

/// Header and blob paths for a model stored at `path` (either extension works).
pub fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

pub fn write_model(
    path: &Path,
    kind: &str,
    sizes: &[usize],
    activation: Activation,
    seed: u64,
    config: serde_json::Value,
    params: &[f64],
) -> Result<()> {
    let (header_path, blob_path) = model_paths(path);
    let blob = F32Matrix::from_rows([params], params.len());
    blob.write(&blob_path)?;
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: 1,
        kind: kind.into(),
        sizes: sizes.to_vec(),
        activation,
        seed,
        config,
        weights: WeightsRef {
            file: blob_path
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string(),
            rows: 1,
            dim: params.len(),
        },
    };
    let text = serde_json::to_string_pretty(&header)?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))
}

pub fn read_model(path: &Path, kind: &str, param_len: impl Fn(&[usize]) -> usize) -> Result<(ModelHeader, Vec<f64>)> {
    let (header_path, _) = model_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: ModelHeader = serde_json::from_str(&text)?;
    if header.format != MODEL_FORMAT || header.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "{} is a `{}`/`{}` file, expected `{MODEL_FORMAT}`/`{kind}`",
            header_path.display(),
            header.format,
            header.kind
        )));
    }
    let base = header_path.parent().unwrap_or_else(|| Path::new("."));
    let blob = F32Matrix::read(&base.join(&header.weights.file))?;
    let expected = param_len(&header.sizes);
    if blob.data.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: blob.data.len(),
            context: "model weights".into(),
        });
    }
    let params = blob.data.iter().map(|&v| v as f64).collect();
    Ok((header, params))
}

pub fn mlp_param_len(sizes: &[usize]) -> usize {
    if sizes.len() < 2 {
        0
    } else {
        param_count(sizes)
    }
}
