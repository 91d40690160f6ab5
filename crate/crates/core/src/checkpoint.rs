//! Checkpoints: one `TJT1` file per parameter tensor plus `index.json`.
//!
//! ```text
//! <dir>/index.json
//! <dir>/params/<name>.tjt
//! ```
//!
//! The index records the format tag, the model configuration, an opaque
//! `run` object (whatever configuration the caller wants to keep alongside
//! the weights) and every parameter's name, shape and file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_tensor, write_tensor, Params};

pub const CHECKPOINT_INDEX: &str = "index.json";
pub const CHECKPOINT_FORMAT: &str = "tjstg-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format: String,
    pub model: ModelConfig,
    pub run: serde_json::Value,
    pub parameters: Vec<ParamEntry>,
}

/// Writes `model` under `dir`, creating it if needed.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, run: &serde_json::Value) -> Result<CheckpointIndex> {
    let dir = dir.as_ref();
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut parameters = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let file = format!("params/{name}.tjt");
        write_tensor(dir.join(&file), t)?;
        parameters.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), file });
    }
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.to_string(),
        model: model.config.clone(),
        run: run.clone(),
        parameters,
    };
    let path = dir.join(CHECKPOINT_INDEX);
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, CheckpointIndex)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&path, format!("unknown format {:?}", index.format)));
    }
    let mut params = Params::new();
    for p in &index.parameters {
        let file = dir.join(&p.file);
        let t = read_tensor(&file)?;
        if t.shape() != p.shape.as_slice() {
            return Err(Error::format(&file, format!("expected shape {:?}, got {:?}", p.shape, t.shape())));
        }
        params.insert(p.name.clone(), t);
    }
    let model = Model::from_params(index.model.clone(), params)?;
    Ok((model, index))
}
