//! Checkpoints: a JSON manifest describing the parameter layout and a
//! single rank-1 f64 tensor holding all parameters in layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ViTConfig, ViTModel};
use crate::error::{Error, Result};
use crate::store::{read_json, read_tensor, write_json, write_tensor, Tensor};

const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ViTConfig,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    pub file: String,
}

impl CheckpointManifest {
    pub fn for_model(model: &ViTModel) -> Self {
        Self {
            config: model.config().clone(),
            seed: model.config().seed,
            params: model
                .layout()
                .specs
                .iter()
                .map(|s| ParamEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    offset: s.offset,
                })
                .collect(),
            file: PARAMS_FILE.to_string(),
        }
    }
}

pub fn save_checkpoint(model: &ViTModel, dir: &Path) -> Result<()> {
    let manifest = CheckpointManifest::for_model(model);
    let params = Tensor::f64(&[model.params().len()], model.params().to_vec())?;
    write_tensor(&dir.join(PARAMS_FILE), &params)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ViTModel> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    let expected = CheckpointManifest::for_model(&ViTModel::init(&manifest.config)?);
    if expected.params != manifest.params {
        return Err(Error::integrity(
            manifest_path,
            0,
            "parameter layout does not match the configured architecture",
        ));
    }
    let params_path = dir.join(&manifest.file);
    let tensor = read_tensor(&params_path)?;
    if tensor.shape.len() != 1 {
        return Err(Error::integrity(params_path, 9, "parameter tensor must be rank 1"));
    }
    let params = tensor.into_f64()?;
    ViTModel::from_params(&manifest.config, params)
}
