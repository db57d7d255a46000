use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use diffcore::{BatchNormState, DiffArray};
use serde::{Deserialize, Serialize};

use super::{BranchId, DualBranchModel, ModelConfig, Stage};
use crate::error::{FvError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    version: u32,
    hyperparams: ModelConfig,
    stage: Stage,
    seed: u64,
    frozen: Vec<BranchId>,
    arrays: BTreeMap<String, ArrayRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayRecord {
    shape: Vec<usize>,
    /// Base64 of the little-endian float64 values.
    data: String,
}

fn encode(shape: &[usize], data: &[f64]) -> ArrayRecord {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    ArrayRecord {
        shape: shape.to_vec(),
        data: STANDARD.encode(bytes),
    }
}

fn decode(name: &str, record: &ArrayRecord) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD
        .decode(&record.data)
        .map_err(|e| format!("array {name}: bad base64: {e}"))?;
    let n: usize = record.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(format!(
            "array {name}: shape {:?} needs {} bytes, found {}",
            record.shape,
            n * 8,
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn running_names(layer: &str) -> (String, String) {
    (format!("{layer}.running_mean"), format!("{layer}.running_var"))
}

/// Serializes the model to its JSON envelope bytes.
pub fn checkpoint_bytes(model: &DualBranchModel) -> Result<Vec<u8>> {
    let mut arrays = BTreeMap::new();
    for (name, p) in model.params() {
        arrays.insert(name.clone(), encode(p.shape(), p.data()));
    }
    for (layer, state) in model.batchnorm_states() {
        let (m, v) = running_names(layer);
        let c = state.channels();
        arrays.insert(m, encode(&[c], &state.running_mean));
        arrays.insert(v, encode(&[c], &state.running_var));
    }
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        hyperparams: model.config().clone(),
        stage: model.stage(),
        seed: model.seed(),
        frozen: model.frozen_set().iter().copied().collect(),
        arrays,
    };
    serde_json::to_vec(&env).map_err(|e| FvError::Invalid(format!("checkpoint serialization: {e}")))
}

/// Writes the checkpoint through a temporary file so an existing file is
/// never left half-written.
pub fn save_checkpoint(model: &DualBranchModel, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| FvError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FvError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DualBranchModel> {
    let bytes = fs::read(path).map_err(|e| FvError::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|msg| FvError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

pub(crate) fn checkpoint_from_bytes(bytes: &[u8]) -> std::result::Result<DualBranchModel, String> {
    let mut env: Envelope = serde_json::from_slice(bytes).map_err(|e| format!("malformed envelope: {e}"))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            env.version
        ));
    }
    let config = env.hyperparams;
    config.validate().map_err(|e| e.to_string())?;

    let mut take = |name: &str, shape: &[usize]| -> std::result::Result<Vec<f64>, String> {
        let record = env
            .arrays
            .remove(name)
            .ok_or_else(|| format!("missing array {name}"))?;
        if record.shape != shape {
            return Err(format!(
                "array {name} has shape {:?}, hyperparameters declare {shape:?}",
                record.shape
            ));
        }
        decode(name, &record)
    };

    let mut params = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let data = take(&name, &shape)?;
        let array = DiffArray::new(shape, data).map_err(|e| e.to_string())?;
        params.insert(name, array);
    }
    let mut bn = BTreeMap::new();
    for (layer, c) in config.batchnorm_layers() {
        let (m, v) = running_names(&layer);
        let mut state = BatchNormState::new(c);
        state.running_mean = take(&m, &[c])?;
        state.running_var = take(&v, &[c])?;
        bn.insert(layer, state);
    }
    if let Some(extra) = env.arrays.keys().next() {
        return Err(format!("unexpected array {extra}"));
    }
    let frozen: BTreeSet<BranchId> = env.frozen.into_iter().collect();
    if frozen.contains(&BranchId::Update) && !config.dual {
        return Err("frozen list names a branch the model does not have".into());
    }
    Ok(DualBranchModel::restore(config, params, bn, frozen, env.stage, env.seed))
}
