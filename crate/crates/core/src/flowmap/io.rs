//! Model files.
//!
//! A model file is a header line `hits-flowmap v1` followed by a JSON object:
//!
//! ```text
//! hits-flowmap v1
//! {"format_version":1,"system":"harmonic","dt":0.016,"layer_dims":[2,64,2],
//!  "weights":[[[..],..],..],"biases":[[..],..],"train_config_digest":"..."}
//! ```
//!
//! Weights are stored row by row with shape `(fan_in, fan_out)`. Floats are
//! written in shortest round-trip form, so a save/load cycle is bitwise exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{FlowMapModel, Params};
use crate::dynamics::SystemSpec;
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const HEADER: &str = "hits-flowmap v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    system: String,
    dt: f64,
    layer_dims: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    train_config_digest: Option<String>,
}

pub(crate) fn to_text(m: &FlowMapModel) -> String {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        system: m.system.clone(),
        dt: m.dt,
        layer_dims: m.layer_dims().to_vec(),
        weights: m
            .params
            .weights
            .iter()
            .map(|w| w.outer_iter().map(|r| r.to_vec()).collect())
            .collect(),
        biases: m.params.biases.iter().map(|b| b.to_vec()).collect(),
        train_config_digest: m.train_config_digest.clone(),
    };
    format!("{HEADER}\n{}\n", serde_json::to_string(&file).expect("model serializes"))
}

pub(crate) fn from_text(text: &str) -> Result<FlowMapModel> {
    let (header, body) = text.split_once('\n').unwrap_or((text, ""));
    if header.trim_end() != HEADER {
        return Err(Error::VersionMismatch {
            expected: HEADER.to_string(),
            found: header.chars().take(40).collect(),
        });
    }
    let file: ModelFile = serde_json::from_str(body).map_err(|e| Error::Truncated(e.to_string()))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_FORMAT_VERSION.to_string(),
            found: file.format_version.to_string(),
        });
    }
    let dims = &file.layer_dims;
    if dims.len() < 2 || dims[0] != dims[dims.len() - 1] {
        return Err(Error::Inconsistent(format!(
            "layer_dims {dims:?} must start and end with the state dimension"
        )));
    }
    if let Ok(sys) = SystemSpec::builtin(&file.system) {
        if dims[0] != sys.dim {
            return Err(Error::Inconsistent(format!(
                "layer_dims {dims:?} do not match dimension {} of system '{}'",
                sys.dim, sys.name
            )));
        }
    }
    if file.weights.len() != dims.len() - 1 || file.biases.len() != dims.len() - 1 {
        return Err(Error::Inconsistent("layer count does not match layer_dims".into()));
    }
    let mut weights = Vec::with_capacity(file.weights.len());
    for (l, rows) in file.weights.into_iter().enumerate() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        if rows.len() != fan_in || rows.iter().any(|r| r.len() != fan_out) {
            return Err(Error::Inconsistent(format!(
                "weight {l} is not {fan_in}x{fan_out}"
            )));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        weights.push(Array2::from_shape_vec((fan_in, fan_out), flat).expect("checked shape"));
    }
    let biases = file.biases.into_iter().map(Array1::from_vec).collect();
    let mut model = FlowMapModel::from_params(&file.system, file.dt, file.layer_dims, Params { weights, biases })?;
    model.train_config_digest = file.train_config_digest;
    Ok(model)
}

pub fn save_model(m: &FlowMapModel, path: &Path) -> Result<()> {
    fs::write(path, to_text(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<FlowMapModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
