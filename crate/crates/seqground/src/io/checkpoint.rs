//! Checkpoint directories: a JSON header plus one array file per parameter.
//!
//! ```text
//! <dir>/checkpoint.json      header: version, dtype, parameter dims, metadata
//! <dir>/params/<name>.sqga   one file per named parameter
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::array_file::{read_array_file, write_array_file};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: u8,
    params: Vec<ParamInfo>,
    metadata: serde_json::Value,
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "parameter name {name:?} is not file-safe"
        )))
    }
}

/// Write all `params` (in the given order) plus `metadata` under `dir`.
pub fn save_params<S: Scalar>(
    dir: &Path,
    params: &[(String, Array2<S>)],
    metadata: &serde_json::Value,
) -> Result<()> {
    let param_dir = dir.join("params");
    fs::create_dir_all(&param_dir).map_err(|e| Error::io(&param_dir, e))?;
    let mut infos = Vec::with_capacity(params.len());
    for (name, array) in params {
        check_name(name)?;
        write_array_file(&param_dir.join(format!("{name}.sqga")), array)?;
        infos.push(ParamInfo {
            name: name.clone(),
            rows: array.nrows(),
            cols: array.ncols(),
        });
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: S::DTYPE,
        params: infos,
        metadata: metadata.clone(),
    };
    let path = dir.join("checkpoint.json");
    let mut text =
        serde_json::to_string_pretty(&header).map_err(|e| Error::format(&path, e.to_string()))?;
    text.push('\n');
    super::write_atomic(&path, text.as_bytes())
}

/// Load all parameters and the metadata blob from a checkpoint directory.
///
/// Parameters come back in header order; dims are validated against the header.
pub fn load_params<S: Scalar>(
    dir: &Path,
) -> Result<(Vec<(String, Array2<S>)>, serde_json::Value)> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for info in &header.params {
        check_name(&info.name)?;
        let file = dir.join("params").join(format!("{}.sqga", info.name));
        let array = read_array_file::<S>(&file)?;
        if array.nrows() != info.rows || array.ncols() != info.cols {
            return Err(Error::format(
                &file,
                format!(
                    "parameter {} has shape {}x{}, header says {}x{}",
                    info.name,
                    array.nrows(),
                    array.ncols(),
                    info.rows,
                    info.cols
                ),
            ));
        }
        params.push((info.name.clone(), array));
    }
    Ok((params, header.metadata))
}
