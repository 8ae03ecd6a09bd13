//! Serialization: binary array files, dataset manifests, model checkpoints.

pub mod array_file;
pub mod checkpoint;
pub mod manifest;

pub use array_file::{read_array_file, write_array_file};
pub use checkpoint::{load_params, save_params};
pub use manifest::{
    load_manifest, load_samples, save_dataset, write_manifest, Manifest, ManifestEntry,
};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `bytes` to `path` atomically (temp file + rename) creating parent dirs.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
