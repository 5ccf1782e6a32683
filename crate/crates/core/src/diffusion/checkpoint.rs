//! Single-file weight archives: safetensors payload plus string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::Tensor;
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::tensor;

pub fn write_archive(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.contiguous()?)))
        .collect::<Result<_>>()?;
    safetensors::serialize_to_file(contiguous, Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn read_archive(path: &Path) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    let err = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(err)?;
    let metadata = header.metadata().clone().unwrap_or_default();
    let archive = SafeTensors::deserialize(&bytes).map_err(err)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in archive.tensors() {
        tensors.insert(name, view.load(&tensor::device())?);
    }
    Ok((tensors, metadata))
}
