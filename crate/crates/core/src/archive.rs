//! Named-tensor weight archive.
//!
//! On disk this is a safetensors file: an 8-byte little-endian header length,
//! a JSON manifest mapping each tensor name to its dtype, shape and byte
//! range, then the raw little-endian buffers. Entries are ordered by dtype
//! then name, so equal contents give byte-equal files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let map: HashMap<&str, Tensor> = entries
        .iter()
        .map(|(n, t)| t.contiguous().map(|t| (n.as_str(), t)))
        .collect::<candle_core::Result<_>>()?;
    if map.len() != entries.len() {
        return Err(Error::Archive("duplicate tensor names".into()));
    }
    candle_core::safetensors::save(&map, path)
        .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))
}

/// Every entry of an archive, sorted by name.
pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let map = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?;
    let mut entries: Vec<_> = map.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(entries)
}

pub fn write_vars(path: &Path, vars: &[(String, Var)]) -> Result<()> {
    let entries: Vec<(String, Tensor)> = vars
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    write(path, &entries)
}

/// Outcome of loading an archive into a set of named variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// Targets absent from the archive; they keep their current values.
    pub missing: Vec<String>,
    /// Archive entries no target asked for.
    pub unexpected: Vec<String>,
}

impl LoadReport {
    pub fn matched_fraction(&self) -> f64 {
        let total = self.matched.len() + self.missing.len();
        if total == 0 {
            1.0
        } else {
            self.matched.len() as f64 / total as f64
        }
    }
}

/// Copy archive tensors into same-named targets, converting dtype as needed.
///
/// A name present on both sides with different shapes is a hard error and
/// nothing is modified.
pub fn assign(targets: &[(String, Var)], tensors: Vec<(String, Tensor)>) -> Result<LoadReport> {
    let mut source: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut report = LoadReport::default();
    let mut updates = Vec::new();
    for (name, var) in targets {
        match source.remove(name) {
            Some(t) => {
                if t.dims() != var.dims() {
                    return Err(Error::Archive(format!(
                        "tensor `{name}` has shape {:?} in the archive but the model expects {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                updates.push((var, t));
                report.matched.push(name.clone());
            }
            None => {
                log::warn!("archive has no tensor `{name}`; keeping initial values");
                report.missing.push(name.clone());
            }
        }
    }
    for (var, t) in updates {
        var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
    }
    report.unexpected = source.into_keys().collect();
    Ok(report)
}

/// Load an archive into the named variables.
pub fn load_into(path: &Path, targets: &[(String, Var)]) -> Result<LoadReport> {
    assign(targets, read(path)?)
}
