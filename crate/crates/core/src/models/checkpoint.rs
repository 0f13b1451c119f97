//! `checkpoint.json` lists groups in order; `checkpoint.bin` holds their
//! values as little-endian `f64`, concatenated in the same order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelKind, ParamGroup, ParamSet};
use crate::numkit::Tensor;
use crate::{Error, Result};

pub const MANIFEST: &str = "checkpoint.json";
pub const BLOB: &str = "checkpoint.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: ModelKind,
    groups: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    lora: bool,
}

pub fn save_checkpoint(params: &ParamSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        kind: params.kind(),
        groups: params
            .groups()
            .iter()
            .map(|g| Entry {
                name: g.name.clone(),
                shape: g.tensor.shape().to_vec(),
                trainable: g.trainable,
                lora: g.lora,
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    let blob: Vec<u8> = params
        .groups()
        .iter()
        .flat_map(|g| g.tensor.data())
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let path = dir.join(BLOB);
    std::fs::write(&path, blob).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamSet> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let path = dir.join(BLOB);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: usize = manifest
        .groups
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes, manifest needs {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")));
    let groups = manifest
        .groups
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let t = Tensor::new(e.shape, values.by_ref().take(n).collect())?;
            Ok(ParamGroup::new(e.name, t, e.trainable, e.lora))
        })
        .collect::<Result<_>>()?;
    ParamSet::new(manifest.kind, groups)
}
