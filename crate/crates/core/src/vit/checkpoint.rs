//! JSON checkpoint container: format tag, version, config and named tensors.
//!
//! Values are stored as `f64`, which round-trips both supported scalar
//! types exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{VitConfig, VitModel};

pub const CHECKPOINT_FORMAT: &str = "manifold-kd/vit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format: String,
    version: u32,
    scalar: String,
    checksum: String,
    config: VitConfig,
    params: Vec<StoredTensor>,
}

pub fn save_checkpoint<T: Scalar>(model: &VitModel<T>, path: &Path) -> Result<()> {
    let doc = Stored {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        scalar: T::NAME.to_string(),
        checksum: model.checksum(),
        config: model.config().clone(),
        params: model
            .named_params()
            .map(|(name, t)| StoredTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec(&doc)?)?;
    Ok(())
}

/// Loads a checkpoint; with `expected`, any config difference is an error.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&VitConfig>) -> Result<VitModel<T>> {
    let bytes = fs::read(path)?;
    let doc: Stored = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag {:?}", doc.format)));
    }
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            doc.version
        )));
    }
    if let Some(want) = expected {
        if *want != doc.config {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint has {:?}, expected {:?}",
                doc.config, want
            )));
        }
    }
    let named = doc
        .params
        .into_iter()
        .map(|p| {
            let data = p.data.into_iter().map(T::of).collect();
            Tensor::new(p.shape, data).map(|t| (p.name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = VitModel::from_params(&doc.config, named)?;
    if T::NAME == doc.scalar && model.checksum() != doc.checksum {
        return Err(Error::Checkpoint("parameter checksum mismatch".into()));
    }
    Ok(model)
}
