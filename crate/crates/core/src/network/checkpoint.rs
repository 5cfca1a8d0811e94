//! Checkpoint directories: `manifest.json` plus `params.cmxt` holding every
//! parameter as consecutive `CMXT` records in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cmxt, Parameterized, Rng};

use super::config::NetworkConfig;
use super::model::Network;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.cmxt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: NetworkConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, net: &Network<f32>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = net.params();
    let manifest = Manifest {
        version: 1,
        config: net.config.clone(),
        params: params
            .iter()
            .map(|(n, p)| ParamEntry {
                name: n.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    let values: Vec<_> = params.iter().map(|(_, p)| &p.value).collect();
    cmxt::save_all(dir.join(PARAMS), &values)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Network<f32>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    let tensors = cmxt::load_all(dir.join(PARAMS))?;
    let mut net = Network::new(manifest.config, &mut Rng::new(0))?;
    let mut params = net.params_mut();
    if params.len() != manifest.params.len() || params.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} params, manifest {}, data {}",
            params.len(),
            manifest.params.len(),
            tensors.len()
        )));
    }
    for (((name, p), entry), t) in params.iter_mut().zip(&manifest.params).zip(tensors) {
        if *name != entry.name || p.value.shape() != entry.shape.as_slice() || t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{name} {:?} does not match {} {:?} (data {:?})",
                p.value.shape(),
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        p.value = t;
        p.reset_grad();
    }
    drop(params);
    Ok(net)
}
