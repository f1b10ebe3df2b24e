//! Checkpoint directories: `params.bin` and `optim.bin` archives plus a
//! JSON manifest describing the architecture, step and config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xmodseg_core::codec;
use xmodseg_core::networks::{ArchitectureAudit, ArchitectureConfig, ModelBundle};
use xmodseg_core::optim::AdamState;
use xmodseg_core::train::{OptimizerState, TrainConfig};
use xmodseg_core::Tensor;

use crate::config;
use crate::error::{Error, IoContext, Result};
use crate::fsio::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const OPTIM: &str = "optim.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Completed optimization steps.
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub architecture: ArchitectureConfig,
    pub audit: ArchitectureAudit,
    /// Adam update counts per group, in store order.
    pub adam_steps: Vec<(String, Vec<u64>)>,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub bundle: ModelBundle<f32>,
    pub optim: Option<OptimizerState<f32>>,
}

fn archive_of<'a>(bundle: &'a ModelBundle<f32>) -> Vec<(&'static str, Vec<(&'a str, &'a Tensor<f32>)>)> {
    bundle
        .stores()
        .into_iter()
        .map(|(g, s)| (g, s.iter().collect()))
        .collect()
}

/// Writes a checkpoint directory, replacing the files of an existing one.
pub fn save(
    dir: &Path,
    bundle: &ModelBundle<f32>,
    optim: &OptimizerState<f32>,
    config: &TrainConfig,
    step: u64,
) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    write_atomic(&dir.join(PARAMS), &codec::encode_archive(&archive_of(bundle)))?;

    let names: Vec<Vec<String>> = bundle
        .stores()
        .iter()
        .map(|(_, s)| (0..s.len()).map(|i| s.name(i).to_string()).collect())
        .collect();
    let mut moments: Vec<(String, Vec<(String, &Tensor<f32>)>)> = Vec::new();
    for ((group, state), names) in optim.groups().into_iter().zip(&names) {
        for (suffix, tensors) in [("m", &state.m), ("v", &state.v)] {
            let entries = names.iter().cloned().zip(tensors.iter()).collect();
            moments.push((format!("{group}.{suffix}"), entries));
        }
    }
    let borrowed: Vec<(&str, Vec<(&str, &Tensor<f32>)>)> = moments
        .iter()
        .map(|(g, e)| (g.as_str(), e.iter().map(|(n, t)| (n.as_str(), *t)).collect()))
        .collect();
    write_atomic(&dir.join(OPTIM), &codec::encode_archive(&borrowed))?;

    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step,
        seed: config.seed,
        config_hash: config::config_hash(config),
        config: config.clone(),
        architecture: bundle.config.clone(),
        audit: bundle.audit(config.image_size)?,
        adam_steps: optim
            .groups()
            .iter()
            .map(|(g, s)| (g.to_string(), s.steps.clone()))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), (json + "\n").as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path,
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

fn read_archive(path: &Path) -> Result<codec::Archive> {
    let bytes = fs::read(path).at(path)?;
    codec::decode_archive(&bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn checkpoint_error(dir: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint {
        path: dir.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads the networks, and the optimizer state when `with_optim` is set.
/// The bundle is rebuilt from the manifest's architecture, so a parameter
/// file of a different shape is reported as a mismatch.
pub fn load(dir: &Path, with_optim: bool) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut bundle = ModelBundle::<f32>::init(&manifest.architecture, manifest.seed).map_err(|e| checkpoint_error(dir, e))?;
    let params = read_archive(&dir.join(PARAMS))?;
    bundle.load_params(&params).map_err(|e| checkpoint_error(dir, e))?;

    let optim = if with_optim {
        let mut state = OptimizerState::new(&bundle);
        let archive = read_archive(&dir.join(OPTIM))?;
        let stores = bundle.stores();
        for (k, ((group, adam), (_, store))) in state.groups_mut().into_iter().zip(stores).enumerate() {
            let take = |suffix: &str| -> Result<Vec<Tensor<f32>>> {
                let key = format!("{group}.{suffix}");
                let (_, tensors) = archive
                    .iter()
                    .find(|(g, _)| *g == key)
                    .ok_or_else(|| checkpoint_error(dir, format!("optimizer state lacks `{key}`")))?;
                if tensors.len() != store.len()
                    || tensors.iter().enumerate().any(|(i, (_, t))| t.shape() != store.tensor(i).shape())
                {
                    return Err(checkpoint_error(dir, format!("optimizer state `{key}` does not match the networks")));
                }
                Ok(tensors.iter().map(|(_, t)| t.clone()).collect())
            };
            let steps = manifest
                .adam_steps
                .get(k)
                .filter(|(g, s)| g == group && s.len() == store.len())
                .map(|(_, s)| s.clone())
                .ok_or_else(|| checkpoint_error(dir, format!("manifest lacks Adam step counts for `{group}`")))?;
            *adam = AdamState {
                m: take("m")?,
                v: take("v")?,
                steps,
            };
        }
        Some(state)
    } else {
        None
    };
    Ok(Checkpoint { manifest, bundle, optim })
}
