//! Checkpoint directories: `manifest.json` plus one OPLM file per tensor.

use std::fs;
use std::path::Path;

use opl_core::autodiff::Activation;
use opl_core::model::{
    DenseStage, FrozenNetwork, NetworkSpec, ProjectionKind, ProjectionLayerState, Stage,
};
use opl_core::train::{Checkpoint, EpochRecord, TrainConfig};
use opl_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, Result};
use crate::format::{self, load_matrix};
use crate::hash::content_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageEntry {
    Dense {
        activation: Activation,
        weights: String,
        bias: String,
        shape: (usize, usize),
    },
    Projection {
        kind: ProjectionKind,
        q: String,
        shape: (usize, usize),
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub seed: u64,
    pub input_dim: usize,
    pub placement: String,
    pub stages: Vec<StageEntry>,
    pub scorer: String,
    pub scorer_bias: String,
    pub curve: Vec<EpochRecord>,
    pub initial_orth_defect: f64,
    /// Hash of the training data, if known.
    pub data_hash: Option<String>,
    /// Hash of every tensor file, in manifest order.
    pub tensor_hash: String,
}

/// Tensor files of a checkpoint, in manifest order.
fn tensors(net: &NetworkSpec) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    for (i, s) in net.stages().iter().enumerate() {
        match s {
            Stage::Dense(d) => {
                out.push((format!("stage{}_weights.oplm", i), d.weights.clone()));
                out.push((format!("stage{}_bias.oplm", i), d.bias.clone()));
            }
            Stage::Projection(p) => out.push((format!("stage{}_q.oplm", i), p.q().clone())),
        }
    }
    out.push(("scorer.oplm".into(), net.scorer().clone()));
    out.push(("scorer_bias.oplm".into(), Matrix::scalar(net.scorer_bias())));
    out
}

pub fn manifest_for(ckpt: &Checkpoint, data_hash: Option<String>) -> CheckpointManifest {
    let net = ckpt.network.spec();
    let files = tensors(net);
    let stages = net
        .stages()
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            Stage::Dense(d) => StageEntry::Dense {
                activation: d.activation,
                weights: format!("stage{}_weights.oplm", i),
                bias: format!("stage{}_bias.oplm", i),
                shape: d.weights.shape(),
            },
            Stage::Projection(p) => StageEntry::Projection {
                kind: p.kind,
                q: format!("stage{}_q.oplm", i),
                shape: p.q().shape(),
            },
        })
        .collect();
    let encoded: Vec<Vec<u8>> = files.iter().map(|(_, m)| format::encode(m)).collect();
    CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        input_dim: net.input_dim(),
        placement: net.placement().to_string(),
        stages,
        scorer: "scorer.oplm".into(),
        scorer_bias: "scorer_bias.oplm".into(),
        curve: ckpt.curve.clone(),
        initial_orth_defect: ckpt.initial_orth_defect,
        data_hash,
        tensor_hash: content_hash(encoded.iter().map(|v| v.as_slice())),
    }
}

pub fn save_checkpoint(
    dir: &Path,
    ckpt: &Checkpoint,
    data_hash: Option<String>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (name, m) in tensors(ckpt.network.spec()) {
        format::save_matrix(&dir.join(name), &m)?;
    }
    let manifest = manifest_for(ckpt, data_hash);
    let p = dir.join("manifest.json");
    fs::write(
        &p,
        serde_json::to_string_pretty(&manifest).expect("serializes"),
    )
    .map_err(|e| CliError::io(&p, e))?;
    Ok(manifest)
}

pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub manifest: CheckpointManifest,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    let bad = |reason: String| CliError::Format {
        path: p.clone(),
        reason,
    };
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(bad(format!(
            "unsupported schema_version {}",
            manifest.schema_version
        )));
    }
    let mut stages = Vec::with_capacity(manifest.stages.len());
    for entry in &manifest.stages {
        stages.push(match entry {
            StageEntry::Dense {
                activation,
                weights,
                bias,
                ..
            } => Stage::Dense(DenseStage {
                weights: load_matrix(&dir.join(weights))?,
                bias: load_matrix(&dir.join(bias))?,
                activation: *activation,
            }),
            StageEntry::Projection { kind, q, .. } => Stage::Projection(
                ProjectionLayerState::from_basis(*kind, load_matrix(&dir.join(q))?),
            ),
        });
    }
    let scorer = load_matrix(&dir.join(&manifest.scorer))?;
    let bias = load_matrix(&dir.join(&manifest.scorer_bias))?
        .as_scalar()
        .ok_or_else(|| bad("scorer bias must be 1x1".into()))?;
    let placement = manifest
        .placement
        .parse()
        .map_err(|e: opl_core::Error| bad(e.to_string()))?;
    let spec = NetworkSpec::from_parts(manifest.input_dim, stages, scorer, bias, placement)?;
    let checkpoint = Checkpoint {
        network: FrozenNetwork::new(spec)?,
        config: manifest.config.clone(),
        curve: manifest.curve.clone(),
        initial_orth_defect: manifest.initial_orth_defect,
        seed: manifest.seed,
    };
    let expected = manifest_for(&checkpoint, manifest.data_hash.clone()).tensor_hash;
    if expected != manifest.tensor_hash {
        return Err(bad("tensor files do not match the manifest hash".into()));
    }
    Ok(LoadedCheckpoint {
        checkpoint,
        manifest,
    })
}
