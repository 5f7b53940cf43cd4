//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train/{features,labels,presence,attributes}.oplm
//! <dir>/test/{features,labels,presence,attributes}.oplm
//! <dir>/sidecar/{task_basis,sensitive_basis}.oplm, truth.json
//! <dir>/{train,test}.csv                       (optional)
//! ```
//!
//! Training reads only the split directories. The planted ground truth
//! sits in `sidecar/` and is read only by evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use opl_core::synth::{
    LabeledDataset, PlantedTruth, PlantingDiagnostics, SynthSpec, SyntheticData,
};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, Result};
use crate::format::{self, flags_to_matrix, load_matrix, matrix_to_flags, save_matrix};
use crate::hash::content_hash;

const SPLIT_FILES: [&str; 4] = ["features", "labels", "presence", "attributes"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub spec: SynthSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub diagnostics: Option<PlantingDiagnostics>,
    /// Hash of the train and test split files.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthDoc {
    functional: Vec<f64>,
    leak_functional: Vec<f64>,
    threshold: f64,
    task_basis: String,
    sensitive_basis: String,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| CliError::io(p, e))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| CliError::io(p, e))
}

fn split_bytes(ds: &LabeledDataset) -> [Vec<u8>; 4] {
    [
        format::encode(&ds.features),
        format::encode(&flags_to_matrix(&ds.labels)),
        format::encode(&flags_to_matrix(&ds.presence)),
        format::encode(&ds.attributes),
    ]
}

fn write_split(dir: &Path, ds: &LabeledDataset) -> Result<[Vec<u8>; 4]> {
    create_dir(dir)?;
    let bytes = split_bytes(ds);
    for (name, b) in SPLIT_FILES.iter().zip(&bytes) {
        let p = dir.join(format!("{}.oplm", name));
        fs::write(&p, b).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(bytes)
}

/// Reads one split directory (`train/` or `test/`).
pub fn read_split(dir: &Path) -> Result<LabeledDataset> {
    let path = |n: &str| dir.join(format!("{}.oplm", n));
    let features = load_matrix(&path("features"))?;
    let labels = matrix_to_flags(&load_matrix(&path("labels"))?, &path("labels"))?;
    let presence = matrix_to_flags(&load_matrix(&path("presence"))?, &path("presence"))?;
    let attributes = load_matrix(&path("attributes"))?;
    let ds = LabeledDataset {
        features,
        labels,
        presence,
        attributes,
    };
    ds.validate().map_err(|e| CliError::Format {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(ds)
}

/// Hash of the split files of a dataset directory, as stored in its manifest.
pub fn hash_dataset_dir(dir: &Path) -> Result<String> {
    let mut parts = Vec::new();
    for split in ["train", "test"] {
        for name in SPLIT_FILES {
            let p = dir.join(split).join(format!("{}.oplm", name));
            parts.push(fs::read(&p).map_err(|e| CliError::io(&p, e))?);
        }
    }
    Ok(content_hash(parts.iter().map(|v| v.as_slice())))
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub root: PathBuf,
}

impl Dataset {
    /// Loads both splits, never the sidecar.
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: DatasetManifest =
            serde_json::from_str(&read_text(&mpath)?).map_err(|e| CliError::Format {
                path: mpath.clone(),
                reason: e.to_string(),
            })?;
        let train = read_split(&dir.join("train"))?;
        let test = read_split(&dir.join("test"))?;
        if train.dim() != test.dim() {
            return Err(CliError::Format {
                path: dir.to_path_buf(),
                reason: format!("train has {} columns, test {}", train.dim(), test.dim()),
            });
        }
        Ok(Dataset {
            manifest,
            train,
            test,
            root: dir.to_path_buf(),
        })
    }

    /// Planted ground truth, when the sidecar exists.
    pub fn truth(&self) -> Result<Option<PlantedTruth>> {
        read_truth(&self.root)
    }
}

pub fn read_truth(dir: &Path) -> Result<Option<PlantedTruth>> {
    let side = dir.join("sidecar");
    let tpath = side.join("truth.json");
    if !tpath.exists() {
        return Ok(None);
    }
    let doc: TruthDoc =
        serde_json::from_str(&read_text(&tpath)?).map_err(|e| CliError::Format {
            path: tpath.clone(),
            reason: e.to_string(),
        })?;
    Ok(Some(PlantedTruth {
        task_basis: load_matrix(&side.join(&doc.task_basis))?,
        sensitive_basis: load_matrix(&side.join(&doc.sensitive_basis))?,
        functional: doc.functional,
        leak_functional: doc.leak_functional,
        threshold: doc.threshold,
    }))
}

/// Writes a generated dataset; returns its manifest.
pub fn write_dataset(
    dir: &Path,
    spec: &SynthSpec,
    data: &SyntheticData,
    diagnostics: Option<PlantingDiagnostics>,
    csv: bool,
) -> Result<DatasetManifest> {
    create_dir(dir)?;
    let train = write_split(&dir.join("train"), &data.train)?;
    let test = write_split(&dir.join("test"), &data.test)?;
    let side = dir.join("sidecar");
    create_dir(&side)?;
    save_matrix(&side.join("task_basis.oplm"), &data.truth.task_basis)?;
    save_matrix(
        &side.join("sensitive_basis.oplm"),
        &data.truth.sensitive_basis,
    )?;
    let doc = TruthDoc {
        functional: data.truth.functional.clone(),
        leak_functional: data.truth.leak_functional.clone(),
        threshold: data.truth.threshold,
        task_basis: "task_basis.oplm".into(),
        sensitive_basis: "sensitive_basis.oplm".into(),
    };
    write_text(
        &side.join("truth.json"),
        &serde_json::to_string_pretty(&doc).expect("serializes"),
    )?;
    if csv {
        write_csv(&dir.join("train.csv"), &data.train)?;
        write_csv(&dir.join("test.csv"), &data.test)?;
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        n_train: data.train.len(),
        n_test: data.test.len(),
        dim: data.train.dim(),
        diagnostics,
        content_hash: content_hash(train.iter().chain(&test).map(|v| v.as_slice())),
    };
    write_text(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("serializes"),
    )?;
    Ok(manifest)
}

/// One row per sample: `label, presence, f0.., a0..`.
pub fn write_csv(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let map = |e: csv::Error| CliError::Runtime(format!("{}: {}", path.display(), e));
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    let d = ds.dim();
    let mut header = vec!["label".to_string(), "presence".to_string()];
    header.extend((0..d).map(|j| format!("f{}", j)));
    header.extend((0..d).map(|j| format!("a{}", j)));
    w.write_record(&header).map_err(map)?;
    for i in 0..ds.len() {
        let mut rec = vec![
            (ds.labels[i] as u8).to_string(),
            (ds.presence[i] as u8).to_string(),
        ];
        rec.extend(ds.features.row(i).iter().map(|v| v.to_string()));
        rec.extend(ds.attributes.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(map)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
