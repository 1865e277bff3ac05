//! Snapshot store: one safetensors weight file per stage plus
//! `metadata.toml` describing the set.

use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelKind, Network, Scenario, SnapshotSet, StageInfo, TargetModel};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    #[serde(flatten)]
    info: StageInfo,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    scenario: Scenario,
    alpha: usize,
    output_dim: usize,
    kind: ModelKind,
    backbone_id: String,
    seed: u64,
    removed_classes: Vec<u32>,
    added_classes: Vec<u32>,
    class_labels: Vec<u32>,
    architecture: Architecture,
    stages: Vec<StageRecord>,
}

pub const METADATA_FILE: &str = "metadata.toml";

pub fn save_snapshot_set(set: &SnapshotSet, dir: &Path) -> Result<()> {
    set.validate()?;
    fs::create_dir_all(dir)?;
    let mut stages = Vec::new();
    for (i, (model, info)) in set.snapshots.iter().zip(&set.stages).enumerate() {
        let file = format!("stage{i}_{}.safetensors", info.tag);
        model.network.params.save(&dir.join(&file))?;
        stages.push(StageRecord {
            info: info.clone(),
            file,
        });
    }
    let last = set.final_model();
    let meta = Metadata {
        scenario: set.scenario,
        alpha: set.alpha(),
        output_dim: last.output_dim,
        kind: last.kind,
        backbone_id: last.backbone_id.clone(),
        seed: set.seed,
        removed_classes: set.removed_classes.clone(),
        added_classes: set.added_classes.clone(),
        class_labels: last.class_labels.clone(),
        architecture: last.network.arch.clone(),
        stages,
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(METADATA_FILE), text)?;
    Ok(())
}

pub fn load_model(arch: &Architecture, class_labels: &[u32], tag: &str, weights: &Path) -> Result<TargetModel> {
    let network = Network::build(arch, DType::F32, &mut seeded_rng(0))?;
    network.params.load(weights)?;
    Ok(TargetModel {
        kind: arch.kind,
        output_dim: arch.output_dim,
        backbone_id: arch.backbone_id(),
        stage_tag: tag.to_string(),
        class_labels: class_labels.to_vec(),
        network,
    })
}

pub fn load_snapshot_set(dir: &Path) -> Result<SnapshotSet> {
    let meta_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::Ingest {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let meta: Metadata = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if meta.stages.len() != meta.alpha {
        return Err(Error::Config(format!(
            "{}: alpha {} but {} stages",
            meta_path.display(),
            meta.alpha,
            meta.stages.len()
        )));
    }
    let mut snapshots = Vec::new();
    let mut stages = Vec::new();
    for rec in meta.stages {
        snapshots.push(load_model(&meta.architecture, &meta.class_labels, &rec.info.tag, &dir.join(&rec.file))?);
        stages.push(rec.info);
    }
    let set = SnapshotSet {
        scenario: meta.scenario,
        snapshots,
        stages,
        seed: meta.seed,
        removed_classes: meta.removed_classes,
        added_classes: meta.added_classes,
    };
    set.validate()?;
    Ok(set)
}

/// Writes a single model as a one-stage set.
pub fn save_model(model: &TargetModel, dir: &Path) -> Result<()> {
    let set = SnapshotSet {
        scenario: Scenario::Upslope,
        snapshots: vec![model.clone()],
        stages: vec![StageInfo {
            tag: model.stage_tag.clone(),
            epoch: 0,
            fraction: 1.0,
        }],
        seed: 0,
        removed_classes: Vec::new(),
        added_classes: Vec::new(),
    };
    save_snapshot_set(&set, dir)
}

pub fn load_single_model(dir: &Path) -> Result<TargetModel> {
    let mut set = load_snapshot_set(dir)?;
    Ok(set.snapshots.pop().expect("validated nonempty"))
}
