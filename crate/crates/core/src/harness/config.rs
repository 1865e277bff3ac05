//! Experiment configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::synthetic::SyntheticSpec;
use crate::dataset::{DatasetDescriptor, Regime};
use crate::error::{Error, Result};
use crate::incorporation::{Mode, ModelsForTest};
use crate::inversion::InversionConfig;
use crate::membership::MiConfig;
use crate::target_models::{ModelKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Manifest {
        path: PathBuf,
        descriptor: DatasetDescriptor,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub regime: Regime,
    /// Classes reserved for the probe set (feature extraction).
    pub probe_class_count: usize,
    /// Probe set size, the attacker's training set size (feature extraction).
    pub probe_size: usize,
    /// Per-class probe share (classification).
    pub holdout_fraction: f64,
    /// Per-class share of the probe set kept for attack evaluation.
    pub attack_eval_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioChoice {
    /// One fully trained model.
    Single,
    Upslope,
    Update,
    Downslope,
}

impl ScenarioChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioChoice::Single => "single",
            ScenarioChoice::Upslope => "upslope",
            ScenarioChoice::Update => "update",
            ScenarioChoice::Downslope => "downslope",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub scenario: ScenarioChoice,
    /// Training fractions at which upslope and downslope snapshots are taken.
    pub schedule: Vec<f64>,
    pub train: TrainConfig,
    pub removed_class_count: usize,
    /// Crafted images of the identity inserted in the update scenario.
    pub update_image_count: usize,
    /// Recipe of the frozen perceptual feature network.
    pub perceptual_net: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Inversion,
    Membership,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub mode: Mode,
    pub models_for_test: ModelsForTest,
    /// Snapshot indices (0-based) the attacker sees; all when absent.
    pub snapshot_subset: Option<Vec<usize>>,
    pub inversion: InversionConfig,
    pub membership: MiConfig,
    /// Members and nonmembers drawn for membership inference, each.
    pub mi_samples_per_side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub far_target: f64,
    pub max_impostor_pairs: usize,
    /// Snapshot subsets compared by `ablate`.
    pub ablation_subsets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub target: TargetConfig,
    pub attack: AttackConfig,
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    /// Desk-scale synthetic setup: 24 texture classes of 32x32 grayscale,
    /// attacked by a data-limited adversary (24 attack-train images).
    pub fn toy() -> Self {
        let train = TrainConfig {
            epochs: 40,
            conv_channels: vec![8, 16, 32],
            hidden: 64,
            embedding_dim: 32,
            update_epochs: 6,
            ..TrainConfig::feature_extractor_default()
        };
        Self {
            name: "toy".into(),
            seed: 0,
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic(SyntheticSpec {
                    variation: 0.5,
                    ..SyntheticSpec::default()
                }),
                regime: Regime::FeatureExtraction,
                probe_class_count: 8,
                probe_size: 96,
                holdout_fraction: 0.25,
                attack_eval_fraction: 0.75,
            },
            target: TargetConfig {
                scenario: ScenarioChoice::Upslope,
                schedule: vec![0.25, 0.5, 0.75, 0.875, 1.0],
                perceptual_net: TrainConfig {
                    epochs: 4,
                    dropout_rate: 0.0,
                    conv_channels: vec![8, 16],
                    ..TrainConfig::classifier_default()
                },
                train,
                removed_class_count: 2,
                update_image_count: 16,
            },
            attack: AttackConfig {
                kind: AttackKind::Inversion,
                mode: Mode::Srwal,
                models_for_test: ModelsForTest::Final,
                snapshot_subset: None,
                inversion: InversionConfig {
                    epochs: 240,
                    batch_size: 8,
                    hidden: 128,
                    proj_channels: 32,
                    block_channels: vec![32, 16, 8],
                    ..Default::default()
                },
                membership: MiConfig::default(),
                mi_samples_per_side: 200,
            },
            evaluation: EvaluationConfig {
                far_target: 0.01,
                max_impostor_pairs: 100_000,
                ablation_subsets: vec![vec![0, 1], vec![0, 1, 2, 3, 4]],
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    pub fn model_kind(&self) -> ModelKind {
        match self.dataset.regime {
            Regime::FeatureExtraction => ModelKind::FeatureExtractor,
            Regime::Classification => ModelKind::Classifier,
        }
    }

    /// Snapshot count of the configured scenario.
    pub fn alpha(&self) -> usize {
        match self.target.scenario {
            ScenarioChoice::Single => 1,
            ScenarioChoice::Update => 3,
            ScenarioChoice::Upslope | ScenarioChoice::Downslope => self.target.schedule.len(),
        }
    }

    /// Snapshot count the attacker trains on.
    pub fn attack_alpha(&self) -> usize {
        self.attack.snapshot_subset.as_ref().map_or(self.alpha(), |s| s.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.target.train.validate()?;
        self.target.perceptual_net.validate()?;
        let d = &self.dataset;
        if !(d.attack_eval_fraction > 0.0 && d.attack_eval_fraction < 1.0) {
            return bad(format!("attack_eval_fraction {} must lie in (0, 1)", d.attack_eval_fraction));
        }
        if !(self.evaluation.far_target > 0.0 && self.evaluation.far_target < 1.0) {
            return bad(format!("far_target {} must lie in (0, 1)", self.evaluation.far_target));
        }
        let schedule = &self.target.schedule;
        if matches!(self.target.scenario, ScenarioChoice::Upslope | ScenarioChoice::Downslope) {
            crate::target_models::schedule_epochs(schedule, self.target.train.epochs)?;
        }
        let alpha = self.alpha();
        let check_subset = |s: &[usize]| -> Result<()> {
            if s.is_empty() {
                return Err(Error::Config("snapshot subsets must be nonempty".into()));
            }
            if let Some(i) = s.iter().find(|i| **i >= alpha) {
                return Err(Error::Config(format!("snapshot index {i} out of range for alpha {alpha}")));
            }
            Ok(())
        };
        if let Some(s) = &self.attack.snapshot_subset {
            check_subset(s)?;
        }
        for s in &self.evaluation.ablation_subsets {
            check_subset(s)?;
        }
        if self.attack.kind == AttackKind::Membership && self.attack.mi_samples_per_side == 0 {
            return bad("mi_samples_per_side must be >= 1".into());
        }
        Ok(())
    }
}
