//! Persisted runs under `runs/<config-hash>/<stage>/`.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{AttackKind, ExperimentConfig};
use super::pipeline::{self, DataStage};
use crate::dataset::write_corpus;
use crate::error::{Error, Result};
use crate::evaluation::{snapshot_ablation, subset_label, write_reports_csv, write_reports_text, EvalReport, Threshold};
use crate::incorporation::{build_vector_bank, read_bank_csv, write_bank_csv};
use crate::inversion::{FrozenFeatures, Generator};
use crate::membership::{MiAttacker, MiDataset};
use crate::target_models::{load_snapshot_set, save_snapshot_set, SnapshotSet, METADATA_FILE};

pub const REPORTS_FILE: &str = "reports.csv";

/// One experiment's artifact directory.
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

impl Run {
    /// Creates `<runs_root>/<hash>/` and writes the config there.
    pub fn open(config: ExperimentConfig, runs_root: &Path) -> Result<Self> {
        config.validate()?;
        let hash = config.hash()?;
        let dir = runs_root.join(&hash);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        Ok(Self { config, hash, dir })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.dir.join(stage)
    }

    /// Data stage; writes the split listing and, with `export_images`, the
    /// corpus as PNG files plus a manifest.
    pub fn data(&self, export_images: bool) -> Result<DataStage> {
        staged("dataset", (|| {
            let data = pipeline::prepare_data(&self.config)?;
            let dir = self.stage_dir("dataset");
            fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join("split.csv"))?;
            w.write_record(["sample_id", "class_label", "role"])?;
            let roles = [
                (&data.split.target_train, "target_train"),
                (&data.attack_train, "attack_train"),
                (&data.attack_eval, "attack_eval"),
            ];
            for (samples, role) in roles {
                for s in samples.iter() {
                    w.write_record([s.sample_id.as_str(), &s.class_label.to_string(), role])?;
                }
            }
            w.flush()?;
            if export_images {
                write_corpus(&data.corpus.samples, &dir.join("images"))?;
            }
            Ok(data)
        })())
    }

    /// Target snapshots, loaded from the run directory when present unless
    /// `retrain` is set.
    pub fn targets(&self, data: &DataStage, retrain: bool) -> Result<SnapshotSet> {
        staged("target", (|| {
            let dir = self.stage_dir("target");
            if !retrain && dir.join(METADATA_FILE).exists() {
                return load_snapshot_set(&dir);
            }
            let set = pipeline::train_targets(&self.config, data)?;
            save_snapshot_set(&set, &dir)?;
            Ok(set)
        })())
    }

    pub fn existing_targets(&self) -> Result<SnapshotSet> {
        let dir = self.stage_dir("target");
        if !dir.join(METADATA_FILE).exists() {
            return Err(Error::Stage {
                stage: "target".into(),
                source: Box::new(Error::Precondition(format!(
                    "no snapshots in {}; run train-target first",
                    dir.display()
                ))),
            });
        }
        staged("target", load_snapshot_set(&dir))
    }

    pub fn perceptual(&self, data: &DataStage) -> Result<Option<FrozenFeatures>> {
        if self.config.attack.kind != AttackKind::Inversion {
            return Ok(None);
        }
        staged("perceptual", pipeline::train_perceptual(&self.config, data))
    }

    pub fn threshold(&self, data: &DataStage, set: &SnapshotSet) -> Result<Option<Threshold>> {
        staged("calibration", (|| {
            let t = pipeline::calibrate_threshold(&self.config, data, set)?;
            if let Some(t) = &t {
                let dir = self.stage_dir("evaluation");
                fs::create_dir_all(&dir)?;
                let text = toml::to_string(t).map_err(|e| Error::Config(e.to_string()))?;
                fs::write(dir.join("threshold.toml"), text)?;
            }
            Ok(t)
        })())
    }

    /// Trains the configured attack on `subset`, persists its artifacts
    /// under `attack_dir`, and returns its reports.
    pub fn attack(
        &self,
        data: &DataStage,
        set: &SnapshotSet,
        subset: Option<&[usize]>,
        feature_net: Option<&FrozenFeatures>,
        threshold: Option<&Threshold>,
        attack_dir: &Path,
    ) -> Result<Vec<EvalReport>> {
        let config = &self.config;
        match config.attack.kind {
            AttackKind::Inversion => {
                let (train_bank, eval_bank) = staged("bank", (|| {
                    let banks = pipeline::banks(data, set, subset)?;
                    let dir = attack_dir.join("bank");
                    write_bank_csv(&banks.0, None, &dir.join("attack_train.csv"))?;
                    write_bank_csv(&banks.1, None, &dir.join("attack_eval.csv"))?;
                    Ok(banks)
                })())?;
                let inverter = staged("attack", (|| {
                    let inverter = pipeline::inversion_attack(config, data, &train_bank, feature_net)?;
                    inverter.save(attack_dir)?;
                    Ok(inverter)
                })())?;
                staged(
                    "evaluation",
                    pipeline::evaluate_inversion(
                        config,
                        &self.hash,
                        set,
                        &inverter.generator,
                        inverter.alpha,
                        &eval_bank,
                        threshold,
                    ),
                )
            }
            AttackKind::Membership => {
                let outcome = staged("attack", (|| {
                    let outcome = pipeline::membership_attack(config, data, set, subset)?;
                    fs::create_dir_all(attack_dir)?;
                    outcome.train_data.write_csv(&attack_dir.join("mi_train.csv"))?;
                    outcome.eval_data.write_csv(&attack_dir.join("mi_eval.csv"))?;
                    outcome.trained.attacker.save(attack_dir)?;
                    Ok(outcome)
                })())?;
                staged(
                    "evaluation",
                    pipeline::evaluate_membership(
                        config,
                        &self.hash,
                        &outcome.trained.attacker,
                        outcome.train_data.alpha(),
                        &outcome.eval_data,
                    ),
                )
            }
        }
    }

    /// Re-evaluates the attack persisted in `attack/` without retraining.
    pub fn evaluate_saved(&self, data: &DataStage, set: &SnapshotSet, threshold: Option<&Threshold>) -> Result<Vec<EvalReport>> {
        let config = &self.config;
        let dir = self.stage_dir("attack");
        let alpha = config.attack_alpha();
        staged("evaluation", (|| match config.attack.kind {
            AttackKind::Inversion => {
                let generator = Generator::load(&dir)?;
                let eval_bank = build_vector_bank(set, &data.attack_eval)?;
                pipeline::evaluate_inversion(config, &self.hash, set, &generator, alpha, &eval_bank, threshold)
            }
            AttackKind::Membership => {
                let attacker = MiAttacker::load(&dir)?;
                let (bank, members) = read_bank_csv(&dir.join("mi_eval.csv"))?;
                let members = members.ok_or_else(|| Error::Precondition("mi_eval.csv lacks a member column".into()))?;
                let eval = MiDataset::from_tuples(bank, members, config.attack.mode);
                pipeline::evaluate_membership(config, &self.hash, &attacker, alpha, &eval)
            }
        })())
    }

    pub fn write_reports(&self, dir: &Path, reports: &[EvalReport]) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(REPORTS_FILE);
        write_reports_csv(reports, &path)?;
        let mut text = Vec::new();
        write_reports_text(reports, &mut text)?;
        fs::write(dir.join("reports.txt"), text)?;
        Ok(path)
    }
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub reports: Vec<EvalReport>,
    pub reports_csv: PathBuf,
}

/// Runs every stage of `config` and persists each under
/// `<runs_root>/<hash>/`.
pub fn run_experiment(config: &ExperimentConfig, runs_root: &Path) -> Result<RunOutcome> {
    let run = Run::open(config.clone(), runs_root)?;
    let data = run.data(false)?;
    let set = run.targets(&data, false)?;
    let feature_net = run.perceptual(&data)?;
    let threshold = run.threshold(&data, &set)?;
    let subset = config.attack.snapshot_subset.as_deref();
    let reports = run.attack(
        &data,
        &set,
        subset,
        feature_net.as_ref(),
        threshold.as_ref(),
        &run.stage_dir("attack"),
    )?;
    let reports_csv = run.write_reports(&run.stage_dir("evaluation"), &reports)?;
    Ok(RunOutcome {
        dir: run.dir,
        reports,
        reports_csv,
    })
}

/// Repeats the attack for every configured snapshot subset.
pub fn run_ablation(config: &ExperimentConfig, runs_root: &Path) -> Result<RunOutcome> {
    let run = Run::open(config.clone(), runs_root)?;
    let data = run.data(false)?;
    let set = run.targets(&data, false)?;
    let feature_net = run.perceptual(&data)?;
    let threshold = run.threshold(&data, &set)?;
    let reports = snapshot_ablation(&set, &config.evaluation.ablation_subsets, |subset| {
        let dir = run.stage_dir("ablation").join(subset_label(subset));
        run.attack(&data, &set, Some(subset), feature_net.as_ref(), threshold.as_ref(), &dir)
    })?;
    let reports_csv = run.write_reports(&run.stage_dir("ablation"), &reports)?;
    Ok(RunOutcome {
        dir: run.dir,
        reports,
        reports_csv,
    })
}
