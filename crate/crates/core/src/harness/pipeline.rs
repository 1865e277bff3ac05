//! Stage functions of an experiment: data, target snapshots, perceptual
//! features, calibration, attacks and evaluation. Each is pure given the
//! config; `Run` adds persistence.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::config::{AttackKind, DatasetSource, ExperimentConfig, ScenarioChoice};
use crate::dataset::{
    blur_sample, load_corpus, split_classification, split_feature_extraction, stratified_holdout, synthetic,
    Corpus, DatasetSplit, ImageSample, Pixels, Regime,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    classifier_accuracy_for, compute_far_threshold, impostor_distances, mi_accuracy, rank1_accuracy,
    type1_accuracy, EvalContext, EvalReport, Threshold,
};
use crate::incorporation::{build_vector_bank, TestPlan, VectorTuple};
use crate::inversion::{
    frozen_features_from, train_inversion, FrozenFeatures, Generator, PerceptualSource, TrainedInverter,
};
use crate::membership::{build_mi_dataset, train_mi, MiAttacker, MiDataset, TrainedMi};
use crate::nn::{derive_seed, seeded_rng};
use crate::target_models::{
    run_downslope_scenario, run_update_scenario, train_feature_network, train_with_snapshots, ModelKind,
    SnapshotSet, TrainConfig,
};

/// Everything the data stage produces.
#[derive(Clone, Debug)]
pub struct DataStage {
    pub corpus: Corpus,
    pub split: DatasetSplit,
    /// Probe images the attacker trains on.
    pub attack_train: Vec<ImageSample>,
    /// Probe images held out for attack evaluation.
    pub attack_eval: Vec<ImageSample>,
}

pub fn load_source(config: &ExperimentConfig) -> Result<Corpus> {
    match &config.dataset.source {
        DatasetSource::Synthetic(spec) => synthetic::generate(spec),
        DatasetSource::Manifest { path, descriptor } => load_corpus(path, descriptor),
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<DataStage> {
    let corpus = load_source(config)?;
    let d = &config.dataset;
    let split_seed = derive_seed(config.seed, "split");
    let split = match d.regime {
        Regime::FeatureExtraction => split_feature_extraction(&corpus, d.probe_class_count, d.probe_size, split_seed)?,
        Regime::Classification => split_classification(&corpus, d.holdout_fraction, split_seed)?,
    };
    let (attack_train, attack_eval) =
        stratified_holdout(&split.probe, d.attack_eval_fraction, derive_seed(config.seed, "attack-holdout"));
    if attack_train.is_empty() || attack_eval.is_empty() {
        return Err(Error::Split("probe set too small for an attack train/eval split".into()));
    }
    Ok(DataStage {
        corpus,
        split,
        attack_train,
        attack_eval,
    })
}

/// Blurred copies of the lowest probe class, relabeled as a new identity.
pub fn update_images(config: &ExperimentConfig, data: &DataStage) -> Result<Vec<ImageSample>> {
    let new_label = data.corpus.class_labels().last().copied().unwrap_or(0) + 1;
    let source_class = data
        .split
        .probe
        .iter()
        .map(|s| s.class_label)
        .min()
        .ok_or_else(|| Error::Precondition("empty probe set".into()))?;
    data.split
        .probe
        .iter()
        .filter(|s| s.class_label == source_class)
        .take(config.target.update_image_count.max(1))
        .map(|s| {
            let mut b = blur_sample(s)?;
            b.sample_id = format!("{}_crafted", s.sample_id);
            b.class_label = new_label;
            Ok(b)
        })
        .collect()
}

fn target_train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(config.seed, "target"),
        ..config.target.train.clone()
    }
}

pub fn train_targets(config: &ExperimentConfig, data: &DataStage) -> Result<SnapshotSet> {
    let kind = config.model_kind();
    let train = target_train_config(config);
    let t = &config.target;
    match t.scenario {
        ScenarioChoice::Single => train_with_snapshots(kind, &data.split, &train, &[1.0]),
        ScenarioChoice::Upslope => train_with_snapshots(kind, &data.split, &train, &t.schedule),
        ScenarioChoice::Update => {
            let base = train_with_snapshots(kind, &data.split, &train, &[1.0])?;
            run_update_scenario(&base, &data.split, &update_images(config, data)?, &train)
        }
        ScenarioChoice::Downslope => {
            run_downslope_scenario(kind, &data.split, t.removed_class_count, &train, &t.schedule)
        }
    }
}

/// Frozen perceptual features, when the inversion config asks for a
/// separately trained feature network.
pub fn train_perceptual(config: &ExperimentConfig, data: &DataStage) -> Result<Option<FrozenFeatures>> {
    if config.attack.inversion.perceptual != PerceptualSource::FeatureNet {
        return Ok(None);
    }
    let net_config = TrainConfig {
        seed: derive_seed(config.seed, "perceptual"),
        ..config.target.perceptual_net.clone()
    };
    let net = train_feature_network(&data.split.target_train, &net_config)?;
    Ok(Some(frozen_features_from(&net, config.attack.inversion.perceptual_depth)?))
}

/// FAR threshold from cross-class pairs of the final model's templates on
/// the target model's training set. Classifiers get none.
pub fn calibrate_threshold(config: &ExperimentConfig, data: &DataStage, set: &SnapshotSet) -> Result<Option<Threshold>> {
    if set.final_model().kind != ModelKind::FeatureExtractor {
        return Ok(None);
    }
    let pixels: Vec<&Pixels> = data.split.target_train.iter().map(|s| &s.pixels).collect();
    let templates = set.final_model().query_batch(&pixels)?;
    let labeled: Vec<_> = data
        .split
        .target_train
        .iter()
        .map(|s| s.class_label)
        .zip(templates)
        .collect();
    let distances = impostor_distances(
        &labeled,
        config.evaluation.max_impostor_pairs,
        derive_seed(config.seed, "impostors"),
    )?;
    Ok(Some(compute_far_threshold(&distances, config.evaluation.far_target)?))
}

/// Scenario label used in reports.
pub fn scenario_label(config: &ExperimentConfig, attack_alpha: usize) -> String {
    if attack_alpha == 1 && config.target.scenario != ScenarioChoice::Update {
        "single".into()
    } else {
        config.target.scenario.as_str().into()
    }
}

fn attacker_view(set: &SnapshotSet, subset: Option<&[usize]>) -> Result<SnapshotSet> {
    match subset {
        Some(s) => set.subset(s),
        None => Ok(set.clone()),
    }
}

/// Attack-train and attack-eval banks. The train bank comes from the
/// attacker's snapshots; the eval bank from the full set, so its final
/// vectors are the final model's outputs.
pub fn banks(data: &DataStage, set: &SnapshotSet, subset: Option<&[usize]>) -> Result<(Vec<VectorTuple>, Vec<VectorTuple>)> {
    let view = attacker_view(set, subset)?;
    Ok((
        build_vector_bank(&view, &data.attack_train)?,
        build_vector_bank(set, &data.attack_eval)?,
    ))
}

pub fn inversion_attack(
    config: &ExperimentConfig,
    data: &DataStage,
    train_bank: &[VectorTuple],
    feature_net: Option<&FrozenFeatures>,
) -> Result<TrainedInverter> {
    let images: HashMap<String, &Pixels> = data
        .attack_train
        .iter()
        .map(|s| (s.sample_id.clone(), &s.pixels))
        .collect();
    let inv = crate::inversion::InversionConfig {
        seed: derive_seed(config.seed, "inversion"),
        ..config.attack.inversion.clone()
    };
    train_inversion(train_bank, &images, config.attack.mode, &inv, feature_net)
}

pub fn test_plan(config: &ExperimentConfig, alpha: usize) -> TestPlan {
    TestPlan {
        mode: config.attack.mode,
        models_for_test: config.attack.models_for_test,
        alpha,
    }
}

/// Type1 and Rank-1 for feature extractors, classifier accuracy otherwise.
pub fn evaluate_inversion(
    config: &ExperimentConfig,
    config_hash: &str,
    set: &SnapshotSet,
    g: &Generator,
    alpha: usize,
    eval_bank: &[VectorTuple],
    threshold: Option<&Threshold>,
) -> Result<Vec<EvalReport>> {
    let plan = test_plan(config, alpha);
    let ctx = EvalContext::new(&scenario_label(config, alpha), &plan, config.seed, config_hash);
    let final_model = set.final_model();
    match final_model.kind {
        ModelKind::FeatureExtractor => {
            let threshold =
                threshold.ok_or_else(|| Error::Precondition("feature extractor evaluation needs a threshold".into()))?;
            Ok(vec![
                type1_accuracy(g, final_model, eval_bank, threshold, &plan, &ctx)?,
                rank1_accuracy(g, final_model, eval_bank, &plan, &ctx)?,
            ])
        }
        ModelKind::Classifier => Ok(vec![classifier_accuracy_for(g, final_model, eval_bank, &plan, &ctx)?]),
    }
}

/// Members drawn from target_train and nonmembers from the probe set,
/// balanced, each divided into attack-train and attack-eval parts.
pub struct MiSamples {
    pub train_members: Vec<ImageSample>,
    pub train_nonmembers: Vec<ImageSample>,
    pub eval_members: Vec<ImageSample>,
    pub eval_nonmembers: Vec<ImageSample>,
}

pub fn mi_samples(config: &ExperimentConfig, data: &DataStage) -> Result<MiSamples> {
    let mut rng = seeded_rng(derive_seed(config.seed, "mi-samples"));
    let n = config
        .attack
        .mi_samples_per_side
        .min(data.split.target_train.len())
        .min(data.split.probe.len());
    if n < 2 {
        return Err(Error::Precondition("membership inference needs >= 2 samples per side".into()));
    }
    let mut members = data.split.target_train.clone();
    members.shuffle(&mut rng);
    members.truncate(n);
    let mut nonmembers = data.split.probe.clone();
    nonmembers.shuffle(&mut rng);
    nonmembers.truncate(n);
    let n_eval = crate::dataset::ceil_fraction(config.dataset.attack_eval_fraction, n).clamp(1, n - 1);
    let eval_members = members.split_off(n - n_eval);
    let eval_nonmembers = nonmembers.split_off(n - n_eval);
    Ok(MiSamples {
        train_members: members,
        train_nonmembers: nonmembers,
        eval_members,
        eval_nonmembers,
    })
}

pub struct MembershipOutcome {
    pub trained: TrainedMi,
    pub train_data: MiDataset,
    pub eval_data: MiDataset,
}

pub fn membership_attack(
    config: &ExperimentConfig,
    data: &DataStage,
    set: &SnapshotSet,
    subset: Option<&[usize]>,
) -> Result<MembershipOutcome> {
    let samples = mi_samples(config, data)?;
    let view = attacker_view(set, subset)?;
    let mode = config.attack.mode;
    let mut rng = seeded_rng(derive_seed(config.seed, "mi-build"));
    let train_data = build_mi_dataset(
        &view,
        &data.split.target_train,
        &samples.train_members,
        &samples.train_nonmembers,
        mode,
        &mut rng,
    )?;
    let eval_data = build_mi_dataset(
        set,
        &data.split.target_train,
        &samples.eval_members,
        &samples.eval_nonmembers,
        mode,
        &mut rng,
    )?;
    let mi_config = crate::membership::MiConfig {
        seed: derive_seed(config.seed, "mi"),
        models_for_test: config.attack.models_for_test,
        ..config.attack.membership.clone()
    };
    let trained = train_mi(&train_data, mode, &mi_config)?;
    Ok(MembershipOutcome {
        trained,
        train_data,
        eval_data,
    })
}

pub fn evaluate_membership(
    config: &ExperimentConfig,
    config_hash: &str,
    attacker: &MiAttacker,
    alpha: usize,
    eval_data: &MiDataset,
) -> Result<Vec<EvalReport>> {
    let plan = test_plan(config, alpha);
    let ctx = EvalContext::new(&scenario_label(config, alpha), &plan, config.seed, config_hash);
    Ok(vec![mi_accuracy(attacker, eval_data, &plan, &ctx)?])
}

/// Runs the configured attack on `subset` and evaluates it against the
/// full set's final model.
pub fn attack_and_evaluate(
    config: &ExperimentConfig,
    config_hash: &str,
    data: &DataStage,
    set: &SnapshotSet,
    subset: Option<&[usize]>,
    feature_net: Option<&FrozenFeatures>,
    threshold: Option<&Threshold>,
) -> Result<Vec<EvalReport>> {
    match config.attack.kind {
        AttackKind::Inversion => {
            let (train_bank, eval_bank) = banks(data, set, subset)?;
            let inverter = inversion_attack(config, data, &train_bank, feature_net)?;
            evaluate_inversion(config, config_hash, set, &inverter.generator, inverter.alpha, &eval_bank, threshold)
        }
        AttackKind::Membership => {
            let outcome = membership_attack(config, data, set, subset)?;
            evaluate_membership(
                config,
                config_hash,
                &outcome.trained.attacker,
                outcome.train_data.alpha(),
                &outcome.eval_data,
            )
        }
    }
}
