//! Target networks, snapshot capture under the upslope, update and
//! downslope scenarios, and black-box queries.

mod margin;
mod network;
pub mod store;

use std::collections::{BTreeSet, HashMap};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, ImageSample, Origin, Pixels};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, derive_seed, images_to_tensor, scalar, seeded_rng, softmax_rows, tensor_to_rows,
    AdamConfig, SeededRng, DEVICE,
};

pub use margin::{margin_logits, margin_loss, MarginSchedule};
pub use network::{Architecture, ModelKind, Network};
pub use store::{load_model, load_single_model, load_snapshot_set, save_model, save_snapshot_set, METADATA_FILE};

/// A model output: an embedding or a prediction vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateVector(pub Vec<f32>);

impl TemplateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetLoss {
    AngularMargin(MarginSchedule),
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub dropout_rate: f64,
    pub optimizer: AdamConfig,
    pub loss: TargetLoss,
    pub batch_size: usize,
    pub seed: u64,
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
    /// Embedding width m for feature extractors.
    pub embedding_dim: usize,
    /// Fine-tuning epochs in the update scenario.
    pub update_epochs: usize,
}

impl TrainConfig {
    pub fn feature_extractor_default() -> Self {
        Self {
            epochs: 20,
            dropout_rate: 0.5,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
            },
            loss: TargetLoss::AngularMargin(MarginSchedule::default()),
            batch_size: 32,
            seed: 0,
            conv_channels: vec![8, 16, 32, 32],
            hidden: 128,
            embedding_dim: 64,
            update_epochs: 10,
        }
    }

    pub fn classifier_default() -> Self {
        Self {
            loss: TargetLoss::Softmax,
            ..Self::feature_extractor_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One trained (or initial) network state.
#[derive(Clone)]
pub struct TargetModel {
    pub kind: ModelKind,
    pub output_dim: usize,
    pub backbone_id: String,
    pub stage_tag: String,
    /// Class label of each training target index (classifier outputs and
    /// margin-head rows).
    pub class_labels: Vec<u32>,
    pub(crate) network: Network,
}

impl TargetModel {
    pub fn architecture(&self) -> &Architecture {
        &self.network.arch
    }

    pub fn parameter_values(&self) -> Result<HashMap<String, Tensor>> {
        self.network.params.snapshot()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Inference-mode outputs for a batch of images.
    pub fn query_batch(&self, images: &[&Pixels]) -> Result<Vec<TemplateVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let xs = images_to_tensor(chunk, self.network.dtype())?;
            let ys = self.outputs(&xs)?;
            out.extend(tensor_to_rows(&ys)?.into_iter().map(TemplateVector));
        }
        Ok(out)
    }

    /// Graph-connected inference-mode outputs (softmax for classifiers).
    pub fn outputs(&self, xs: &Tensor) -> Result<Tensor> {
        let raw = self.network.forward_raw(xs, None)?;
        match self.kind {
            ModelKind::FeatureExtractor => Ok(raw),
            ModelKind::Classifier => softmax_rows(&raw),
        }
    }

    /// Training objective on `samples` with dropout disabled.
    pub fn loss_on(&self, samples: &[&ImageSample], loss: &TargetLoss, iteration: usize) -> Result<f64> {
        let index = label_index(&self.class_labels);
        let targets = targets_for(samples, &index)?;
        let pixels: Vec<&Pixels> = samples.iter().map(|s| &s.pixels).collect();
        let xs = images_to_tensor(&pixels, self.network.dtype())?;
        let raw = self.network.forward_raw(&xs, None)?;
        scalar(&objective(&self.network, &raw, &targets, loss, iteration)?)
    }

    fn deep_copy(&self, stage_tag: String) -> Result<TargetModel> {
        let mut rng = seeded_rng(0);
        let network = Network::build(&self.network.arch, self.network.dtype(), &mut rng)?;
        network.params.restore(&self.network.params.snapshot()?)?;
        Ok(TargetModel {
            stage_tag,
            network,
            ..self.clone()
        })
    }
}

/// Black-box query of one image.
pub fn query(model: &TargetModel, image: &ImageSample) -> Result<TemplateVector> {
    Ok(model
        .query_batch(&[&image.pixels])?
        .pop()
        .expect("one output per input"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Upslope,
    Update,
    Downslope,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Upslope => "upslope",
            Scenario::Update => "update",
            Scenario::Downslope => "downslope",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub tag: String,
    pub epoch: usize,
    pub fraction: f64,
}

/// Ordered snapshots of one training run; the last one is the final model.
#[derive(Clone)]
pub struct SnapshotSet {
    pub scenario: Scenario,
    pub snapshots: Vec<TargetModel>,
    pub stages: Vec<StageInfo>,
    pub seed: u64,
    pub removed_classes: Vec<u32>,
    pub added_classes: Vec<u32>,
}

impl SnapshotSet {
    pub fn alpha(&self) -> usize {
        self.snapshots.len()
    }

    pub fn final_model(&self) -> &TargetModel {
        self.snapshots.last().expect("snapshot sets are nonempty")
    }

    pub fn output_dim(&self) -> usize {
        self.final_model().output_dim
    }

    /// Keeps the stages at `indices` (0-based, in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<SnapshotSet> {
        if indices.is_empty() {
            return Err(Error::Precondition("snapshot subset is empty".into()));
        }
        let mut snapshots = Vec::new();
        let mut stages = Vec::new();
        for &i in indices {
            let s = self.snapshots.get(i).ok_or_else(|| {
                Error::Precondition(format!("stage index {i} out of range 0..{}", self.alpha()))
            })?;
            snapshots.push(s.clone());
            stages.push(self.stages[i].clone());
        }
        Ok(SnapshotSet {
            snapshots,
            stages,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .snapshots
            .first()
            .ok_or_else(|| Error::Precondition("empty snapshot set".into()))?;
        let mut tags = BTreeSet::new();
        for s in &self.snapshots {
            if s.kind != first.kind || s.output_dim != first.output_dim || s.backbone_id != first.backbone_id {
                return Err(Error::Precondition(format!(
                    "snapshot {} differs in kind, output_dim or backbone",
                    s.stage_tag
                )));
            }
            if !tags.insert(s.stage_tag.as_str()) {
                return Err(Error::Precondition(format!("duplicate stage tag {}", s.stage_tag)));
            }
        }
        Ok(())
    }
}

pub(crate) fn label_index(labels: &[u32]) -> HashMap<u32, u32> {
    labels.iter().enumerate().map(|(i, &l)| (l, i as u32)).collect()
}

fn targets_for(samples: &[&ImageSample], index: &HashMap<u32, u32>) -> Result<Vec<u32>> {
    samples
        .iter()
        .map(|s| {
            index.get(&s.class_label).copied().ok_or_else(|| {
                Error::Precondition(format!("class {} unknown to the model", s.class_label))
            })
        })
        .collect()
}

fn objective(
    network: &Network,
    raw: &Tensor,
    targets: &[u32],
    loss: &TargetLoss,
    iteration: usize,
) -> Result<Tensor> {
    match (network.arch.kind, loss) {
        (ModelKind::FeatureExtractor, TargetLoss::AngularMargin(schedule)) => {
            let head = network
                .head()
                .ok_or_else(|| Error::Precondition("feature extractor without margin head".into()))?;
            margin_loss(
                raw,
                head.weight.as_tensor(),
                targets,
                schedule.margin,
                schedule.lambda(iteration),
            )
        }
        (ModelKind::FeatureExtractor, TargetLoss::Softmax) => {
            let head = network
                .head()
                .ok_or_else(|| Error::Precondition("feature extractor without margin head".into()))?;
            cross_entropy(&head.forward(raw)?, targets)
        }
        (ModelKind::Classifier, _) => cross_entropy(raw, targets),
    }
}

/// Epoch at which each schedule fraction is captured.
pub fn schedule_epochs(schedule: &[f64], epochs: usize) -> Result<Vec<usize>> {
    if schedule.is_empty() {
        return Err(Error::Config("empty snapshot schedule".into()));
    }
    if schedule.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!("schedule fractions must lie in [0,1]: {schedule:?}")));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("schedule must be strictly increasing: {schedule:?}")));
    }
    Ok(schedule.iter().map(|f| (f * epochs as f64).round() as usize).collect())
}

struct Trainer<'a> {
    network: Network,
    samples: Vec<&'a ImageSample>,
    targets: Vec<u32>,
    images: Tensor,
    config: &'a TrainConfig,
    rng: SeededRng,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    fn new(network: Network, samples: Vec<&'a ImageSample>, labels: &[u32], config: &'a TrainConfig, rng: SeededRng) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Precondition("no training samples".into()));
        }
        let targets = targets_for(&samples, &label_index(labels))?;
        let pixels: Vec<&Pixels> = samples.iter().map(|s| &s.pixels).collect();
        let images = images_to_tensor(&pixels, network.dtype())?;
        Ok(Self {
            network,
            samples,
            targets,
            images,
            config,
            rng,
            iteration: 0,
        })
    }

    /// Runs `epochs` epochs; `on_epoch(e)` fires after each with the
    /// 1-based epoch count of this call.
    fn run(
        &mut self,
        epochs: usize,
        epoch_offset: usize,
        mut on_epoch: impl FnMut(usize, &Network) -> Result<()>,
    ) -> Result<()> {
        let mut opt = self.config.optimizer.build(self.network.params.vars())?;
        let mut order: Vec<u32> = (0..self.samples.len() as u32).collect();
        for epoch in 1..=epochs {
            order.shuffle(&mut self.rng);
            for batch in order.chunks(self.config.batch_size) {
                let idx = Tensor::from_slice(batch, batch.len(), &DEVICE)?;
                let xs = self.images.index_select(&idx, 0)?;
                let ts: Vec<u32> = batch.iter().map(|&i| self.targets[i as usize]).collect();
                let raw = self
                    .network
                    .forward_raw(&xs, Some((&mut self.rng, self.config.dropout_rate)))?;
                let loss = objective(&self.network, &raw, &ts, &self.config.loss, self.iteration)?;
                let value = scalar(&loss)?;
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch_offset + epoch,
                        detail: format!("target loss became {value}"),
                    });
                }
                opt.backward_step(&loss)?;
                self.iteration += 1;
            }
            on_epoch(epoch, &self.network)?;
        }
        Ok(())
    }
}

fn wrap(network: &Network, class_labels: &[u32], tag: String) -> Result<TargetModel> {
    let model = TargetModel {
        kind: network.arch.kind,
        output_dim: network.arch.output_dim,
        backbone_id: network.arch.backbone_id(),
        stage_tag: tag.clone(),
        class_labels: class_labels.to_vec(),
        network: network.clone(),
    };
    model.deep_copy(tag)
}

fn architecture(kind: ModelKind, input: (usize, usize, usize), classes: usize, config: &TrainConfig) -> Architecture {
    Architecture {
        kind,
        input,
        conv_channels: config.conv_channels.clone(),
        hidden: config.hidden,
        output_dim: match kind {
            ModelKind::FeatureExtractor => config.embedding_dim,
            ModelKind::Classifier => classes,
        },
        head_classes: match kind {
            ModelKind::FeatureExtractor => classes,
            ModelKind::Classifier => 0,
        },
    }
}

fn input_shape(samples: &[ImageSample]) -> Result<(usize, usize, usize)> {
    let p = &samples
        .first()
        .ok_or_else(|| Error::Precondition("empty training set".into()))?
        .pixels;
    Ok((p.channels, p.height, p.width))
}

fn train_schedule(
    kind: ModelKind,
    samples: &[ImageSample],
    label_space: &[u32],
    config: &TrainConfig,
    schedule: &[f64],
    scenario: Scenario,
) -> Result<Vec<(TargetModel, StageInfo)>> {
    config.validate()?;
    let epochs_at = schedule_epochs(schedule, config.epochs)?;
    let arch = architecture(kind, input_shape(samples)?, label_space.len(), config);
    let mut init_rng = seeded_rng(derive_seed(config.seed, "target-init"));
    let network = Network::build(&arch, DType::F32, &mut init_rng)?;

    let mut out = Vec::new();
    let stage = |epoch: usize, fraction: f64| StageInfo {
        tag: format!("{}-ep{epoch:03}", scenario.as_str()),
        epoch,
        fraction,
    };
    for (&e, &f) in epochs_at.iter().zip(schedule) {
        if e == 0 {
            let info = stage(0, f);
            out.push((wrap(&network, label_space, info.tag.clone())?, info));
        }
    }
    let last = *epochs_at.last().expect("nonempty schedule");
    if last > 0 {
        let refs: Vec<&ImageSample> = samples.iter().collect();
        let rng = seeded_rng(derive_seed(config.seed, "target-train"));
        let mut trainer = Trainer::new(network, refs, label_space, config, rng)?;
        trainer.run(last, 0, |epoch, net| {
            for (&e, &f) in epochs_at.iter().zip(schedule) {
                if e == epoch {
                    let info = stage(epoch, f);
                    out.push((wrap(net, label_space, info.tag.clone())?, info));
                }
            }
            log::debug!("target epoch {epoch}/{last}");
            Ok(())
        })?;
    }
    Ok(out)
}

fn sorted_labels(samples: &[ImageSample]) -> Vec<u32> {
    samples
        .iter()
        .map(|s| s.class_label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Trains on `split.target_train`, capturing a deep copy at every schedule
/// fraction (fraction 0 is the initialization).
pub fn train_with_snapshots(
    kind: ModelKind,
    split: &DatasetSplit,
    config: &TrainConfig,
    schedule: &[f64],
) -> Result<SnapshotSet> {
    let labels = sorted_labels(&split.target_train);
    let staged = train_schedule(kind, &split.target_train, &labels, config, schedule, Scenario::Upslope)?;
    let (snapshots, stages) = staged.into_iter().unzip();
    let set = SnapshotSet {
        scenario: Scenario::Upslope,
        snapshots,
        stages,
        seed: config.seed,
        removed_classes: Vec::new(),
        added_classes: Vec::new(),
    };
    set.validate()?;
    Ok(set)
}

/// Fine-tunes the final base model for `config.update_epochs` epochs on the
/// training set plus a crafted new identity. Captures the extended
/// original, the halfway model and the last model.
pub fn run_update_scenario(
    base: &SnapshotSet,
    split: &DatasetSplit,
    new_class_images: &[ImageSample],
    config: &TrainConfig,
) -> Result<SnapshotSet> {
    config.validate()?;
    let first = new_class_images
        .first()
        .ok_or_else(|| Error::Precondition("update scenario needs at least one new image".into()))?;
    let new_label = first.class_label;
    if new_class_images.iter().any(|s| s.class_label != new_label) {
        return Err(Error::Precondition("new class images must share one label".into()));
    }
    if let Some(s) = new_class_images.iter().find(|s| s.origin != Origin::CraftedBlur) {
        return Err(Error::Precondition(format!(
            "new class image {} is not blur-crafted",
            s.sample_id
        )));
    }
    let final_model = base.final_model();
    if final_model.class_labels.contains(&new_label) {
        return Err(Error::Precondition(format!(
            "new class label {new_label} collides with an existing class"
        )));
    }

    let mut rng = seeded_rng(derive_seed(config.seed, "update-extend"));
    let network = final_model.network.extend_by_one_class(&mut rng)?;
    let mut labels = final_model.class_labels.clone();
    labels.push(new_label);

    let epochs = config.update_epochs.max(1);
    let halfway = epochs.div_ceil(2);
    let tag = |e: usize| format!("update-ep{e:03}");
    let mut snapshots = vec![wrap(&network, &labels, tag(0))?];
    let mut stages = vec![StageInfo {
        tag: tag(0),
        epoch: 0,
        fraction: 0.0,
    }];

    let mut samples: Vec<&ImageSample> = split.target_train.iter().collect();
    samples.extend(new_class_images.iter());
    let rng = seeded_rng(derive_seed(config.seed, "update-train"));
    let mut trainer = Trainer::new(network, samples, &labels, config, rng)?;
    trainer.run(epochs, 0, |epoch, net| {
        if epoch == halfway || epoch == epochs {
            snapshots.push(wrap(net, &labels, tag(epoch))?);
            stages.push(StageInfo {
                tag: tag(epoch),
                epoch,
                fraction: epoch as f64 / epochs as f64,
            });
        }
        Ok(())
    })?;
    let set = SnapshotSet {
        scenario: Scenario::Update,
        snapshots,
        stages,
        seed: config.seed,
        removed_classes: Vec::new(),
        added_classes: vec![new_label],
    };
    set.validate()?;
    Ok(set)
}

/// Removes `removed_class_count` seeded-random classes and retrains from a
/// fresh initialization with the original recipe. The label space is kept,
/// so outputs stay comparable with the pre-removal model.
pub fn run_downslope_scenario(
    kind: ModelKind,
    split: &DatasetSplit,
    removed_class_count: usize,
    config: &TrainConfig,
    schedule: &[f64],
) -> Result<SnapshotSet> {
    let labels = sorted_labels(&split.target_train);
    if removed_class_count >= labels.len() {
        return Err(Error::Precondition(format!(
            "cannot remove {removed_class_count} of {} classes",
            labels.len()
        )));
    }
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut seeded_rng(derive_seed(config.seed, "downslope-remove")));
    let mut removed: Vec<u32> = shuffled[..removed_class_count].to_vec();
    removed.sort_unstable();
    let kept: Vec<ImageSample> = split
        .target_train
        .iter()
        .filter(|s| !removed.contains(&s.class_label))
        .cloned()
        .collect();
    let staged = train_schedule(kind, &kept, &labels, config, schedule, Scenario::Downslope)?;
    let (snapshots, stages) = staged.into_iter().unzip();
    let set = SnapshotSet {
        scenario: Scenario::Downslope,
        snapshots,
        stages,
        seed: config.seed,
        removed_classes: removed,
        added_classes: Vec::new(),
    };
    set.validate()?;
    Ok(set)
}

/// Trains a small classifier whose early conv activations serve as the
/// frozen perceptual feature network.
pub fn train_feature_network(samples: &[ImageSample], config: &TrainConfig) -> Result<TargetModel> {
    let labels = sorted_labels(samples);
    let staged = train_schedule(ModelKind::Classifier, samples, &labels, config, &[1.0], Scenario::Upslope)?;
    Ok(staged.into_iter().next().expect("one stage").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{blur_sample, split_feature_extraction, synthetic, Regime};

    fn tiny_split(regime: Regime) -> DatasetSplit {
        let corpus = synthetic::generate(&synthetic::SyntheticSpec {
            classes: 6,
            per_class: 6,
            height: 16,
            width: 16,
            ..Default::default()
        })
        .unwrap();
        match regime {
            Regime::FeatureExtraction => split_feature_extraction(&corpus, 2, 8, 1).unwrap(),
            Regime::Classification => crate::dataset::split_classification(&corpus, 0.2, 1).unwrap(),
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            conv_channels: vec![4, 8],
            hidden: 16,
            embedding_dim: 8,
            batch_size: 8,
            update_epochs: 4,
            ..TrainConfig::feature_extractor_default()
        }
    }

    #[test]
    fn schedule_maps_to_epochs() {
        assert_eq!(
            schedule_epochs(&[0.0, 0.25, 0.5, 0.75, 1.0], 100).unwrap(),
            vec![0, 25, 50, 75, 100]
        );
        assert!(schedule_epochs(&[0.5, 0.25], 10).is_err());
        assert!(schedule_epochs(&[1.5], 10).is_err());
    }

    #[test]
    fn upslope_captures_each_stage() {
        let split = tiny_split(Regime::FeatureExtraction);
        let set = train_with_snapshots(ModelKind::FeatureExtractor, &split, &tiny_config(), &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(set.alpha(), 3);
        let epochs: Vec<usize> = set.stages.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![0, 2, 4]);
        let v = query(set.final_model(), &split.probe[0]).unwrap();
        assert_eq!(v.len(), 8);
        // Stage 0 is the untouched initialization, distinct from the final.
        let v0 = query(&set.snapshots[0], &split.probe[0]).unwrap();
        assert_ne!(v0, v);
    }

    #[test]
    fn degenerate_schedules() {
        let split = tiny_split(Regime::FeatureExtraction);
        let only_final = train_with_snapshots(ModelKind::FeatureExtractor, &split, &tiny_config(), &[1.0]).unwrap();
        assert_eq!(only_final.alpha(), 1);
        let only_init = train_with_snapshots(ModelKind::FeatureExtractor, &split, &tiny_config(), &[0.0]).unwrap();
        assert_eq!(only_init.stages[0].epoch, 0);
    }

    #[test]
    fn classifier_outputs_are_distributions() {
        let split = tiny_split(Regime::Classification);
        let cfg = TrainConfig {
            loss: TargetLoss::Softmax,
            ..tiny_config()
        };
        let set = train_with_snapshots(ModelKind::Classifier, &split, &cfg, &[1.0]).unwrap();
        let m = set.final_model();
        assert_eq!(m.output_dim, 6);
        for s in split.probe.iter().take(5) {
            let v = query(m, s).unwrap();
            let total: f32 = v.0.iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
            assert!(v.0.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let split = tiny_split(Regime::FeatureExtraction);
        let set = train_with_snapshots(ModelKind::FeatureExtractor, &split, &tiny_config(), &[1.0]).unwrap();
        let net = &set.final_model().network;
        let xs = images_to_tensor(&[&split.probe[0].pixels], DType::F32).unwrap();
        let mut rng = seeded_rng(1);
        let a: Vec<Vec<f32>> = net.forward_raw(&xs, Some((&mut rng, 0.5))).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = net.forward_raw(&xs, Some((&mut rng, 0.5))).unwrap().to_vec2().unwrap();
        assert_ne!(a, b);
        let c = query(set.final_model(), &split.probe[0]).unwrap();
        let d = query(set.final_model(), &split.probe[0]).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn update_scenario_adds_crafted_class() {
        let split = tiny_split(Regime::Classification);
        let cfg = TrainConfig {
            loss: TargetLoss::Softmax,
            ..tiny_config()
        };
        let base = train_with_snapshots(ModelKind::Classifier, &split, &cfg, &[1.0]).unwrap();
        let crafted: Vec<ImageSample> = split.probe[..3]
            .iter()
            .map(|s| {
                let mut b = blur_sample(s).unwrap();
                b.class_label = 99;
                b.sample_id = format!("new_{}", s.sample_id);
                b
            })
            .collect();
        let set = run_update_scenario(&base, &split, &crafted, &cfg).unwrap();
        assert_eq!(set.alpha(), 3);
        let epochs: Vec<usize> = set.stages.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![0, 2, 4]);
        assert_eq!(set.output_dim(), 7);
        assert_eq!(set.added_classes, vec![99]);

        assert!(run_update_scenario(&base, &split, &[], &cfg).is_err());
        let natural: Vec<ImageSample> = crafted
            .iter()
            .map(|s| ImageSample {
                origin: Origin::Natural,
                ..s.clone()
            })
            .collect();
        assert!(run_update_scenario(&base, &split, &natural, &cfg).is_err());
        let mut collide = crafted.clone();
        collide.iter_mut().for_each(|s| s.class_label = split.target_train[0].class_label);
        assert!(run_update_scenario(&base, &split, &collide, &cfg).is_err());
    }

    #[test]
    fn downslope_removes_classes() {
        let split = tiny_split(Regime::FeatureExtraction);
        let set = run_downslope_scenario(ModelKind::FeatureExtractor, &split, 1, &tiny_config(), &[0.0, 1.0]).unwrap();
        assert_eq!(set.removed_classes.len(), 1);
        assert_eq!(set.scenario, Scenario::Downslope);
        assert!(run_downslope_scenario(ModelKind::FeatureExtractor, &split, 4, &tiny_config(), &[1.0]).is_err());

        // Zero removals retrains on the same data with the same recipe.
        let control = run_downslope_scenario(ModelKind::FeatureExtractor, &split, 0, &tiny_config(), &[1.0]).unwrap();
        let upslope = train_with_snapshots(ModelKind::FeatureExtractor, &split, &tiny_config(), &[1.0]).unwrap();
        assert_eq!(
            query(control.final_model(), &split.probe[0]).unwrap(),
            query(upslope.final_model(), &split.probe[0]).unwrap()
        );
    }
}
