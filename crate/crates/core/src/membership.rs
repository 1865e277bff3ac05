//! Membership inference over model outputs: a 64-64-1 fully connected
//! attacker, with an extra slot-index head for `Srwal`.

use std::collections::HashSet;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::incorporation::{
    bank_scale, build_vector_bank, make_train_input, write_bank_csv, AugmentedVector, Mode, ModelsForTest,
    TestPlan, VectorTuple,
};
use crate::inversion::{alignment_loss, argmax};
use crate::nn::{
    bce_with_logits, derive_seed, rows_to_tensor, scalar, seeded_rng, AdamConfig, Linear, Params, SeededRng, DEVICE,
};
use crate::target_models::SnapshotSet;

pub const HIDDEN: [usize; 2] = [64, 64];
const SCORE_EPS: f64 = 1e-7;
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct MiRecord {
    pub tuple: VectorTuple,
    /// The record's input as drawn at construction time.
    pub input: AugmentedVector,
    pub member: bool,
}

#[derive(Clone, Debug)]
pub struct MiDataset {
    pub records: Vec<MiRecord>,
    pub mode: Mode,
    /// Fraction of records that are members.
    pub balance: f64,
}

impl MiDataset {
    pub fn from_records(records: Vec<MiRecord>, mode: Mode) -> Self {
        let members = records.iter().filter(|r| r.member).count();
        let balance = if records.is_empty() {
            0.0
        } else {
            members as f64 / records.len() as f64
        };
        Self { records, mode, balance }
    }

    /// Records whose stored input is the mode's deterministic test-time
    /// draw, for datasets read back from CSV.
    pub fn from_tuples(bank: Vec<VectorTuple>, members: Vec<bool>, mode: Mode) -> Self {
        let mut rng = seeded_rng(0);
        let records = bank
            .into_iter()
            .zip(members)
            .map(|(tuple, member)| MiRecord {
                input: make_train_input(&tuple, mode, &mut rng),
                tuple,
                member,
            })
            .collect();
        Self::from_records(records, mode)
    }

    pub fn alpha(&self) -> usize {
        self.records.first().map(|r| r.tuple.alpha()).unwrap_or(0)
    }

    pub fn m(&self) -> usize {
        self.records.first().map(|r| r.tuple.m()).unwrap_or(0)
    }

    /// Vector-bank CSV with a trailing `member` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let bank: Vec<VectorTuple> = self.records.iter().map(|r| r.tuple.clone()).collect();
        let members: Vec<bool> = self.records.iter().map(|r| r.member).collect();
        write_bank_csv(&bank, Some(&members), path)
    }

    /// Seeded split into (train, validation), stratified by membership.
    pub fn split(&self, validation_fraction: f64, seed: u64) -> (MiDataset, MiDataset) {
        let mut rng = seeded_rng(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for flag in [true, false] {
            let mut group: Vec<&MiRecord> = self.records.iter().filter(|r| r.member == flag).collect();
            group.shuffle(&mut rng);
            let n_val = crate::dataset::ceil_fraction(validation_fraction, group.len()).min(group.len());
            for (i, r) in group.into_iter().enumerate() {
                if i < n_val {
                    val.push(r.clone());
                } else {
                    train.push(r.clone());
                }
            }
        }
        (
            MiDataset::from_records(train, self.mode),
            MiDataset::from_records(val, self.mode),
        )
    }
}

/// Queries the snapshots with members and nonmembers and labels each record
/// by provenance. Records are shuffled with `rng`.
pub fn build_mi_dataset(
    snapshots: &SnapshotSet,
    target_train: &[ImageSample],
    member_images: &[ImageSample],
    nonmember_images: &[ImageSample],
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<MiDataset> {
    let train_ids: HashSet<&str> = target_train.iter().map(|s| s.sample_id.as_str()).collect();
    let member_ids: HashSet<&str> = member_images.iter().map(|s| s.sample_id.as_str()).collect();
    if let Some(s) = nonmember_images.iter().find(|s| member_ids.contains(s.sample_id.as_str())) {
        return Err(Error::Precondition(format!(
            "sample {} is both member and nonmember",
            s.sample_id
        )));
    }
    if let Some(s) = member_images.iter().find(|s| !train_ids.contains(s.sample_id.as_str())) {
        return Err(Error::Precondition(format!("member {} is not in target_train", s.sample_id)));
    }
    if let Some(s) = nonmember_images.iter().find(|s| train_ids.contains(s.sample_id.as_str())) {
        return Err(Error::Precondition(format!("nonmember {} is in target_train", s.sample_id)));
    }
    let mut records = Vec::new();
    for (images, member) in [(member_images, true), (nonmember_images, false)] {
        if images.is_empty() {
            continue;
        }
        for tuple in build_vector_bank(snapshots, images)? {
            let input = make_train_input(&tuple, mode, rng);
            records.push(MiRecord { tuple, input, member });
        }
    }
    records.shuffle(rng);
    Ok(MiDataset::from_records(records, mode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub validation_fraction: f64,
    pub models_for_test: ModelsForTest,
    pub seed: u64,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 32,
            optimizer: AdamConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
            },
            validation_fraction: 0.3,
            models_for_test: ModelsForTest::Final,
            seed: 0,
        }
    }
}

/// Three fully connected layers (64, 64, 1) with a logistic membership
/// output; `Srwal` adds a slot-index head on the second hidden layer.
#[derive(Clone)]
pub struct MiAttacker {
    pub input_dim: usize,
    pub mode: Mode,
    pub params: Params,
    /// Inputs are divided by this scalar; zero entries stay zero.
    pub input_scale: f32,
    layers: [Linear; 3],
    index_head: Option<Linear>,
}

impl MiAttacker {
    pub fn build(input_dim: usize, mode: Mode, alpha: usize, input_scale: f32, rng: &mut SeededRng) -> Result<Self> {
        let mut params = Params::new();
        let dt = DType::F32;
        let l1 = Linear::new(&mut params, "mi.fc0", input_dim, HIDDEN[0], dt, rng)?;
        let l2 = Linear::new(&mut params, "mi.fc1", HIDDEN[0], HIDDEN[1], dt, rng)?;
        let l3 = Linear::new(&mut params, "mi.fc2", HIDDEN[1], 1, dt, rng)?;
        let index_head = mode
            .has_alignment()
            .then(|| Linear::new(&mut params, "mi.index", HIDDEN[1], alpha, dt, rng))
            .transpose()?;
        Ok(Self {
            input_dim,
            mode,
            params,
            input_scale,
            layers: [l1, l2, l3],
            index_head,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("mi_attacker.safetensors"))?;
        let meta = AttackerMeta {
            input_dim: self.input_dim,
            mode: self.mode,
            alpha: self.index_head.as_ref().map_or(1, |h| h.out_dim()),
            input_scale: self.input_scale,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("mi_attacker.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("mi_attacker.toml"))?;
        let meta: AttackerMeta = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let attacker = Self::build(meta.input_dim, meta.mode, meta.alpha, meta.input_scale, &mut seeded_rng(0))?;
        attacker.params.load(&dir.join("mi_attacker.safetensors"))?;
        Ok(attacker)
    }

    pub fn has_index_head(&self) -> bool {
        self.index_head.is_some()
    }

    /// (membership logits (B,), optional index logits (B, alpha)).
    pub fn forward(&self, inputs: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let (_, width) = inputs.dims2()?;
        if width != self.input_dim {
            return Err(Error::shape(self.input_dim, width));
        }
        let x = inputs.affine(1.0 / self.input_scale as f64, 0.0)?;
        let h1 = self.layers[0].forward(&x)?.relu()?;
        let h2 = self.layers[1].forward(&h1)?.relu()?;
        let logit = self.layers[2].forward(&h2)?.squeeze(1)?;
        let index = self.index_head.as_ref().map(|h| h.forward(&h2)).transpose()?;
        Ok((logit, index))
    }

    pub fn scores(&self, inputs: &[AugmentedVector]) -> Result<Vec<f64>> {
        let rows: Vec<&[f32]> = inputs.iter().map(|v| v.data.as_slice()).collect();
        let (logits, _) = self.forward(&rows_to_tensor(&rows, DType::F32)?)?;
        let logits: Vec<f32> = logits.to_vec1()?;
        Ok(logits.into_iter().map(|l| logistic(l as f64)).collect())
    }

    pub fn predict_index(&self, inputs: &[AugmentedVector]) -> Result<Vec<usize>> {
        let rows: Vec<&[f32]> = inputs.iter().map(|v| v.data.as_slice()).collect();
        let (_, index) = self.forward(&rows_to_tensor(&rows, DType::F32)?)?;
        let index = index.ok_or_else(|| Error::Precondition("attacker has no index head".into()))?;
        let rows: Vec<Vec<f32>> = index.to_vec2()?;
        Ok(rows.iter().map(|r| argmax(r)).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct AttackerMeta {
    input_dim: usize,
    mode: Mode,
    alpha: usize,
    input_scale: f32,
}

fn logistic(l: f64) -> f64 {
    (1.0 / (1.0 + (-l).exp())).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Membership probability for one input, in (0, 1).
pub fn infer_membership(attacker: &MiAttacker, input: &AugmentedVector) -> Result<f64> {
    Ok(attacker.scores(std::slice::from_ref(input))?[0])
}

/// Test-time membership score of a record: the mode's test input, with
/// multi-part inputs averaged.
pub fn record_score(attacker: &MiAttacker, tuple: &VectorTuple, plan: &TestPlan) -> Result<f64> {
    let input = plan.input_for(tuple)?;
    let scores = attacker.scores(input.parts())?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub struct TrainedMi {
    pub attacker: MiAttacker,
    pub validation_accuracy: f64,
    pub index_accuracy: Option<f64>,
}

/// Trains on `train`, with binary cross-entropy on the membership head and,
/// for `Srwal`, cross-entropy on the slot-index head.
pub fn fit_mi(train: &MiDataset, mode: Mode, config: &MiConfig) -> Result<MiAttacker> {
    let members = train.records.iter().filter(|r| r.member).count();
    if members == 0 || members == train.records.len() {
        return Err(Error::Precondition("membership training needs both labels".into()));
    }
    let alpha = train.alpha();
    let mut init = seeded_rng(derive_seed(config.seed, "mi-init"));
    let attacker = MiAttacker::build(mode.input_dim(alpha, train.m()), mode, alpha, bank_scale(train.records.iter().map(|r| &r.tuple)), &mut init)?;
    let mut opt = config.optimizer.build(attacker.params.vars())?;
    let mut rng = seeded_rng(derive_seed(config.seed, "mi-train"));
    let mut order: Vec<usize> = (0..train.records.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let inputs: Vec<AugmentedVector> = batch
                .iter()
                .map(|&i| make_train_input(&train.records[i].tuple, mode, &mut rng))
                .collect();
            let rows: Vec<&[f32]> = inputs.iter().map(|v| v.data.as_slice()).collect();
            let labels: Vec<f32> = batch
                .iter()
                .map(|&i| if train.records[i].member { 1.0 } else { 0.0 })
                .collect();
            let (logits, index) = attacker.forward(&rows_to_tensor(&rows, DType::F32)?)?;
            let target = Tensor::from_vec(labels, batch.len(), &DEVICE)?;
            let mut loss = bce_with_logits(&logits, &target)?;
            if let Some(index) = index {
                let slots: Vec<u32> = inputs
                    .iter()
                    .map(|v| v.slot_index.expect("structured input") as u32 - 1)
                    .collect();
                loss = (loss + alignment_loss(&index, &slots)?)?;
            }
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("membership loss {value}"),
                });
            }
            opt.backward_step(&loss)?;
        }
    }
    Ok(attacker)
}

/// Fraction of records whose thresholded score matches the label.
pub fn accuracy_on(attacker: &MiAttacker, data: &MiDataset, plan: &TestPlan) -> Result<(usize, usize)> {
    let mut correct = 0;
    for r in &data.records {
        let decision = record_score(attacker, &r.tuple, plan)? >= DECISION_THRESHOLD;
        if decision == r.member {
            correct += 1;
        }
    }
    Ok((correct, data.records.len()))
}

/// Index-head accuracy on freshly drawn structured inputs of `data`.
pub fn index_accuracy_on(attacker: &MiAttacker, data: &MiDataset, rng: &mut impl Rng) -> Result<f64> {
    let inputs: Vec<AugmentedVector> = data
        .records
        .iter()
        .map(|r| make_train_input(&r.tuple, attacker.mode, rng))
        .collect();
    let predicted = attacker.predict_index(&inputs)?;
    let hits = inputs
        .iter()
        .zip(predicted)
        .filter(|(v, p)| v.slot_index == Some(p + 1))
        .count();
    Ok(hits as f64 / inputs.len().max(1) as f64)
}

/// Splits off a validation set, trains, and reports validation accuracy.
pub fn train_mi(dataset: &MiDataset, mode: Mode, config: &MiConfig) -> Result<TrainedMi> {
    let (train, val) = dataset.split(config.validation_fraction, derive_seed(config.seed, "mi-split"));
    let attacker = fit_mi(&train, mode, config)?;
    let plan = TestPlan {
        mode,
        models_for_test: config.models_for_test,
        alpha: dataset.alpha(),
    };
    let (correct, total) = accuracy_on(&attacker, &val, &plan)?;
    let index_accuracy = attacker
        .has_index_head()
        .then(|| index_accuracy_on(&attacker, &val, &mut seeded_rng(derive_seed(config.seed, "mi-index"))))
        .transpose()?;
    Ok(TrainedMi {
        attacker,
        validation_accuracy: correct as f64 / total.max(1) as f64,
        index_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target_models::TemplateVector;
    use rand_distr::{Distribution, Normal};

    /// Two Gaussian blobs whose means differ by 10 standard deviations
    /// along every axis; per-slot structure when alpha > 1.
    pub(crate) fn blobs(n_each: usize, alpha: usize, m: usize, seed: u64) -> Vec<MiRecord> {
        let mut rng = seeded_rng(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        for (j, member) in (0..2 * n_each).map(|j| (j, j < n_each)) {
            let center = if member { 5.0 } else { -5.0 };
            let tuple = VectorTuple {
                sample_id: format!("r{j}"),
                class_label: 0,
                vectors: (0..alpha)
                    .map(|_| TemplateVector((0..m).map(|_| (center + noise.sample(&mut rng)) as f32).collect()))
                    .collect(),
            };
            let input = make_train_input(&tuple, Mode::Concat, &mut rng);
            out.push(MiRecord { tuple, input, member });
        }
        out.shuffle(&mut rng);
        out
    }

    fn quick() -> MiConfig {
        MiConfig {
            epochs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = MiDataset::from_records(blobs(150, 1, 8, 1), Mode::Rand);
        let trained = train_mi(&data, Mode::Rand, &quick()).unwrap();
        assert!(trained.validation_accuracy >= 0.99, "{}", trained.validation_accuracy);
        assert!(trained.index_accuracy.is_none());
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut recs = blobs(1000, 1, 8, 6);
        let mut flags: Vec<bool> = recs.iter().map(|r| r.member).collect();
        flags.shuffle(&mut seeded_rng(60));
        recs.iter_mut().zip(flags).for_each(|(r, f)| r.member = f);
        let data = MiDataset::from_records(recs, Mode::Rand);
        let cfg = MiConfig {
            epochs: 10,
            validation_fraction: 0.5,
            ..Default::default()
        };
        let trained = train_mi(&data, Mode::Rand, &cfg).unwrap();
        // 1000 validation records: one standard deviation is 1.6 points.
        assert!((trained.validation_accuracy - 0.5).abs() <= 0.05, "{}", trained.validation_accuracy);
    }

    #[test]
    fn index_head_learns_the_slot() {
        let data = MiDataset::from_records(blobs(150, 4, 6, 7), Mode::Srwal);
        let trained = train_mi(&data, Mode::Srwal, &quick()).unwrap();
        let acc = trained.index_accuracy.unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn attacker_round_trips_through_disk() {
        let data = MiDataset::from_records(blobs(20, 3, 4, 8), Mode::Srwal);
        let trained = train_mi(&data, Mode::Srwal, &quick()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        trained.attacker.save(dir.path()).unwrap();
        let back = MiAttacker::load(dir.path()).unwrap();
        let inputs: Vec<AugmentedVector> = data.records.iter().map(|r| r.input.clone()).collect();
        assert_eq!(trained.attacker.scores(&inputs).unwrap(), back.scores(&inputs).unwrap());
        assert_eq!(back.predict_index(&inputs).unwrap(), trained.attacker.predict_index(&inputs).unwrap());
    }

    #[test]
    fn single_label_rejected() {
        let mut recs = blobs(10, 1, 4, 2);
        recs.iter_mut().for_each(|r| r.member = true);
        let data = MiDataset::from_records(recs, Mode::Rand);
        assert!(fit_mi(&data, Mode::Rand, &quick()).is_err());
    }

    #[test]
    fn scores_are_bounded_and_deterministic() {
        let data = MiDataset::from_records(blobs(40, 2, 4, 3), Mode::Concat);
        let trained = train_mi(&data, Mode::Concat, &quick()).unwrap();
        let input = make_train_input(&data.records[0].tuple, Mode::Concat, &mut seeded_rng(0));
        let a = infer_membership(&trained.attacker, &input).unwrap();
        let b = infer_membership(&trained.attacker, &input).unwrap();
        assert_eq!(a, b);
        let extreme = AugmentedVector {
            data: vec![1e6; 8],
            slot_index: None,
            mode: Mode::Concat,
        };
        let s = infer_membership(&trained.attacker, &extreme).unwrap();
        assert!(s > 0.0 && s < 1.0);
        let narrow = AugmentedVector {
            data: vec![0.0; 3],
            slot_index: None,
            mode: Mode::Concat,
        };
        assert!(infer_membership(&trained.attacker, &narrow).is_err());
    }

    #[test]
    fn index_head_only_for_srwal() {
        let data = MiDataset::from_records(blobs(40, 3, 4, 4), Mode::Srwal);
        let srwal = train_mi(&data, Mode::Srwal, &quick()).unwrap();
        let sr = train_mi(&data, Mode::Sr, &quick()).unwrap();
        assert!(srwal.attacker.has_index_head());
        assert!(!sr.attacker.has_index_head());
        // The membership head keeps its shape with or without the index head.
        let input = make_train_input(&data.records[0].tuple, Mode::Srwal, &mut seeded_rng(1));
        let rows = rows_to_tensor(&[input.data.as_slice()], DType::F32).unwrap();
        assert_eq!(srwal.attacker.forward(&rows).unwrap().0.dims(), &[1]);
        assert_eq!(sr.attacker.forward(&rows).unwrap().0.dims(), &[1]);
        assert_eq!(srwal.attacker.input_dim, sr.attacker.input_dim);
    }

    #[test]
    fn split_is_stratified() {
        let data = MiDataset::from_records(blobs(50, 1, 2, 5), Mode::Rand);
        let (train, val) = data.split(0.3, 9);
        assert_eq!(val.records.len(), 30);
        assert_eq!(train.records.len(), 70);
        assert!((val.balance - 0.5).abs() < 1e-12);
    }
}
