//! Multi-model vector banks and the four ways of feeding them to an attack
//! model: `Rand`, `Concat`, structured random (`Sr`) and structured random
//! with alignment loss (`Srwal`).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageSample, Pixels};
use crate::error::{Error, Result};
use crate::target_models::{SnapshotSet, TemplateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rand,
    Concat,
    Sr,
    Srwal,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Rand, Mode::Concat, Mode::Sr, Mode::Srwal];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Rand => "rand",
            Mode::Concat => "concat",
            Mode::Sr => "sr",
            Mode::Srwal => "srwal",
        }
    }

    /// Attack-model input width for `alpha` snapshots of width `m`.
    pub fn input_dim(&self, alpha: usize, m: usize) -> usize {
        match self {
            Mode::Rand => m,
            _ => alpha * m,
        }
    }

    pub fn has_alignment(&self) -> bool {
        matches!(self, Mode::Srwal)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (rand|concat|sr|srwal)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelsForTest {
    Final,
    All,
}

impl ModelsForTest {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelsForTest::Final => "final",
            ModelsForTest::All => "all",
        }
    }
}

impl FromStr for ModelsForTest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "final" => Ok(ModelsForTest::Final),
            "all" => Ok(ModelsForTest::All),
            _ => Err(Error::Config(format!("unknown models_for_test `{s}` (final|all)"))),
        }
    }
}

/// Outputs of every snapshot for one probe image, in snapshot order.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTuple {
    pub sample_id: String,
    pub class_label: u32,
    pub vectors: Vec<TemplateVector>,
}

impl VectorTuple {
    pub fn alpha(&self) -> usize {
        self.vectors.len()
    }

    pub fn m(&self) -> usize {
        self.vectors.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn final_vector(&self) -> &TemplateVector {
        self.vectors.last().expect("tuples hold at least one vector")
    }
}

/// Attack-model input. `slot_index` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedVector {
    pub data: Vec<f32>,
    pub slot_index: Option<usize>,
    pub mode: Mode,
}

impl AugmentedVector {
    /// The `i`-th (1-based) width-`m` slot.
    pub fn slot(&self, i: usize, m: usize) -> &[f32] {
        &self.data[(i - 1) * m..i * m]
    }
}

/// Queries every snapshot with every probe image.
pub fn build_vector_bank(snapshots: &SnapshotSet, probe: &[ImageSample]) -> Result<Vec<VectorTuple>> {
    if probe.is_empty() {
        return Err(Error::Precondition("vector bank needs a nonempty probe set".into()));
    }
    let pixels: Vec<&Pixels> = probe.iter().map(|s| &s.pixels).collect();
    let per_model: Vec<Vec<TemplateVector>> = snapshots
        .snapshots
        .iter()
        .map(|model| model.query_batch(&pixels))
        .collect::<Result<_>>()?;
    Ok(probe
        .iter()
        .enumerate()
        .map(|(j, s)| VectorTuple {
            sample_id: s.sample_id.clone(),
            class_label: s.class_label,
            vectors: per_model.iter().map(|outs| outs[j].clone()).collect(),
        })
        .collect())
}

/// Root mean square of every entry of every vector in `bank`, or 1 when
/// that is zero or not finite.
pub fn bank_scale<'a>(bank: impl IntoIterator<Item = &'a VectorTuple>) -> f32 {
    let (mut sq, mut n) = (0.0f64, 0usize);
    for t in bank {
        for x in t.vectors.iter().flat_map(|v| v.0.iter()) {
            sq += (*x as f64).powi(2);
            n += 1;
        }
    }
    let rms = (sq / n.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        rms as f32
    } else {
        1.0
    }
}

fn draw_slot(alpha: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=alpha)
}

pub fn make_rand(tuple: &VectorTuple, rng: &mut impl Rng) -> AugmentedVector {
    let i = draw_slot(tuple.alpha(), rng);
    AugmentedVector {
        data: tuple.vectors[i - 1].0.clone(),
        slot_index: Some(i),
        mode: Mode::Rand,
    }
}

pub fn make_concat(tuple: &VectorTuple) -> AugmentedVector {
    AugmentedVector {
        data: tuple.vectors.iter().flat_map(|v| v.0.iter().copied()).collect(),
        slot_index: None,
        mode: Mode::Concat,
    }
}

/// Width `alpha * m` vector holding `vector` in slot `i` (1-based), zeros
/// elsewhere.
pub fn place_in_slot(vector: &TemplateVector, i: usize, alpha: usize, mode: Mode) -> AugmentedVector {
    let m = vector.len();
    let mut data = vec![0.0; alpha * m];
    data[(i - 1) * m..i * m].copy_from_slice(&vector.0);
    AugmentedVector {
        data,
        slot_index: Some(i),
        mode,
    }
}

pub fn make_structured_random(tuple: &VectorTuple, rng: &mut impl Rng, with_label: bool) -> AugmentedVector {
    let i = draw_slot(tuple.alpha(), rng);
    let mode = if with_label { Mode::Srwal } else { Mode::Sr };
    place_in_slot(&tuple.vectors[i - 1], i, tuple.alpha(), mode)
}

/// Training-time input for `mode`, with a fresh slot draw per call.
pub fn make_train_input(tuple: &VectorTuple, mode: Mode, rng: &mut impl Rng) -> AugmentedVector {
    match mode {
        Mode::Rand => make_rand(tuple, rng),
        Mode::Concat => make_concat(tuple),
        Mode::Sr => make_structured_random(tuple, rng, false),
        Mode::Srwal => make_structured_random(tuple, rng, true),
    }
}

/// What the attacker holds at test time.
#[derive(Clone, Copy, Debug)]
pub enum TestSource<'a> {
    /// Only the final model's template, with the snapshot count used in
    /// training.
    Final { vector: &'a TemplateVector, alpha: usize },
    Tuple(&'a VectorTuple),
}

/// Test-time input: a single vector, or several whose reconstructions are
/// averaged in image space.
#[derive(Clone, Debug, PartialEq)]
pub enum TestInput {
    Single(AugmentedVector),
    Average(Vec<AugmentedVector>),
}

impl TestInput {
    pub fn parts(&self) -> &[AugmentedVector] {
        match self {
            TestInput::Single(v) => std::slice::from_ref(v),
            TestInput::Average(vs) => vs,
        }
    }
}

pub fn make_test_input(source: TestSource<'_>, mode: Mode, models_for_test: ModelsForTest) -> Result<TestInput> {
    let (final_vector, alpha) = match source {
        TestSource::Final { vector, alpha } => (vector, alpha),
        TestSource::Tuple(t) => (t.final_vector(), t.alpha()),
    };
    if alpha == 0 {
        return Err(Error::Precondition("alpha must be >= 1".into()));
    }
    let tuple = match (models_for_test, source) {
        (ModelsForTest::All, TestSource::Tuple(t)) => Some(t),
        (ModelsForTest::All, TestSource::Final { .. }) if mode != Mode::Rand => {
            return Err(Error::Precondition(format!(
                "models_for_test=all with mode {mode} needs the full vector tuple"
            )))
        }
        _ => None,
    };
    Ok(match (mode, tuple) {
        (Mode::Rand, _) => TestInput::Single(AugmentedVector {
            data: final_vector.0.clone(),
            slot_index: Some(alpha),
            mode,
        }),
        (Mode::Concat, Some(t)) => TestInput::Single(make_concat(t)),
        (Mode::Concat, None) => {
            let mut v = place_in_slot(final_vector, alpha, alpha, mode);
            v.slot_index = None;
            TestInput::Single(v)
        }
        (Mode::Sr | Mode::Srwal, Some(t)) => TestInput::Average(
            t.vectors
                .iter()
                .enumerate()
                .map(|(i, y)| place_in_slot(y, i + 1, alpha, mode))
                .collect(),
        ),
        (Mode::Sr | Mode::Srwal, None) => TestInput::Single(place_in_slot(final_vector, alpha, alpha, mode)),
    })
}

/// Test-time input construction for an attack trained on `alpha`
/// snapshots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestPlan {
    pub mode: Mode,
    pub models_for_test: ModelsForTest,
    pub alpha: usize,
}

impl TestPlan {
    /// With `Final`, only the tuple's final vector is used, so tuples from a
    /// larger snapshot set than the attack saw are accepted.
    pub fn input_for(&self, tuple: &VectorTuple) -> Result<TestInput> {
        match self.models_for_test {
            ModelsForTest::Final => make_test_input(
                TestSource::Final {
                    vector: tuple.final_vector(),
                    alpha: self.alpha,
                },
                self.mode,
                ModelsForTest::Final,
            ),
            ModelsForTest::All => {
                if tuple.alpha() != self.alpha {
                    return Err(Error::shape(format!("alpha={}", self.alpha), format!("alpha={}", tuple.alpha())));
                }
                make_test_input(TestSource::Tuple(tuple), self.mode, ModelsForTest::All)
            }
        }
    }
}

/// Writes a bank as CSV: `sample_id,class_label,alpha,m,v0..`, with an
/// optional trailing `member` column.
pub fn write_bank_csv(bank: &[VectorTuple], members: Option<&[bool]>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let width = bank.first().map(|t| t.alpha() * t.m()).unwrap_or(0);
    let mut header = vec!["sample_id".to_string(), "class_label".into(), "alpha".into(), "m".into()];
    header.extend((0..width).map(|i| format!("v{i}")));
    if members.is_some() {
        header.push("member".into());
    }
    w.write_record(&header)?;
    for (k, t) in bank.iter().enumerate() {
        let mut rec = vec![
            t.sample_id.clone(),
            t.class_label.to_string(),
            t.alpha().to_string(),
            t.m().to_string(),
        ];
        rec.extend(t.vectors.iter().flat_map(|v| v.0.iter().map(|x| x.to_string())));
        if let Some(flags) = members {
            rec.push(flags[k].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bank_csv(path: &Path) -> Result<(Vec<VectorTuple>, Option<Vec<bool>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let has_member = r.headers()?.iter().last() == Some("member");
    let bad = |what: &str| Error::Ingest {
        path: path.to_path_buf(),
        reason: format!("bad {what}"),
    };
    let mut bank = Vec::new();
    let mut members = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let alpha: usize = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("alpha"))?;
        let m: usize = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("m"))?;
        let values: Vec<f32> = (0..alpha * m)
            .map(|i| rec.get(4 + i).and_then(|s| s.parse().ok()).ok_or_else(|| bad("vector entry")))
            .collect::<Result<_>>()?;
        bank.push(VectorTuple {
            sample_id: rec.get(0).ok_or_else(|| bad("sample_id"))?.to_string(),
            class_label: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("class_label"))?,
            vectors: values.chunks(m.max(1)).take(alpha).map(|c| TemplateVector(c.to_vec())).collect(),
        });
        if has_member {
            members.push(rec.get(4 + alpha * m).and_then(|s| s.parse().ok()).ok_or_else(|| bad("member"))?);
        }
    }
    Ok((bank, has_member.then_some(members)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand::Rng;
    use proptest::prelude::*;

    fn tuple(vectors: Vec<Vec<f32>>) -> VectorTuple {
        VectorTuple {
            sample_id: "s".into(),
            class_label: 0,
            vectors: vectors.into_iter().map(TemplateVector).collect(),
        }
    }

    #[test]
    fn concat_joins_in_order() {
        let t = tuple(vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let c = make_concat(&t);
        assert_eq!(c.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.slot_index, None);
        assert_eq!(make_concat(&tuple(vec![vec![7.0]])).data, vec![7.0]);
    }

    #[test]
    fn structured_slot_placement() {
        let t = tuple(vec![vec![1.0, 1.0], vec![7.0, 9.0], vec![3.0, 3.0]]);
        let v = place_in_slot(&t.vectors[1], 2, 3, Mode::Sr);
        assert_eq!(v.data, vec![0.0, 0.0, 7.0, 9.0, 0.0, 0.0]);
        assert_eq!(v.slot_index, Some(2));
    }

    #[test]
    fn rand_with_single_model_is_forced() {
        let t = tuple(vec![vec![0.5, 0.25]]);
        let mut rng = seeded_rng(0);
        for _ in 0..10 {
            let v = make_rand(&t, &mut rng);
            assert_eq!(v.data, vec![0.5, 0.25]);
            assert_eq!(v.slot_index, Some(1));
        }
    }

    #[test]
    fn slot_draws_are_seeded() {
        let t = tuple(vec![vec![1.0]; 5]);
        let draw = |seed| {
            let mut rng = seeded_rng(seed);
            (0..50).map(|_| make_rand(&t, &mut rng).slot_index.unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn slot_frequencies_within_three_sigma() {
        // Binomial(n=10000, p=1/5): sd = sqrt(n p (1-p)) = 40; 3 sd ~ 120 <= 150.
        let t = tuple((0..5).map(|i| vec![i as f32 + 1.0, 1.0]).collect());
        for with_label in [false, true] {
            let mut rng = seeded_rng(17);
            let mut rand_counts = [0usize; 5];
            let mut sr_counts = [0usize; 5];
            for _ in 0..10_000 {
                rand_counts[make_rand(&t, &mut rng).slot_index.unwrap() - 1] += 1;
                sr_counts[make_structured_random(&t, &mut rng, with_label).slot_index.unwrap() - 1] += 1;
            }
            for c in rand_counts.iter().chain(&sr_counts) {
                assert!((*c as i64 - 2000).abs() <= 150, "{c}");
            }
        }
    }

    #[test]
    fn test_inputs_follow_final_slot_rule() {
        let y5 = TemplateVector(vec![1.0, 1.0]);
        let src = TestSource::Final { vector: &y5, alpha: 5 };
        let TestInput::Single(v) = make_test_input(src, Mode::Srwal, ModelsForTest::Final).unwrap() else {
            panic!("expected a single input");
        };
        assert_eq!(v.data, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(v.slot_index, Some(5));

        let TestInput::Single(r) = make_test_input(src, Mode::Rand, ModelsForTest::Final).unwrap() else {
            panic!("expected a single input");
        };
        assert_eq!(r.data, y5.0);

        let t = tuple(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let TestInput::Single(c) = make_test_input(TestSource::Tuple(&t), Mode::Concat, ModelsForTest::All).unwrap() else {
            panic!("expected a single input");
        };
        assert_eq!(c, make_concat(&t));

        let avg = make_test_input(TestSource::Tuple(&t), Mode::Sr, ModelsForTest::All).unwrap();
        assert_eq!(avg.parts().len(), 2);
        assert!(make_test_input(src, Mode::Sr, ModelsForTest::All).is_err());
    }

    #[test]
    fn bank_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = vec![
            tuple(vec![vec![0.1, -2.5e-7], vec![3.0, f32::MAX]]),
            tuple(vec![vec![1.0 / 3.0, 0.0], vec![-0.0, 7.25]]),
        ];
        let path = dir.path().join("bank.csv");
        write_bank_csv(&bank, Some(&[true, false]), &path).unwrap();
        let (back, members) = read_bank_csv(&path).unwrap();
        assert_eq!(back, bank);
        assert_eq!(members, Some(vec![true, false]));
    }

    proptest! {
        #[test]
        fn concat_slots_recover_vectors(
            alpha in 1usize..6,
            m in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = seeded_rng(seed);
            let t = tuple((0..alpha).map(|_| (0..m).map(|_| rng.random_range(-5.0f32..5.0)).collect()).collect());
            let c = make_concat(&t);
            for i in 1..=alpha {
                prop_assert_eq!(c.slot(i, m), t.vectors[i - 1].as_slice());
            }
        }

        #[test]
        fn structured_zero_slots_are_exact(alpha in 1usize..6, m in 1usize..5, seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let t = tuple((0..alpha).map(|_| (0..m).map(|_| rng.random_range(0.5f32..5.0)).collect()).collect());
            let v = make_structured_random(&t, &mut rng, seed % 2 == 0);
            let i = v.slot_index.unwrap();
            let outside: f32 = (1..=alpha).filter(|&j| j != i).map(|j| v.slot(j, m).iter().map(|x| x.abs()).sum::<f32>()).sum();
            prop_assert_eq!(outside, 0.0);
            prop_assert_eq!(v.slot(i, m), t.vectors[i - 1].as_slice());
        }
    }
}
