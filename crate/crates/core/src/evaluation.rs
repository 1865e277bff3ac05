//! Attack metrics: FAR-calibrated Type1, Rank-1 with self-exclusion,
//! classifier inversion accuracy and membership-inference accuracy.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::Pixels;
use crate::error::{Error, Result};
use crate::incorporation::{TestInput, TestPlan, VectorTuple};
use crate::inversion::{argmax, invert_batch, Generator};
use crate::membership::{record_score, MiAttacker, MiDataset, DECISION_THRESHOLD};
use crate::nn::seeded_rng;
use crate::target_models::{ModelKind, SnapshotSet, TargetModel, TemplateVector};

pub const DEFAULT_FAR: f64 = 0.01;
pub const MAX_IMPOSTOR_PAIRS: usize = 100_000;

/// Maps attack inputs to images.
pub trait Reconstructor {
    fn reconstruct(&self, inputs: &[TestInput]) -> Result<Vec<Pixels>>;
}

impl Reconstructor for Generator {
    fn reconstruct(&self, inputs: &[TestInput]) -> Result<Vec<Pixels>> {
        invert_batch(self, inputs)
    }
}

/// Maps images to model outputs.
pub trait Embedder {
    fn embed(&self, images: &[&Pixels]) -> Result<Vec<TemplateVector>>;
}

impl Embedder for TargetModel {
    fn embed(&self, images: &[&Pixels]) -> Result<Vec<TemplateVector>> {
        self.query_batch(images)
    }
}

pub fn l2_distance(a: &TemplateVector, b: &TemplateVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub t: f64,
    pub far_target: f64,
    pub calibration_size: usize,
    /// Fraction of calibration distances accepted at `t`.
    pub empirical_far: f64,
}

/// Largest observed-distance threshold whose acceptance rate `d <= t` on
/// the impostor distances stays at or below `far_target`.
pub fn compute_far_threshold(impostor_distances: &[f64], far_target: f64) -> Result<Threshold> {
    if impostor_distances.is_empty() {
        return Err(Error::Precondition("no impostor distances to calibrate on".into()));
    }
    if impostor_distances.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Precondition("impostor distances must be finite and >= 0".into()));
    }
    let n = impostor_distances.len();
    if n < 100 {
        log::warn!("calibrating a FAR threshold on only {n} impostor distances");
    }
    let mut s = impostor_distances.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let accepted = |t: f64| s.partition_point(|d| *d <= t);
    let allowed = ((far_target * n as f64) + 1e-9).floor().max(0.0) as usize;
    let mut k = allowed.min(n);
    while k >= 1 && accepted(s[k - 1]) > allowed {
        k -= 1;
    }
    let t = if k >= 1 { s[k - 1] } else { s[0] / 2.0 };
    let count = accepted(t);
    if count > allowed {
        return Err(Error::Precondition(format!(
            "{count} impostor distances are 0; FAR {far_target} is unreachable"
        )));
    }
    Ok(Threshold {
        t,
        far_target,
        calibration_size: n,
        empirical_far: count as f64 / n as f64,
    })
}

/// Distances of cross-class template pairs, subsampled with `seed` to at
/// most `max_pairs`.
pub fn impostor_distances(templates: &[(u32, TemplateVector)], max_pairs: usize, seed: u64) -> Result<Vec<f64>> {
    let mut pairs = Vec::new();
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            if templates[i].0 != templates[j].0 {
                pairs.push((i, j));
            }
        }
    }
    if pairs.len() > max_pairs {
        let mut rng = seeded_rng(seed);
        let mut chosen = sample(&mut rng, pairs.len(), max_pairs).into_vec();
        chosen.sort_unstable();
        pairs = chosen.into_iter().map(|k| pairs[k]).collect();
    }
    pairs
        .into_iter()
        .map(|(i, j)| l2_distance(&templates[i].1, &templates[j].1))
        .collect()
}

/// Provenance attached to every report row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalContext {
    pub scenario: String,
    pub mode: String,
    pub models_for_test: String,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalContext {
    pub fn new(scenario: &str, plan: &TestPlan, seed: u64, config_hash: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            mode: plan.mode.as_str().to_string(),
            models_for_test: plan.models_for_test.as_str().to_string(),
            seed,
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub tp: usize,
    pub trials: usize,
    /// Probes left out of the denominator (singleton classes for Rank-1).
    pub skipped: usize,
    pub scenario: String,
    pub mode: String,
    pub models_for_test: String,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(metric: &str, tp: usize, trials: usize, skipped: usize, ctx: &EvalContext) -> Self {
        Self {
            metric: metric.to_string(),
            value: if trials == 0 { 0.0 } else { tp as f64 / trials as f64 },
            tp,
            trials,
            skipped,
            scenario: ctx.scenario.clone(),
            mode: ctx.mode.clone(),
            models_for_test: ctx.models_for_test.clone(),
            seed: ctx.seed,
            config_hash: ctx.config_hash.clone(),
        }
    }
}

pub fn write_reports_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Plain-text table of reports.
pub fn write_reports_text(reports: &[EvalReport], out: &mut impl Write) -> Result<()> {
    writeln!(
        out,
        "{:<10} {:<8} {:<6} {:<18} {:>8} {:>6} {:>6} {:>6} {:>6}",
        "scenario", "mode", "test", "metric", "value", "tp", "trials", "skip", "seed"
    )?;
    for r in reports {
        writeln!(
            out,
            "{:<10} {:<8} {:<6} {:<18} {:>8.4} {:>6} {:>6} {:>6} {:>6}",
            r.scenario, r.mode, r.models_for_test, r.metric, r.value, r.tp, r.trials, r.skipped, r.seed
        )?;
    }
    Ok(())
}

fn reembed(
    recon: &impl Reconstructor,
    embedder: &impl Embedder,
    probes: &[VectorTuple],
    plan: &TestPlan,
) -> Result<Vec<TemplateVector>> {
    let inputs: Vec<TestInput> = probes.iter().map(|t| plan.input_for(t)).collect::<Result<_>>()?;
    let images = recon.reconstruct(&inputs)?;
    let refs: Vec<&Pixels> = images.iter().collect();
    embedder.embed(&refs)
}

/// Number of distances within `t`.
pub fn type1_count(distances: &[f64], t: f64) -> usize {
    distances.iter().filter(|d| **d <= t).count()
}

/// Fraction of probes whose reconstruction re-embeds within `t` of the
/// probe's final-model template.
pub fn type1_accuracy(
    recon: &impl Reconstructor,
    embedder: &impl Embedder,
    probes: &[VectorTuple],
    threshold: &Threshold,
    plan: &TestPlan,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let embedded = reembed(recon, embedder, probes, plan)?;
    let distances: Vec<f64> = probes
        .iter()
        .zip(&embedded)
        .map(|(p, e)| l2_distance(p.final_vector(), e))
        .collect::<Result<_>>()?;
    Ok(EvalReport::new(
        "type1",
        type1_count(&distances, threshold.t),
        probes.len(),
        0,
        ctx,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub sample_id: String,
    pub class_label: u32,
    pub template: TemplateVector,
}

impl GalleryEntry {
    pub fn from_tuple(t: &VectorTuple) -> Self {
        Self {
            sample_id: t.sample_id.clone(),
            class_label: t.class_label,
            template: t.final_vector().clone(),
        }
    }
}

/// (true positives, trials, skipped) of nearest-neighbour matching:
/// `queries[i]` is matched against the gallery excluding entry `i`.
pub fn rank1_counts(queries: &[TemplateVector], gallery: &[GalleryEntry]) -> Result<(usize, usize, usize)> {
    if queries.len() != gallery.len() {
        return Err(Error::shape(gallery.len(), queries.len()));
    }
    let mut class_sizes = std::collections::HashMap::new();
    for g in gallery {
        *class_sizes.entry(g.class_label).or_insert(0usize) += 1;
    }
    let (mut tp, mut trials, mut skipped) = (0, 0, 0);
    for (i, q) in queries.iter().enumerate() {
        let own = &gallery[i];
        if class_sizes[&own.class_label] < 2 {
            skipped += 1;
            continue;
        }
        let mut best: Option<(f64, &GalleryEntry)> = None;
        for g in gallery.iter().filter(|g| g.sample_id != own.sample_id) {
            let d = l2_distance(q, &g.template)?;
            let better = match best {
                None => true,
                Some((bd, bg)) => match d.partial_cmp(&bd).unwrap_or(Ordering::Greater) {
                    Ordering::Less => true,
                    Ordering::Equal => g.sample_id < bg.sample_id,
                    Ordering::Greater => false,
                },
            };
            if better {
                best = Some((d, g));
            }
        }
        trials += 1;
        if best.is_some_and(|(_, g)| g.class_label == own.class_label) {
            tp += 1;
        }
    }
    if trials == 0 {
        return Err(Error::Precondition("every gallery class is a singleton".into()));
    }
    Ok((tp, trials, skipped))
}

/// Reconstructs every gallery probe and checks whether its nearest other
/// gallery template shares its class.
pub fn rank1_accuracy(
    recon: &impl Reconstructor,
    embedder: &impl Embedder,
    gallery: &[VectorTuple],
    plan: &TestPlan,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let embedded = reembed(recon, embedder, gallery, plan)?;
    let entries: Vec<GalleryEntry> = gallery.iter().map(GalleryEntry::from_tuple).collect();
    let (tp, trials, skipped) = rank1_counts(&embedded, &entries)?;
    Ok(EvalReport::new("rank1", tp, trials, skipped, ctx))
}

/// Fraction of reconstructions that the classifier labels with the probe's
/// class. `class_labels[i]` is the class of output index `i`.
pub fn classifier_inversion_accuracy(
    recon: &impl Reconstructor,
    classifier: &impl Embedder,
    class_labels: &[u32],
    probes: &[VectorTuple],
    plan: &TestPlan,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let predictions = reembed(recon, classifier, probes, plan)?;
    let mut tp = 0;
    for (p, y) in probes.iter().zip(&predictions) {
        if y.len() != class_labels.len() {
            return Err(Error::shape(class_labels.len(), y.len()));
        }
        if class_labels[argmax(y.as_slice())] == p.class_label {
            tp += 1;
        }
    }
    Ok(EvalReport::new("classifier_acc", tp, probes.len(), 0, ctx))
}

/// `classifier_inversion_accuracy` for a trained classifier.
pub fn classifier_accuracy_for(
    recon: &impl Reconstructor,
    classifier: &TargetModel,
    probes: &[VectorTuple],
    plan: &TestPlan,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    if classifier.kind != ModelKind::Classifier {
        return Err(Error::Precondition("classifier accuracy needs a classifier".into()));
    }
    classifier_inversion_accuracy(recon, classifier, &classifier.class_labels, probes, plan, ctx)
}

/// Fraction of records whose membership decision at 0.5 matches the label.
pub fn mi_accuracy(
    attacker: &MiAttacker,
    data: &MiDataset,
    plan: &TestPlan,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let members = data.records.iter().filter(|r| r.member).count();
    if members == 0 || members == data.records.len() {
        return Err(Error::Precondition("membership evaluation needs both labels".into()));
    }
    let mut tp = 0;
    for r in &data.records {
        if (record_score(attacker, &r.tuple, plan)? >= DECISION_THRESHOLD) == r.member {
            tp += 1;
        }
    }
    Ok(EvalReport::new("mi_acc", tp, data.records.len(), 0, ctx))
}

/// Label of a snapshot subset, e.g. `stages=1,2`.
pub fn subset_label(indices: &[usize]) -> String {
    let parts: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
    format!("stages={}", parts.join(","))
}

/// Runs `attack` once per snapshot subset (0-based stage indices) and tags
/// its reports with the subset. `attack` retrains on the subset and
/// evaluates against the full set's final model.
pub fn snapshot_ablation(
    set: &SnapshotSet,
    subsets: &[Vec<usize>],
    mut attack: impl FnMut(&[usize]) -> Result<Vec<EvalReport>>,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for indices in subsets {
        set.subset(indices)?;
        let label = subset_label(indices);
        for mut report in attack(indices)? {
            report.scenario = format!("{} [{label}]", report.scenario);
            out.push(report);
        }
    }
    Ok(out)
}
