//! Image corpora, train/probe split regimes, and the crafted-blur transform
//! used to insert a new identity in the update scenario.

mod blur;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub use blur::{blur_sample, convolve_reflect, gaussian_blur, gaussian_blur_unclamped, gaussian_kernel};

/// Pixel buffer in channel-major (C, H, W) order, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pixels {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pixels {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_dynamic_image(&self) -> DynamicImage {
        let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if self.channels == 1 {
            let buf = self.data.iter().map(|v| to_u8(*v)).collect();
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer sized from dims"),
            )
        } else {
            let mut buf = Vec::with_capacity(self.height * self.width * 3);
            for y in 0..self.height {
                for x in 0..self.width {
                    for c in 0..3 {
                        buf.push(to_u8(self.get(c.min(self.channels - 1), y, x)));
                    }
                }
            }
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("buffer sized from dims"),
            )
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Natural,
    CraftedBlur,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub class_label: u32,
    pub pixels: Pixels,
    pub origin: Origin,
}

/// How decoded images are brought to the descriptor's size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropRule {
    /// Center crop to the target size; smaller images are resized up first.
    Center,
    /// Resize the whole image to the target size.
    Resize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub crop: CropRule,
}

impl DatasetDescriptor {
    /// Face-style crop to 128x128 RGB.
    pub fn face() -> Self {
        Self {
            height: 128,
            width: 128,
            channels: 3,
            crop: CropRule::Center,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn matches(&self, p: &Pixels) -> bool {
        p.height == self.height && p.width == self.width && p.channels == self.channels
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub samples: Vec<ImageSample>,
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn from_samples(mut samples: Vec<ImageSample>) -> Result<Self> {
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        for pair in samples.windows(2) {
            if pair[0].sample_id == pair[1].sample_id {
                return Err(Error::Precondition(format!(
                    "duplicate sample_id `{}`",
                    pair[0].sample_id
                )));
            }
        }
        let mut corpus = Self {
            samples,
            warnings: Vec::new(),
        };
        if corpus.samples.is_empty() {
            corpus.warnings.push("corpus is empty".into());
        }
        if let Some(w) = label_gap_warning(&corpus.class_labels()) {
            corpus.warnings.push(w);
        }
        Ok(corpus)
    }

    pub fn class_labels(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.class_label).collect()
    }

    pub fn by_class(&self) -> BTreeMap<u32, Vec<&ImageSample>> {
        group_by_class(&self.samples)
    }
}

fn label_gap_warning(labels: &BTreeSet<u32>) -> Option<String> {
    let max = *labels.iter().next_back()?;
    let missing: Vec<u32> = (0..=max).filter(|l| !labels.contains(l)).collect();
    (!missing.is_empty()).then(|| format!("class labels have gaps: missing {missing:?}"))
}

pub(crate) fn group_by_class(samples: &[ImageSample]) -> BTreeMap<u32, Vec<&ImageSample>> {
    let mut map: BTreeMap<u32, Vec<&ImageSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.class_label).or_default().push(s);
    }
    map
}

/// Parses a manifest: one `path,label` record per line. Blank lines and
/// `#` comments are skipped; relative paths resolve against the manifest's
/// directory.
pub fn parse_manifest(manifest_path: &Path) -> Result<Vec<(PathBuf, String, u32)>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Ingest {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, label) = line.rsplit_once(',').ok_or_else(|| Error::Ingest {
            path: manifest_path.to_path_buf(),
            reason: format!("line {}: expected `path,label`", lineno + 1),
        })?;
        let label: u32 = label.trim().parse().map_err(|_| Error::Ingest {
            path: manifest_path.to_path_buf(),
            reason: format!("line {}: bad class label `{}`", lineno + 1, label.trim()),
        })?;
        let rel = path.trim().to_string();
        records.push((base.join(&rel), rel, label));
    }
    Ok(records)
}

/// Loads every manifest entry, fitted to `descriptor`, sorted by sample id.
pub fn load_corpus(manifest_path: &Path, descriptor: &DatasetDescriptor) -> Result<Corpus> {
    let records = parse_manifest(manifest_path)?;
    let mut samples = Vec::with_capacity(records.len());
    for (path, rel, label) in records {
        if !path.exists() {
            return Err(Error::Ingest {
                path,
                reason: "file not found".into(),
            });
        }
        let img = image::open(&path).map_err(|e| Error::Ingest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        samples.push(ImageSample {
            sample_id: rel,
            class_label: label,
            pixels: fit_image(&img, descriptor),
            origin: Origin::Natural,
        });
    }
    let corpus = Corpus::from_samples(samples)?;
    for w in &corpus.warnings {
        log::warn!("{}: {w}", manifest_path.display());
    }
    Ok(corpus)
}

fn fit_image(img: &DynamicImage, d: &DatasetDescriptor) -> Pixels {
    let (tw, th) = (d.width as u32, d.height as u32);
    let fitted = match d.crop {
        CropRule::Resize => img.resize_exact(tw, th, FilterType::Triangle),
        CropRule::Center => {
            let (w, h) = (img.width(), img.height());
            let base = if w < tw || h < th {
                let scale = (tw as f64 / w as f64).max(th as f64 / h as f64);
                img.resize_exact(
                    (w as f64 * scale).ceil() as u32,
                    (h as f64 * scale).ceil() as u32,
                    FilterType::Triangle,
                )
            } else {
                img.clone()
            };
            let x0 = (base.width() - tw) / 2;
            let y0 = (base.height() - th) / 2;
            base.crop_imm(x0, y0, tw, th)
        }
    };
    let mut out = Pixels::filled(d.height, d.width, d.channels, 0.0);
    if d.channels == 1 {
        let gray = fitted.to_luma8();
        for (x, y, p) in gray.enumerate_pixels() {
            out.set(0, y as usize, x as usize, p.0[0] as f32 / 255.0);
        }
    } else {
        let rgb = fitted.to_rgb8();
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..d.channels {
                out.set(c, y as usize, x as usize, p.0[c.min(2)] as f32 / 255.0);
            }
        }
    }
    out
}

/// Writes a corpus as PNG files plus a manifest, the inverse of [`load_corpus`].
pub fn write_corpus(corpus: &[ImageSample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in corpus {
        let file = format!("{}.png", s.sample_id.replace(['/', '\\'], "_"));
        s.pixels.to_dynamic_image().save(dir.join(&file))?;
        manifest.push_str(&format!("{file},{}\n", s.class_label));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FeatureExtraction,
    Classification,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub target_train: Vec<ImageSample>,
    pub probe: Vec<ImageSample>,
    pub regime: Regime,
    /// Classes dropped because they could not be split.
    pub excluded_classes: Vec<u32>,
}

impl DatasetSplit {
    pub fn train_classes(&self) -> BTreeSet<u32> {
        self.target_train.iter().map(|s| s.class_label).collect()
    }

    pub fn probe_classes(&self) -> BTreeSet<u32> {
        self.probe.iter().map(|s| s.class_label).collect()
    }

    /// Checks the regime invariants.
    pub fn validate(&self) -> Result<()> {
        let train = self.train_classes();
        let probe = self.probe_classes();
        match self.regime {
            Regime::FeatureExtraction => {
                if let Some(c) = train.intersection(&probe).next() {
                    return Err(Error::Split(format!("class {c} is in both train and probe")));
                }
            }
            Regime::Classification => {
                if let Some(c) = probe.difference(&train).next() {
                    return Err(Error::Split(format!("probe class {c} absent from train")));
                }
                let ids: HashSet<&str> =
                    self.target_train.iter().map(|s| s.sample_id.as_str()).collect();
                if let Some(s) = self.probe.iter().find(|s| ids.contains(s.sample_id.as_str())) {
                    return Err(Error::Split(format!("sample {} is in both lists", s.sample_id)));
                }
            }
        }
        Ok(())
    }
}

/// Class-disjoint split: `probe_class_count` seeded-uniform classes feed the
/// probe set (interleaved across classes, truncated to `probe_size`); every
/// other class trains the target.
pub fn split_feature_extraction(
    corpus: &Corpus,
    probe_class_count: usize,
    probe_size: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let by_class = corpus.by_class();
    let mut classes: Vec<u32> = by_class.keys().copied().collect();
    if probe_class_count == 0 || probe_class_count >= classes.len() {
        return Err(Error::Split(format!(
            "probe_class_count {probe_class_count} must be in 1..{} so target_train is nonempty",
            classes.len()
        )));
    }
    classes.shuffle(&mut seeded_rng(seed));
    let mut chosen: Vec<u32> = classes[..probe_class_count].to_vec();
    chosen.sort_unstable();

    let available: usize = chosen.iter().map(|c| by_class[c].len()).sum();
    if probe_size > available {
        return Err(Error::Split(format!(
            "probe_size {probe_size} exceeds the {available} images in the chosen classes; \
             use probe_size <= {available} or more probe classes"
        )));
    }

    // Round-robin over classes keeps the truncated probe set class-balanced.
    let mut probe = Vec::with_capacity(probe_size);
    let mut depth = 0;
    while probe.len() < probe_size {
        for c in &chosen {
            if let Some(s) = by_class[c].get(depth) {
                if probe.len() < probe_size {
                    probe.push((*s).clone());
                }
            }
        }
        depth += 1;
    }
    probe.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let chosen: BTreeSet<u32> = chosen.into_iter().collect();
    let target_train = corpus
        .samples
        .iter()
        .filter(|s| !chosen.contains(&s.class_label))
        .cloned()
        .collect();
    let split = DatasetSplit {
        target_train,
        probe,
        regime: Regime::FeatureExtraction,
        excluded_classes: Vec::new(),
    };
    split.validate()?;
    Ok(split)
}

/// Number of items a fraction selects from `count`, rounded up. Products
/// like 0.15 * 20 land a hair above the integer in binary floating point,
/// so the ceiling absorbs that error.
pub(crate) fn ceil_fraction(fraction: f64, count: usize) -> usize {
    let raw = fraction * count as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Per-class holdout: `ceil(holdout_fraction * count)` images of every class
/// go to the probe set. Singleton classes are excluded and reported.
pub fn split_classification(
    corpus: &Corpus,
    holdout_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Split(format!(
            "holdout_fraction {holdout_fraction} must lie in (0, 1)"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut target_train = Vec::new();
    let mut probe = Vec::new();
    let mut excluded = Vec::new();
    for (class, members) in corpus.by_class() {
        if members.len() < 2 {
            log::warn!("class {class} has a single sample and is excluded from the split");
            excluded.push(class);
            continue;
        }
        let mut members: Vec<ImageSample> = members.into_iter().cloned().collect();
        members.shuffle(&mut rng);
        let n_probe = ceil_fraction(holdout_fraction, members.len()).clamp(1, members.len() - 1);
        let rest = members.split_off(n_probe);
        probe.extend(members);
        target_train.extend(rest);
    }
    probe.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    target_train.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let split = DatasetSplit {
        target_train,
        probe,
        regime: Regime::Classification,
        excluded_classes: excluded,
    };
    split.validate()?;
    Ok(split)
}

/// Splits samples per class into (first, second) parts, with
/// `ceil(fraction * count)` of each class in the second part. Classes with a
/// single sample stay entirely in the first part.
pub fn stratified_holdout(
    samples: &[ImageSample],
    fraction: f64,
    seed: u64,
) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let mut rng = seeded_rng(seed);
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (_, members) in group_by_class(samples) {
        let mut members: Vec<ImageSample> = members.into_iter().cloned().collect();
        members.shuffle(&mut rng);
        let n = if members.len() < 2 {
            0
        } else {
            ceil_fraction(fraction, members.len()).clamp(1, members.len() - 1)
        };
        let tail = members.split_off(members.len() - n);
        keep.extend(members);
        held.extend(tail);
    }
    keep.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    held.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    (keep, held)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: u32, per_class: usize) -> Corpus {
        let mut samples = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                samples.push(ImageSample {
                    sample_id: format!("c{c:02}_{i:03}"),
                    class_label: c,
                    pixels: Pixels::filled(2, 2, 1, c as f32 / classes as f32),
                    origin: Origin::Natural,
                });
            }
        }
        Corpus::from_samples(samples).unwrap()
    }

    #[test]
    fn feature_split_is_class_disjoint() {
        let corpus = toy(10, 6);
        let split = split_feature_extraction(&corpus, 4, 20, 11).unwrap();
        assert_eq!(split.probe.len(), 20);
        assert_eq!(split.probe_classes().len(), 4);
        assert!(split.train_classes().is_disjoint(&split.probe_classes()));
        assert_eq!(split.target_train.len(), 36);
    }

    #[test]
    fn face_sized_feature_split() {
        // 89 classes; 39 probe classes supply 1500 probe images.
        let corpus = toy(89, 40);
        let split = split_feature_extraction(&corpus, 39, 1500, 2).unwrap();
        assert_eq!(split.probe.len(), 1500);
        assert_eq!(split.probe_classes().len(), 39);
        assert_eq!(split.train_classes().len(), 50);
    }

    #[test]
    fn feature_split_rejects_degenerate_inputs() {
        let corpus = toy(5, 3);
        assert!(split_feature_extraction(&corpus, 5, 3, 0).is_err());
        assert!(split_feature_extraction(&corpus, 0, 3, 0).is_err());
        let err = split_feature_extraction(&corpus, 2, 7, 0).unwrap_err();
        assert!(err.to_string().contains("probe_size <= 6"), "{err}");
    }

    #[test]
    fn classification_holdout_counts() {
        let corpus = toy(3, 20);
        let split = split_classification(&corpus, 0.15, 5).unwrap();
        for c in 0..3 {
            assert_eq!(split.probe.iter().filter(|s| s.class_label == c).count(), 3);
            assert_eq!(split.target_train.iter().filter(|s| s.class_label == c).count(), 17);
        }
        let pair = split_classification(&toy(1, 2), 0.5, 5).unwrap();
        assert_eq!((pair.probe.len(), pair.target_train.len()), (1, 1));
    }

    #[test]
    fn classification_excludes_singletons() {
        let mut samples = toy(2, 4).samples;
        samples.push(ImageSample {
            sample_id: "lonely".into(),
            class_label: 9,
            pixels: Pixels::filled(2, 2, 1, 0.5),
            origin: Origin::Natural,
        });
        let corpus = Corpus::from_samples(samples).unwrap();
        let split = split_classification(&corpus, 0.25, 0).unwrap();
        assert_eq!(split.excluded_classes, vec![9]);
        assert!(!split.train_classes().contains(&9));
    }

    #[test]
    fn splits_are_seed_deterministic() {
        let corpus = toy(8, 10);
        let ids = |s: &DatasetSplit| s.probe.iter().map(|x| x.sample_id.clone()).collect::<Vec<_>>();
        let a = split_classification(&corpus, 0.3, 42).unwrap();
        let b = split_classification(&corpus, 0.3, 42).unwrap();
        assert_eq!(ids(&a), ids(&b));
        let c = split_feature_extraction(&corpus, 3, 12, 42).unwrap();
        let d = split_feature_extraction(&corpus, 3, 12, 42).unwrap();
        assert_eq!(ids(&c), ids(&d));
    }

    #[test]
    fn ceil_fraction_absorbs_rounding() {
        assert_eq!(ceil_fraction(0.15, 20), 3);
        assert_eq!(ceil_fraction(0.15, 21), 4);
        assert_eq!(ceil_fraction(0.5, 2), 1);
    }

    #[test]
    fn label_gaps_warn() {
        let mut samples = toy(1, 1).samples;
        samples[0].class_label = 2;
        let corpus = Corpus::from_samples(samples).unwrap();
        assert!(corpus.warnings.iter().any(|w| w.contains("gaps")));
    }
}
