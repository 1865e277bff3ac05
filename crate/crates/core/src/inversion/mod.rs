//! GAN inversion attack: a generator mapping (augmented) model outputs back
//! to images, a discriminator, the training loop and inference.

pub mod losses;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Pixels;
use crate::error::{Error, Result};
use crate::incorporation::{bank_scale, make_train_input, AugmentedVector, Mode, TestInput, VectorTuple};
use crate::nn::{
    derive_seed, images_to_tensor, leaky_relu, upsample_nearest, rows_to_tensor, scalar, seeded_rng, tensor_to_images,
    AdamConfig, Conv2d, Linear, Params, SeededRng,
};
use crate::target_models::TargetModel;

pub use losses::{
    alignment_loss, discriminator_loss, generator_adversarial_loss, l1_loss, perceptual_loss, ssim,
    ssim_loss, total_generator_loss, FrozenFeatures, LossBundle, LossTerms,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub input_dim: usize,
    /// (channels, height, width) of reconstructions.
    pub image: (usize, usize, usize),
    /// Width of the first fully connected layer, the alignment tap.
    pub hidden: usize,
    /// Channels of the low-resolution tensor produced by the projection.
    pub proj_channels: usize,
    /// Output channels of each upsample-and-convolve block.
    pub block_channels: Vec<usize>,
    /// Slot count for the alignment head; present only for `Srwal`.
    pub alignment_slots: Option<usize>,
    /// Inputs are divided by this scalar before the first layer.
    #[serde(default = "unit_scale")]
    pub input_scale: f32,
}

fn unit_scale() -> f32 {
    1.0
}

impl GeneratorArch {
    fn base_size(&self) -> Result<(usize, usize)> {
        let div = 2usize.pow(self.block_channels.len() as u32);
        let (_, h, w) = self.image;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by 2^{} upsampling blocks",
                self.block_channels.len()
            )));
        }
        Ok((h / div, w / div))
    }
}

/// Vector-to-image decoder: input -> FC (z) -> FC projection to a
/// low-resolution tensor -> upsample/conv blocks -> sigmoid image.
#[derive(Clone)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub params: Params,
    fc_in: Linear,
    fc_proj: Linear,
    blocks: Vec<Conv2d>,
    out_conv: Conv2d,
    alignment_head: Option<Linear>,
    dtype: DType,
}

pub struct GeneratorOutput {
    pub images: Tensor,
    pub slot_logits: Option<Tensor>,
}

impl Generator {
    pub fn build(arch: &GeneratorArch, dtype: DType, rng: &mut SeededRng) -> Result<Self> {
        let (bh, bw) = arch.base_size()?;
        let mut params = Params::new();
        let fc_in = Linear::new(&mut params, "g.fc_in", arch.input_dim, arch.hidden, dtype, rng)?;
        let fc_proj = Linear::new(
            &mut params,
            "g.fc_proj",
            arch.hidden,
            arch.proj_channels * bh * bw,
            dtype,
            rng,
        )?;
        let mut blocks = Vec::new();
        let mut ch = arch.proj_channels;
        for (i, &out) in arch.block_channels.iter().enumerate() {
            blocks.push(Conv2d::new(&mut params, &format!("g.block{i}"), ch, out, 3, 1, dtype, rng)?);
            ch = out;
        }
        let out_conv = Conv2d::new(&mut params, "g.out", ch, arch.image.0, 3, 1, dtype, rng)?;
        let alignment_head = arch
            .alignment_slots
            .map(|slots| Linear::new(&mut params, "g.alignment", arch.hidden, slots, dtype, rng))
            .transpose()?;
        Ok(Self {
            arch: arch.clone(),
            params,
            fc_in,
            fc_proj,
            blocks,
            out_conv,
            alignment_head,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn forward(&self, inputs: &Tensor) -> Result<GeneratorOutput> {
        let (b, width) = inputs.dims2()?;
        if width != self.arch.input_dim {
            return Err(Error::shape(self.arch.input_dim, width));
        }
        let (bh, bw) = self.arch.base_size()?;
        let x = inputs.to_dtype(self.dtype)?.affine(1.0 / self.arch.input_scale as f64, 0.0)?;
        let z = self.fc_in.forward(&x)?.relu()?;
        let slot_logits = self.alignment_head.as_ref().map(|h| h.forward(&z)).transpose()?;
        let mut h = self
            .fc_proj
            .forward(&z)?
            .relu()?
            .reshape((b, self.arch.proj_channels, bh, bw))?;
        for block in &self.blocks {
            h = block.forward(&upsample_nearest(&h, 2)?)?.relu()?;
        }
        let images = candle_nn::ops::sigmoid(&self.out_conv.forward(&h)?)?;
        Ok(GeneratorOutput { images, slot_logits })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.params.save(&dir.join("generator.safetensors"))?;
        let text = toml::to_string(&self.arch).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("generator.toml"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("generator.toml"))?;
        let arch: GeneratorArch = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let g = Generator::build(&arch, DType::F32, &mut seeded_rng(0))?;
        g.params.load(&dir.join("generator.safetensors"))?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub image: (usize, usize, usize),
    /// Channels of each stride-2 conv layer.
    pub channels: Vec<usize>,
}

#[derive(Clone)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub params: Params,
    convs: Vec<Conv2d>,
    fc: Linear,
    dtype: DType,
}

impl Discriminator {
    pub fn build(arch: &DiscriminatorArch, dtype: DType, rng: &mut SeededRng) -> Result<Self> {
        let mut params = Params::new();
        let (mut ch, mut h, mut w) = arch.image;
        let mut convs = Vec::new();
        for (i, &out) in arch.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut params, &format!("d.conv{i}"), ch, out, 3, 2, dtype, rng)?);
            ch = out;
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let fc = Linear::new(&mut params, "d.fc", ch * h * w, 1, dtype, rng)?;
        Ok(Self {
            arch: arch.clone(),
            params,
            convs,
            fc,
            dtype,
        })
    }

    /// Activations after the first `depth` conv layers.
    pub fn features(&self, images: &Tensor, depth: usize) -> Result<Tensor> {
        let mut h = images.to_dtype(self.dtype)?;
        for conv in self.convs.iter().take(depth) {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        Ok(h)
    }

    /// Probability that each image is real, shape (B,).
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let h = self.features(images, self.convs.len())?.flatten_from(1)?;
        Ok(candle_nn::ops::sigmoid(&self.fc.forward(&h)?)?.squeeze(1)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.params.save(&dir.join("discriminator.safetensors"))?;
        let text = toml::to_string(&self.arch).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("discriminator.toml"), text)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualSource {
    /// Early conv blocks of a separately trained frozen classifier.
    FeatureNet,
    /// Intermediate discriminator activations.
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub generator_optimizer: AdamConfig,
    pub discriminator_optimizer: AdamConfig,
    pub hidden: usize,
    pub proj_channels: usize,
    pub block_channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub perceptual: PerceptualSource,
    /// Conv blocks of the feature source used by the perceptual loss.
    pub perceptual_depth: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        let adam = AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        };
        Self {
            epochs: 60,
            batch_size: 16,
            generator_optimizer: adam.clone(),
            discriminator_optimizer: adam,
            hidden: 256,
            proj_channels: 64,
            block_channels: vec![32, 24, 16, 8],
            disc_channels: vec![8, 16, 32],
            perceptual: PerceptualSource::FeatureNet,
            perceptual_depth: 2,
            seed: 0,
        }
    }
}

/// Per-epoch mean losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub alignment: Option<f64>,
    pub total: f64,
    pub discriminator: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLosses>,
}

impl TrainingLog {
    /// CSV with columns `epoch,l1,ssim,perceptual,adversarial,alignment,total`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l1,ssim,perceptual,adversarial,alignment,total\n");
        for e in &self.epochs {
            let align = e.alignment.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.l1, e.ssim, e.perceptual, e.adversarial, align, e.total
            ));
        }
        s
    }
}

pub struct TrainedInverter {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub mode: Mode,
    pub alpha: usize,
    pub m: usize,
    pub log: TrainingLog,
}

impl TrainedInverter {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.generator.save(dir)?;
        self.discriminator.save(dir)?;
        fs::write(dir.join("training_log.csv"), self.log.to_csv())?;
        Ok(())
    }
}

/// Either frozen feature-net activations or discriminator activations.
pub enum PerceptualFeatures<'a> {
    Frozen(&'a FrozenFeatures),
    Discriminator { disc: &'a Discriminator, depth: usize },
}

impl PerceptualFeatures<'_> {
    fn loss(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        match self {
            PerceptualFeatures::Frozen(f) => perceptual_loss(f, x, x_hat),
            PerceptualFeatures::Discriminator { disc, depth } => {
                let fx = disc.features(x, *depth)?.detach();
                let fy = disc.features(x_hat, *depth)?;
                Ok((fy - fx)?.sqr()?.mean_all()?)
            }
        }
    }
}

/// Frozen perceptual features from the first `depth` conv blocks of `model`.
pub fn frozen_features_from(model: &TargetModel, depth: usize) -> Result<FrozenFeatures> {
    let values = model.parameter_values()?;
    let mut layers = Vec::new();
    for i in 0..depth.min(model.architecture().conv_channels.len()) {
        let w = values
            .get(&format!("conv{i}.weight"))
            .ok_or_else(|| Error::Precondition(format!("feature net lacks conv{i}")))?;
        let b = &values[&format!("conv{i}.bias")];
        layers.push((w.clone(), b.clone()));
    }
    Ok(FrozenFeatures::new(layers))
}

/// Every generator loss term for one batch. `slots` are 0-based slot targets
/// for the alignment head, required when the generator has one.
pub fn generator_terms(
    generator: &Generator,
    discriminator: &Discriminator,
    perceptual: &PerceptualFeatures<'_>,
    inputs: &Tensor,
    targets: &Tensor,
    slots: Option<&[u32]>,
) -> Result<LossTerms> {
    let out = generator.forward(inputs)?;
    let alignment = match (&out.slot_logits, slots) {
        (Some(logits), Some(s)) => Some(alignment_loss(logits, s)?),
        (Some(_), None) => return Err(Error::Precondition("alignment head needs slot targets".into())),
        _ => None,
    };
    Ok(LossTerms {
        l1: l1_loss(targets, &out.images)?,
        ssim_loss: ssim_loss(targets, &out.images)?,
        perceptual: perceptual.loss(targets, &out.images)?,
        adversarial: generator_adversarial_loss(&discriminator.forward(&out.images)?)?,
        alignment,
    })
}

pub fn generator_arch(
    config: &InversionConfig,
    mode: Mode,
    alpha: usize,
    m: usize,
    image: (usize, usize, usize),
    input_scale: f32,
) -> GeneratorArch {
    GeneratorArch {
        input_dim: mode.input_dim(alpha, m),
        image,
        hidden: config.hidden,
        proj_channels: config.proj_channels,
        block_channels: config.block_channels.clone(),
        alignment_slots: mode.has_alignment().then_some(alpha),
        input_scale,
    }
}

fn batch_inputs(vectors: &[AugmentedVector], dtype: DType) -> Result<Tensor> {
    let rows: Vec<&[f32]> = vectors.iter().map(|v| v.data.as_slice()).collect();
    rows_to_tensor(&rows, dtype)
}

/// Trains a generator on (vector tuple, image) pairs. `images` maps sample
/// ids to the probe images behind the bank.
pub fn train_inversion(
    bank: &[VectorTuple],
    images: &HashMap<String, &Pixels>,
    mode: Mode,
    config: &InversionConfig,
    feature_net: Option<&FrozenFeatures>,
) -> Result<TrainedInverter> {
    let first = bank
        .first()
        .ok_or_else(|| Error::Precondition("empty vector bank".into()))?;
    let (alpha, m) = (first.alpha(), first.m());
    if let Some(t) = bank.iter().find(|t| t.alpha() != alpha || t.vectors.iter().any(|v| v.len() != m)) {
        return Err(Error::shape(format!("alpha={alpha}, m={m}"), format!("tuple {}", t.sample_id)));
    }
    let pixels: Vec<&Pixels> = bank
        .iter()
        .map(|t| {
            images
                .get(&t.sample_id)
                .copied()
                .ok_or_else(|| Error::Precondition(format!("no image for sample {}", t.sample_id)))
        })
        .collect::<Result<_>>()?;
    let image_shape = (pixels[0].channels, pixels[0].height, pixels[0].width);
    let all_images = images_to_tensor(&pixels, DType::F32)?;

    let mut init = seeded_rng(derive_seed(config.seed, "inversion-init"));
    let generator = Generator::build(&generator_arch(config, mode, alpha, m, image_shape, bank_scale(bank)), DType::F32, &mut init)?;
    let discriminator = Discriminator::build(
        &DiscriminatorArch {
            image: image_shape,
            channels: config.disc_channels.clone(),
        },
        DType::F32,
        &mut init,
    )?;
    let perceptual = match (config.perceptual, feature_net) {
        (PerceptualSource::FeatureNet, Some(f)) => PerceptualFeatures::Frozen(f),
        (PerceptualSource::FeatureNet, None) => {
            return Err(Error::Precondition("perceptual feature net not provided".into()))
        }
        (PerceptualSource::Discriminator, _) => PerceptualFeatures::Discriminator {
            disc: &discriminator,
            depth: config.perceptual_depth,
        },
    };

    let mut g_opt = config.generator_optimizer.build(generator.params.vars())?;
    let mut d_opt = config.discriminator_optimizer.build(discriminator.params.vars())?;
    let mut rng = seeded_rng(derive_seed(config.seed, "inversion-train"));
    let mut order: Vec<u32> = (0..bank.len() as u32).collect();
    let mut log = TrainingLog::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 7];
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size.max(1)) {
            let vectors: Vec<AugmentedVector> = batch
                .iter()
                .map(|&i| make_train_input(&bank[i as usize], mode, &mut rng))
                .collect();
            let inputs = batch_inputs(&vectors, DType::F32)?;
            let idx = Tensor::from_slice(batch, batch.len(), all_images.device())?;
            let targets = all_images.index_select(&idx, 0)?;

            let fake = generator.forward(&inputs)?.images.detach();
            let d_loss = discriminator_loss(&discriminator.forward(&targets)?, &discriminator.forward(&fake)?)?;
            let d_value = scalar(&d_loss)?;
            d_opt.backward_step(&d_loss)?;

            let slots: Option<Vec<u32>> = mode
                .has_alignment()
                .then(|| vectors.iter().map(|v| v.slot_index.expect("structured input") as u32 - 1).collect());
            let terms = generator_terms(&generator, &discriminator, &perceptual, &inputs, &targets, slots.as_deref())?;
            let (total, bundle) = total_generator_loss(&terms, mode)?;
            if !bundle.total.is_finite() || !d_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("generator losses {bundle:?}, discriminator loss {d_value}"),
                });
            }
            g_opt.backward_step(&total)?;

            for (s, v) in sums.iter_mut().zip([
                bundle.l1,
                bundle.ssim_loss,
                bundle.perceptual,
                bundle.adversarial,
                bundle.alignment.unwrap_or(0.0),
                bundle.total,
                d_value,
            ]) {
                *s += v;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        log.epochs.push(EpochLosses {
            epoch,
            l1: sums[0] / n,
            ssim: sums[1] / n,
            perceptual: sums[2] / n,
            adversarial: sums[3] / n,
            alignment: mode.has_alignment().then_some(sums[4] / n),
            total: sums[5] / n,
            discriminator: sums[6] / n,
        });
        log::debug!("inversion epoch {epoch}: {:?}", log.epochs.last());
    }

    Ok(TrainedInverter {
        generator,
        discriminator,
        mode,
        alpha,
        m,
        log,
    })
}

/// Reconstructs one image; multi-part inputs are averaged in image space.
pub fn invert(generator: &Generator, input: &TestInput) -> Result<Pixels> {
    Ok(invert_batch(generator, std::slice::from_ref(input))?
        .pop()
        .expect("one image per input"))
}

pub fn invert_batch(generator: &Generator, inputs: &[TestInput]) -> Result<Vec<Pixels>> {
    let mut flat = Vec::new();
    let mut counts = Vec::with_capacity(inputs.len());
    for input in inputs {
        counts.push(input.parts().len());
        flat.extend(input.parts().iter().cloned());
    }
    let mut images = Vec::with_capacity(flat.len());
    for chunk in flat.chunks(256) {
        let xs = batch_inputs(chunk, generator.dtype())?;
        images.extend(tensor_to_images(&generator.forward(&xs)?.images)?);
    }
    let mut out = Vec::with_capacity(inputs.len());
    let mut it = images.into_iter();
    for n in counts {
        let parts: Vec<Pixels> = it.by_ref().take(n).collect();
        let mut avg = parts[0].clone();
        if n > 1 {
            for (i, v) in avg.data.iter_mut().enumerate() {
                *v = parts.iter().map(|p| p.data[i]).sum::<f32>() / n as f32;
            }
        }
        out.push(avg);
    }
    Ok(out)
}

/// Slot predictions of the alignment head (0-based) for each input.
pub fn predict_slots(generator: &Generator, inputs: &[AugmentedVector]) -> Result<Vec<usize>> {
    let xs = batch_inputs(inputs, generator.dtype())?;
    let logits = generator
        .forward(&xs)?
        .slot_logits
        .ok_or_else(|| Error::Precondition("generator has no alignment head".into()))?;
    let rows: Vec<Vec<f32>> = logits.to_dtype(DType::F32)?.to_vec2()?;
    Ok(rows.iter().map(|r| argmax(r)).collect())
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incorporation::{make_test_input, ModelsForTest, TestSource};
    use crate::target_models::TemplateVector;
    use rand::Rng;

    fn small_config() -> InversionConfig {
        InversionConfig {
            epochs: 2,
            batch_size: 4,
            hidden: 16,
            proj_channels: 8,
            block_channels: vec![8, 4],
            disc_channels: vec![4, 8],
            perceptual: PerceptualSource::Discriminator,
            perceptual_depth: 1,
            ..Default::default()
        }
    }

    fn toy_bank(alpha: usize, m: usize, n: usize) -> (Vec<VectorTuple>, Vec<(String, Pixels)>) {
        let mut rng = seeded_rng(5);
        let mut bank = Vec::new();
        let mut imgs = Vec::new();
        for j in 0..n {
            let id = format!("s{j}");
            bank.push(VectorTuple {
                sample_id: id.clone(),
                class_label: (j % 3) as u32,
                vectors: (0..alpha)
                    .map(|_| TemplateVector((0..m).map(|_| rng.random_range(-1.0..1.0)).collect()))
                    .collect(),
            });
            let data = (0..64).map(|_| rng.random()).collect();
            imgs.push((id, Pixels { height: 8, width: 8, channels: 1, data }));
        }
        (bank, imgs)
    }

    #[test]
    fn widths_follow_mode() {
        let (bank, imgs) = toy_bank(5, 3, 6);
        let map: HashMap<String, &Pixels> = imgs.iter().map(|(k, v)| (k.clone(), v)).collect();
        let cfg = small_config();
        let concat = train_inversion(&bank, &map, Mode::Concat, &cfg, None).unwrap();
        assert_eq!(concat.generator.arch.input_dim, 15);
        assert!(concat.generator.arch.alignment_slots.is_none());
        let rand = train_inversion(&bank, &map, Mode::Rand, &cfg, None).unwrap();
        assert_eq!(rand.generator.arch.input_dim, 3);
        let srwal = train_inversion(&bank, &map, Mode::Srwal, &cfg, None).unwrap();
        assert_eq!(srwal.generator.arch.alignment_slots, Some(5));
        assert!(srwal.log.epochs.iter().all(|e| e.alignment.is_some()));
    }

    #[test]
    fn training_is_reproducible() {
        let (bank, imgs) = toy_bank(3, 2, 8);
        let map: HashMap<String, &Pixels> = imgs.iter().map(|(k, v)| (k.clone(), v)).collect();
        let a = train_inversion(&bank, &map, Mode::Srwal, &small_config(), None).unwrap();
        let b = train_inversion(&bank, &map, Mode::Srwal, &small_config(), None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.to_csv(), b.log.to_csv());
    }

    #[test]
    fn invert_is_deterministic_and_bounded() {
        let (bank, imgs) = toy_bank(2, 2, 4);
        let map: HashMap<String, &Pixels> = imgs.iter().map(|(k, v)| (k.clone(), v)).collect();
        let trained = train_inversion(&bank, &map, Mode::Sr, &small_config(), None).unwrap();
        let input = make_test_input(TestSource::Tuple(&bank[0]), Mode::Sr, ModelsForTest::Final).unwrap();
        let a = invert(&trained.generator, &input).unwrap();
        let b = invert(&trained.generator, &input).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width, a.channels), (8, 8, 1));
        assert!(a.in_unit_range());
        let all = make_test_input(TestSource::Tuple(&bank[0]), Mode::Sr, ModelsForTest::All).unwrap();
        assert!(invert(&trained.generator, &all).unwrap().in_unit_range());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let g = Generator::build(
            &GeneratorArch {
                input_dim: 4,
                image: (1, 8, 8),
                hidden: 4,
                proj_channels: 2,
                block_channels: vec![2],
                alignment_slots: None,
                input_scale: 1.0,
            },
            DType::F32,
            &mut seeded_rng(0),
        )
        .unwrap();
        let bad = TestInput::Single(AugmentedVector {
            data: vec![0.0; 3],
            slot_index: None,
            mode: Mode::Rand,
        });
        assert!(matches!(invert(&g, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (bank, imgs) = toy_bank(2, 2, 4);
        let map: HashMap<String, &Pixels> = imgs.iter().map(|(k, v)| (k.clone(), v)).collect();
        let trained = train_inversion(&bank, &map, Mode::Concat, &small_config(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        trained.save(dir.path()).unwrap();
        let back = Generator::load(dir.path()).unwrap();
        let input = make_test_input(TestSource::Tuple(&bank[1]), Mode::Concat, ModelsForTest::All).unwrap();
        assert_eq!(invert(&trained.generator, &input).unwrap(), invert(&back, &input).unwrap());
    }
}
