//! Minimal layer set on top of candle: seeded initialization, named
//! parameter stores with safetensors persistence, and batch helpers.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Pixels;
use crate::error::{Error, Result};

pub type SeededRng = ChaCha8Rng;

pub const DEVICE: Device = Device::Cpu;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a purpose tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded into a splitmix64 round with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Ordered, named collection of trainable variables.
#[derive(Clone, Default)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    fn uniform(
        &mut self,
        name: String,
        shape: &[usize],
        bound: f64,
        dtype: DType,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let t = Tensor::from_vec(data, shape, &DEVICE)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push((name, var.clone()));
        Ok(var)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let value = values
                .get(name)
                .ok_or_else(|| Error::Precondition(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::shape(
                    format!("{name}{:?}", var.dims()),
                    format!("{:?}", value.dims()),
                ));
            }
            var.set(&value.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map = self.snapshot()?;
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &DEVICE)?;
        self.restore(&map)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        dtype: DType,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = params.uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, dtype, rng)?;
        let bias = params.uniform(format!("{name}.bias"), &[out_dim], bound, dtype, rng)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(xs
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Square-kernel 2D convolution, NCHW layout.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dtype: DType,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = params.uniform(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            bound,
            dtype,
            rng,
        )?;
        let bias = params.uniform(format!("{name}.bias"), &[out_ch], bound, dtype, rng)?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dims()[0];
        let ys = conv2d_im2col(xs, self.weight.as_tensor(), self.padding, self.stride)?;
        Ok(ys.broadcast_add(&self.bias.as_tensor().reshape((1, out_ch, 1, 1))?)?)
    }
}

/// Zero-padded square-kernel 2D convolution as patch extraction plus one
/// matmul. `Tensor::conv2d` backpropagates through a slow transposed
/// convolution on CPU.
pub fn conv2d_im2col(xs: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    Ok(crate::conv::conv2d(xs, weight, padding, stride)?)
}

/// Nearest-neighbour upsampling by an integer factor, via broadcasting so
/// the gradient is a plain sum.
pub fn upsample_nearest(xs: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    Ok(xs
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// 2x2 max pooling with stride 2, dropping a trailing odd row or column.
/// The gradient goes whole to each window's maximum; candle's `max_pool2d`
/// backward scales it by the window's mask average.
pub fn max_pool2x2(xs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    Ok(xs
        .narrow(2, 0, 2 * ho)?
        .narrow(3, 0, 2 * wo)?
        .contiguous()?
        .reshape((b, c, ho, 2, wo, 2))?
        .max(5)?
        .max(3)?)
}

/// Inverted dropout with a mask drawn from the caller's rng.
pub fn dropout(xs: &Tensor, rate: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(xs.clone());
    }
    let keep = 1.0 - rate;
    let mask: Vec<f32> = (0..xs.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, xs.shape(), &DEVICE)?.to_dtype(xs.dtype())?;
    Ok(xs.mul(&mask)?)
}

pub fn leaky_relu(xs: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(xs, 0.2)?)
}

/// Mean softmax cross-entropy of `logits` (B, K) against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let t = Tensor::from_slice(targets, targets.len(), &DEVICE)?;
    Ok(candle_nn::loss::cross_entropy(logits, &t)?)
}

/// Mean binary cross-entropy of logits against 0/1 targets, in the form
/// `max(l, 0) - l * y + ln(1 + exp(-|l|))` that stays finite for saturated
/// logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - logits.mul(targets)?)? + soft)?.mean_all()?)
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

/// Stacks images into an (N, C, H, W) tensor.
pub fn images_to_tensor(images: &[&Pixels], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Precondition("empty image batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::shape(
                format!("{h}x{w}x{c}"),
                format!("{}x{}x{}", img.height, img.width, img.channels),
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &DEVICE)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(batch: &Tensor) -> Result<Vec<Pixels>> {
    let (n, c, h, w) = batch.dims4()?;
    let flat: Vec<f32> = batch.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks(c * h * w)
        .take(n)
        .map(|chunk| Pixels {
            height: h,
            width: w,
            channels: c,
            data: chunk.to_vec(),
        })
        .collect())
}

/// Stacks equal-length rows into a (N, D) tensor.
pub fn rows_to_tensor(rows: &[&[f32]], dtype: DType) -> Result<Tensor> {
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::shape(width, r.len()));
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(data, (rows.len(), width), &DEVICE)?.to_dtype(dtype)?)
}

pub fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2()?)
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdamConfig {
    pub fn build(&self, vars: Vec<Var>) -> Result<Adam> {
        let inner = AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Adam { inner })
    }
}

pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        self.inner.backward_step(loss)?;
        Ok(())
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
