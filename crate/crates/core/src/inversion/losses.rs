//! GAN objectives, reconstruction losses and the slot alignment loss.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::incorporation::Mode;
use crate::nn::{conv2d_im2col, cross_entropy, max_pool2x2, scalar, DEVICE};

/// Discriminator outputs are clamped to `[EPS, 1 - EPS]` before any log.
pub const EPS: f64 = 1e-7;

fn clamp_prob(d: &Tensor) -> Result<Tensor> {
    Ok(d.clamp(EPS, 1.0 - EPS)?)
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let real = clamp_prob(d_real)?.log()?.mean_all()?;
    let fake = clamp_prob(d_fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// `-mean(log d_fake)`.
pub fn generator_adversarial_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok(clamp_prob(d_fake)?.log()?.mean_all()?.neg()?)
}

pub fn l1_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    check_same(x, x_hat)?;
    Ok((x - x_hat)?.abs()?.mean_all()?)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// (n - size + 1, n) matrix whose rows slide the 1D window over a length-n
/// axis. Left and right products apply the separable 2D window.
fn band_matrix(taps: &[f64], n: usize, dtype: DType) -> Result<Tensor> {
    let out = n + 1 - taps.len();
    let mut m = vec![0.0f64; out * n];
    for r in 0..out {
        m[r * n + r..r * n + r + taps.len()].copy_from_slice(taps);
    }
    Ok(Tensor::from_vec(m, (out, n), &DEVICE)?.to_dtype(dtype)?)
}

/// Mean SSIM over all channels and valid window positions. Gaussian window
/// 11x11 with sigma 1.5 (shrunk to the largest odd size that fits smaller
/// images), constants for a unit dynamic range.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_same(x, y)?;
    let (b, c, h, w) = x.dims4()?;
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let taps = gaussian_taps(size);
    let rows = band_matrix(&taps, h, x.dtype())?.unsqueeze(0)?;
    let cols = band_matrix(&taps, w, x.dtype())?.t()?.unsqueeze(0)?;
    let x = x.reshape((b * c, h, w))?;
    let y = y.reshape((b * c, h, w))?;
    let blur = |t: &Tensor| -> Result<Tensor> { Ok(rows.broadcast_matmul(t)?.broadcast_matmul(&cols)?) };
    let mu_x = blur(&x)?;
    let mu_y = blur(&y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (blur(&x.sqr()?)? - &mu_xx)?;
    let var_y = (blur(&y.sqr()?)? - &mu_yy)?;
    let cov = (blur(&(&x * &y)?)? - &mu_xy)?;
    let num = ((mu_xy.affine(2.0, SSIM_C1))? * cov.affine(2.0, SSIM_C2)?)?;
    let den = ((mu_xx + mu_yy)?.affine(1.0, SSIM_C1)? * (var_x + var_y)?.affine(1.0, SSIM_C2)?)?;
    Ok((num / den)?.mean_all()?)
}

pub fn ssim_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    Ok(ssim(x, x_hat)?.affine(-1.0, 1.0)?)
}

/// Frozen convolutional feature extractor for the perceptual loss. Weights
/// are detached constants; gradients reach only the input.
#[derive(Clone, Debug)]
pub struct FrozenFeatures {
    layers: Vec<(Tensor, Tensor)>,
}

impl FrozenFeatures {
    /// `layers`: (weight (O, I, k, k), bias (O)) per conv3x3 + ReLU + 2x2
    /// max-pool block.
    pub fn new(layers: Vec<(Tensor, Tensor)>) -> Self {
        Self {
            layers: layers
                .into_iter()
                .map(|(w, b)| (w.detach(), b.detach()))
                .collect(),
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| Ok((w.to_dtype(dtype)?, b.to_dtype(dtype)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut h = xs.clone();
        for (w, b) in &self.layers {
            let out_ch = w.dim(0)?;
            let k = w.dim(2)?;
            h = conv2d_im2col(&h, w, k / 2, 1)?
                .broadcast_add(&b.reshape((1, out_ch, 1, 1))?)?
                .relu()?;
            if h.dim(2)? >= 2 && h.dim(3)? >= 2 {
                h = max_pool2x2(&h)?;
            }
        }
        Ok(h)
    }
}

/// Mean squared distance between frozen feature activations.
pub fn perceptual_loss(features: &FrozenFeatures, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    check_same(x, x_hat)?;
    let fx = features.forward(x)?.detach();
    let fy = features.forward(x_hat)?;
    Ok((fy - fx)?.sqr()?.mean_all()?)
}

/// Softmax cross-entropy of slot logits (B, alpha) against 0-based slots.
pub fn alignment_loss(logits: &Tensor, true_slots: &[u32]) -> Result<Tensor> {
    let (_, alpha) = logits.dims2()?;
    if let Some(bad) = true_slots.iter().find(|&&s| s as usize >= alpha) {
        return Err(Error::Precondition(format!("slot {bad} out of range for alpha {alpha}")));
    }
    cross_entropy(logits, true_slots)
}

/// Scalar losses from one generator update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l1: f64,
    pub ssim_loss: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub alignment: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn parts_sum(&self) -> f64 {
        self.l1 + self.ssim_loss + self.perceptual + self.adversarial + self.alignment.unwrap_or(0.0)
    }
}

/// Graph-connected loss terms of one generator update.
pub struct LossTerms {
    pub l1: Tensor,
    pub ssim_loss: Tensor,
    pub perceptual: Tensor,
    pub adversarial: Tensor,
    pub alignment: Option<Tensor>,
}

impl LossTerms {
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("l1", &self.l1),
            ("ssim", &self.ssim_loss),
            ("perceptual", &self.perceptual),
            ("adversarial", &self.adversarial),
        ];
        if let Some(a) = &self.alignment {
            v.push(("alignment", a));
        }
        v
    }
}

/// Unit-weight sum of the terms. The alignment term is required for
/// `Srwal` and ignored otherwise.
pub fn total_generator_loss(terms: &LossTerms, mode: Mode) -> Result<(Tensor, LossBundle)> {
    let alignment = match (mode, &terms.alignment) {
        (Mode::Srwal, Some(a)) => Some(a),
        (Mode::Srwal, None) => {
            return Err(Error::Precondition("srwal requires alignment logits".into()))
        }
        _ => None,
    };
    let mut total = (((&terms.l1 + &terms.ssim_loss)? + &terms.perceptual)? + &terms.adversarial)?;
    if let Some(a) = alignment {
        total = (total + a)?;
    }
    let mut bundle = LossBundle {
        l1: scalar(&terms.l1)?,
        ssim_loss: scalar(&terms.ssim_loss)?,
        perceptual: scalar(&terms.perceptual)?,
        adversarial: scalar(&terms.adversarial)?,
        alignment: alignment.map(scalar).transpose()?,
        total: 0.0,
    };
    bundle.total = bundle.parts_sum();
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand::Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &DEVICE).unwrap()
    }

    fn img(v: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, 1, h, w), &DEVICE).unwrap()
    }

    #[test]
    fn adversarial_analytic_values() {
        let half = t1(&[0.5, 0.5, 0.5]);
        let d = scalar(&discriminator_loss(&half, &half).unwrap()).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-6);
        let g = scalar(&generator_adversarial_loss(&half).unwrap()).unwrap();
        assert!((g - 2f64.ln()).abs() < 1e-6);
        let perfect = scalar(&discriminator_loss(&t1(&[1.0 - EPS]), &t1(&[EPS])).unwrap()).unwrap();
        assert!(perfect < 1e-6);
        let won = scalar(&generator_adversarial_loss(&t1(&[1.0])).unwrap()).unwrap();
        assert!(won < 1e-6);
    }

    #[test]
    fn adversarial_matches_scalar_loop() {
        let mut rng = seeded_rng(4);
        let real: Vec<f64> = (0..32).map(|_| rng.random_range(0.01..0.99)).collect();
        let fake: Vec<f64> = (0..32).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut want_d = 0.0;
        let mut want_g = 0.0;
        for i in 0..32 {
            want_d -= real[i].ln() / 32.0 + (1.0 - fake[i]).ln() / 32.0;
            want_g -= fake[i].ln() / 32.0;
        }
        let d = scalar(&discriminator_loss(&t1(&real), &t1(&fake)).unwrap()).unwrap();
        let g = scalar(&generator_adversarial_loss(&t1(&fake)).unwrap()).unwrap();
        assert!((d - want_d).abs() < 1e-6);
        assert!((g - want_g).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_identity_and_extremes() {
        let mut rng = seeded_rng(2);
        let x = img((0..256).map(|_| rng.random()).collect(), 16, 16);
        assert_eq!(scalar(&l1_loss(&x, &x).unwrap()).unwrap(), 0.0);
        assert!(scalar(&ssim_loss(&x, &x).unwrap()).unwrap().abs() < 1e-6);
        let zeros = x.zeros_like().unwrap();
        let ones = x.ones_like().unwrap();
        assert_eq!(scalar(&l1_loss(&zeros, &ones).unwrap()).unwrap(), 1.0);
        assert!(l1_loss(&zeros, &Tensor::zeros((1, 1, 4, 4), DType::F64, &DEVICE).unwrap()).is_err());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let mut rng = seeded_rng(3);
        for _ in 0..5 {
            let a = img((0..400).map(|_| rng.random()).collect(), 20, 20);
            let b = img((0..400).map(|_| rng.random()).collect(), 20, 20);
            let ab = scalar(&ssim(&a, &b).unwrap()).unwrap();
            let ba = scalar(&ssim(&b, &a).unwrap()).unwrap();
            assert!((ab - ba).abs() < 1e-6);
            assert!((-1.0..=1.0).contains(&ab));
            let inv = b.affine(-1.0, 1.0).unwrap();
            let s = scalar(&ssim(&b, &inv).unwrap()).unwrap();
            assert!((-1.0..=1.0).contains(&s) && s < 0.0);
        }
    }

    /// Direct per-window SSIM with explicit 2D Gaussian weights.
    fn ssim_loops(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let k = 11;
        let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let z: f64 = g.iter().sum::<f64>().powi(2);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = g[dy] * g[dx] / z;
                        let (p, q) = (a[(oy + dy) * w + ox + dx], b[(oy + dy) * w + ox + dx]);
                        ma += wt * p;
                        mb += wt * q;
                        saa += wt * p * p;
                        sbb += wt * q * q;
                        sab += wt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_window_loops() {
        let mut rng = seeded_rng(11);
        for (h, w) in [(11, 11), (16, 20), (24, 13)] {
            let a: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
            let b: Vec<f64> = a.iter().map(|v| v * 0.7 + rng.random::<f64>() * 0.3).collect();
            let got = scalar(&ssim(&img(a.clone(), h, w), &img(b.clone(), h, w)).unwrap()).unwrap();
            let want = ssim_loops(&a, &b, h, w);
            assert!((got - want).abs() < 1e-9, "{h}x{w}: {got} vs {want}");
        }
    }

    #[test]
    fn alignment_analytic_values() {
        let uniform = Tensor::zeros((2, 5), DType::F64, &DEVICE).unwrap();
        let l = scalar(&alignment_loss(&uniform, &[0, 3]).unwrap()).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-6);
        let confident = Tensor::from_vec(vec![0.0f64, 20.0, 0.0], (1, 3), &DEVICE).unwrap();
        assert!(scalar(&alignment_loss(&confident, &[1]).unwrap()).unwrap() < 1e-8);
        assert!(alignment_loss(&confident, &[3]).is_err());
    }

    #[test]
    fn alignment_matches_manual_softmax() {
        let mut rng = seeded_rng(8);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets = [2u32, 0, 3];
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * 4..r * 4 + 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[t as usize].exp() / z).ln() / 3.0;
        }
        let got = alignment_loss(&Tensor::from_vec(logits, (3, 4), &DEVICE).unwrap(), &targets).unwrap();
        assert!((scalar(&got).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn total_is_unit_weight_sum() {
        let s = |v: f64| Tensor::new(v, &DEVICE).unwrap();
        let terms = LossTerms {
            l1: s(0.0),
            ssim_loss: s(0.0),
            perceptual: s(0.0),
            adversarial: s(2f64.ln()),
            alignment: Some(s(5f64.ln())),
        };
        let (_, rand) = total_generator_loss(&terms, Mode::Rand).unwrap();
        assert!((rand.total - 2f64.ln()).abs() < 1e-12);
        assert_eq!(rand.alignment, None);
        let (t, srwal) = total_generator_loss(&terms, Mode::Srwal).unwrap();
        assert!((srwal.total - 2f64.ln() - 5f64.ln()).abs() < 1e-12);
        assert!((scalar(&t).unwrap() - srwal.parts_sum()).abs() < 1e-9);
        let no_align = LossTerms { alignment: None, ..terms };
        assert!(total_generator_loss(&no_align, Mode::Srwal).is_err());
    }
}
