//! Multiplicative angular-margin softmax for embedding networks.
//!
//! The target-class logit `|x| cos(theta)` is replaced by `|x| psi(theta)`
//! with `psi(theta) = (-1)^k cos(m theta) - 2k` for `theta` in
//! `[k pi / m, (k + 1) pi / m]`, blended with the plain logit through an
//! annealed weight `lambda`: `(lambda |x| cos + |x| psi) / (1 + lambda)`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{cross_entropy, DEVICE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    pub margin: u32,
    pub lambda_base: f64,
    pub lambda_gamma: f64,
    pub lambda_min: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        Self {
            margin: 4,
            lambda_base: 1000.0,
            lambda_gamma: 0.12,
            lambda_min: 5.0,
        }
    }
}

impl MarginSchedule {
    pub fn lambda(&self, iteration: usize) -> f64 {
        (self.lambda_base / (1.0 + self.lambda_gamma * iteration as f64)).max(self.lambda_min)
    }
}

/// Chebyshev polynomial T_m evaluated elementwise, so T_m(cos t) = cos(m t).
fn chebyshev(c: &Tensor, m: u32) -> Result<Tensor> {
    let mut prev = c.ones_like()?;
    if m == 0 {
        return Ok(prev);
    }
    let mut cur = c.clone();
    for _ in 1..m {
        let next = ((c * 2.0)?.mul(&cur)? - &prev)?;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Angular-margin logits for `embeddings` (B, m) against class weights
/// (K, m) and integer targets.
pub fn margin_logits(
    embeddings: &Tensor,
    class_weights: &Tensor,
    targets: &[u32],
    margin: u32,
    lambda: f64,
) -> Result<Tensor> {
    let dtype = embeddings.dtype();
    let x_norm = embeddings.sqr()?.sum_keepdim(1)?.sqrt()?; // (B,1)
    let w_norm = class_weights.sqr()?.sum_keepdim(1)?.sqrt()?; // (K,1)
    let w_hat = class_weights.broadcast_div(&(w_norm + 1e-12)?)?;
    let cos = embeddings
        .matmul(&w_hat.t()?)?
        .broadcast_div(&(&x_norm + 1e-12)?)?
        .clamp(-1.0, 1.0)?; // (B,K)
    let (b, k) = cos.dims2()?;

    let mut onehot = vec![0f32; b * k];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * k + t as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, k), &DEVICE)?.to_dtype(dtype)?;
    let cos_t = cos.mul(&onehot)?.sum_keepdim(1)?; // (B,1)

    // The branch index k is piecewise constant in theta, so it is computed
    // outside the graph.
    let cos_vals: Vec<f64> = cos_t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let (mut sign, mut kk) = (Vec::with_capacity(b), Vec::with_capacity(b));
    for c in cos_vals {
        let theta = c.clamp(-1.0, 1.0).acos();
        let branch = ((margin as f64 * theta) / std::f64::consts::PI).floor().min(margin as f64 - 1.0);
        kk.push(branch);
        sign.push(if branch as i64 % 2 == 0 { 1.0 } else { -1.0 });
    }
    let sign = Tensor::from_vec(sign, (b, 1), &DEVICE)?.to_dtype(dtype)?;
    let kk = Tensor::from_vec(kk, (b, 1), &DEVICE)?.to_dtype(dtype)?;

    let psi = (chebyshev(&cos_t, margin)?.mul(&sign)? - (kk * 2.0)?)?;
    let blended = ((cos_t.clone() * lambda)? + psi)?.affine(1.0 / (1.0 + lambda), 0.0)?;
    let delta = (blended - cos_t)?.mul(&x_norm)?; // (B,1)
    let logits = cos.broadcast_mul(&x_norm)?;
    Ok((logits + onehot.broadcast_mul(&delta)?)?)
}

pub fn margin_loss(
    embeddings: &Tensor,
    class_weights: &Tensor,
    targets: &[u32],
    margin: u32,
    lambda: f64,
) -> Result<Tensor> {
    let logits = margin_logits(embeddings, class_weights, targets, margin, lambda)?;
    cross_entropy(&logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chebyshev_matches_cos_multiple_angle() {
        let angles = [0.1f64, 0.7, 1.3, 2.9];
        let c = Tensor::from_vec(angles.iter().map(|a| a.cos()).collect::<Vec<_>>(), 4, &DEVICE).unwrap();
        let t4: Vec<f64> = chebyshev(&c, 4).unwrap().to_vec1().unwrap();
        for (a, v) in angles.iter().zip(t4) {
            assert!(((4.0 * a).cos() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_is_monotone_decreasing_in_theta() {
        // psi(theta) for m=4 with lambda=0 must decrease across branches.
        let w = Tensor::from_vec(vec![1.0f64, 0.0], (1, 2), &DEVICE).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..=60 {
            let theta = std::f64::consts::PI * i as f64 / 60.0;
            let x = Tensor::from_vec(vec![theta.cos(), theta.sin()], (1, 2), &DEVICE).unwrap();
            let l: Vec<Vec<f64>> = margin_logits(&x, &w, &[0], 4, 0.0).unwrap().to_vec2().unwrap();
            assert!(l[0][0] <= last + 1e-9, "theta={theta}");
            last = l[0][0];
        }
    }

    #[test]
    fn margin_one_is_normalized_softmax() {
        let x = Tensor::from_vec(vec![3.0f64, 4.0], (1, 2), &DEVICE).unwrap();
        let w = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 2.0], (2, 2), &DEVICE).unwrap();
        let l: Vec<Vec<f64>> = margin_logits(&x, &w, &[1], 1, 0.0).unwrap().to_vec2().unwrap();
        assert!((l[0][0] - 3.0).abs() < 1e-9);
        assert!((l[0][1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn lambda_anneals_to_floor() {
        let s = MarginSchedule::default();
        assert_eq!(s.lambda(0), 1000.0);
        assert_eq!(s.lambda(1_000_000), 5.0);
    }
}
