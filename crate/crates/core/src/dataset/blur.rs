use super::{ImageSample, Origin, Pixels};
use crate::error::{Error, Result};

/// Normalized `size x size` Gaussian kernel, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::Precondition(format!("kernel size {size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!("sigma {sigma} must be positive")));
    }
    let r = (size / 2) as i64;
    let mut k = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            k.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Half-sample symmetric index: `d c b a | a b c d | d c b a`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Per-channel correlation with a square kernel and reflected borders. No
/// clamping is applied, so the map is linear in `image`.
pub fn convolve_reflect(image: &Pixels, kernel: &[f64]) -> Result<Pixels> {
    let size = (kernel.len() as f64).sqrt() as usize;
    if size * size != kernel.len() || size % 2 == 0 {
        return Err(Error::shape("odd square kernel", kernel.len()));
    }
    let r = (size / 2) as i64;
    let mut out = image.clone();
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..image.width {
                let mut acc = 0.0f64;
                for ky in 0..size {
                    let sy = reflect(y as i64 + ky as i64 - r, image.height);
                    for kx in 0..size {
                        let sx = reflect(x as i64 + kx as i64 - r, image.width);
                        acc += kernel[ky * size + kx] * image.get(c, sy, sx) as f64;
                    }
                }
                out.set(c, y, x, acc as f32);
            }
        }
    }
    Ok(out)
}

pub fn gaussian_blur_unclamped(image: &Pixels, kernel_size: usize, sigma: f64) -> Result<Pixels> {
    convolve_reflect(image, &gaussian_kernel(kernel_size, sigma)?)
}

pub fn gaussian_blur(image: &Pixels, kernel_size: usize, sigma: f64) -> Result<Pixels> {
    let mut out = gaussian_blur_unclamped(image, kernel_size, sigma)?;
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Crafts an update-scenario image: 3x3 blur with sigma 0.8, origin
/// `CraftedBlur`.
pub fn blur_sample(sample: &ImageSample) -> Result<ImageSample> {
    Ok(ImageSample {
        sample_id: sample.sample_id.clone(),
        class_label: sample.class_label,
        pixels: gaussian_blur(&sample.pixels, 3, 0.8)?,
        origin: Origin::CraftedBlur,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn impulse(n: usize) -> Pixels {
        let mut p = Pixels::filled(n, n, 1, 0.0);
        p.set(0, n / 2, n / 2, 1.0);
        p
    }

    // Independent oracle: unnormalized weights over {-1,0,1}^2, normalized.
    fn oracle_kernel(sigma: f64) -> [[f64; 3]; 3] {
        let mut k = [[0.0; 3]; 3];
        let mut total = 0.0;
        for (i, dy) in [-1.0f64, 0.0, 1.0].iter().enumerate() {
            for (j, dx) in [-1.0f64, 0.0, 1.0].iter().enumerate() {
                k[i][j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                total += k[i][j];
            }
        }
        for row in &mut k {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        k
    }

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.3, 0.8, 2.0] {
            let k = gaussian_kernel(3, sigma).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((gaussian_kernel(3, 0.8).unwrap()[4] - 0.2725).abs() < 5e-5);
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let out = gaussian_blur(&impulse(3), 3, 0.8).unwrap();
        let k = oracle_kernel(0.8);
        for y in 0..3 {
            for x in 0..3 {
                assert!((out.get(0, y, x) as f64 - k[y][x]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = Pixels::filled(5, 7, 3, 0.37);
        let out = gaussian_blur(&img, 3, 0.8).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn double_blur_differs_from_single() {
        // Oracle: explicit correlation of the impulse with the kernel, twice.
        let k = oracle_kernel(0.8);
        let n = 7;
        let conv = |img: &Vec<Vec<f64>>| {
            let mut out = vec![vec![0.0; n]; n];
            for y in 0..n {
                for x in 0..n {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let sy = reflect(y as i64 + dy as i64 - 1, n);
                            let sx = reflect(x as i64 + dx as i64 - 1, n);
                            out[y][x] += k[dy][dx] * img[sy][sx];
                        }
                    }
                }
            }
            out
        };
        let mut src = vec![vec![0.0; n]; n];
        src[3][3] = 1.0;
        let twice = conv(&conv(&src));

        let once = gaussian_blur(&impulse(n), 3, 0.8).unwrap();
        let again = gaussian_blur(&once, 3, 0.8).unwrap();
        for y in 0..n {
            for x in 0..n {
                assert!((again.get(0, y, x) as f64 - twice[y][x]).abs() < 1e-6);
            }
        }
        assert!((again.get(0, 3, 3) - once.get(0, 3, 3)).abs() > 0.05);
    }

    #[test]
    fn rejects_even_kernel() {
        assert!(gaussian_kernel(4, 0.8).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
    }

    #[test]
    fn blur_sample_marks_origin() {
        let s = ImageSample {
            sample_id: "a".into(),
            class_label: 1,
            pixels: impulse(5),
            origin: Origin::Natural,
        };
        let b = blur_sample(&s).unwrap();
        assert_eq!(b.origin, Origin::CraftedBlur);
        assert!(b.pixels.in_unit_range());
    }

    proptest! {
        #[test]
        fn blur_is_linear(
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            xs in proptest::collection::vec(0.0f32..1.0, 30),
            ys in proptest::collection::vec(0.0f32..1.0, 30),
        ) {
            let mk = |d: &Vec<f32>| Pixels { height: 5, width: 6, channels: 1, data: d.clone() };
            let mix = Pixels {
                height: 5,
                width: 6,
                channels: 1,
                data: xs.iter().zip(&ys).map(|(x, y)| (a * *x as f64 + b * *y as f64) as f32).collect(),
            };
            let lhs = gaussian_blur_unclamped(&mix, 3, 0.8).unwrap();
            let bx = gaussian_blur_unclamped(&mk(&xs), 3, 0.8).unwrap();
            let by = gaussian_blur_unclamped(&mk(&ys), 3, 0.8).unwrap();
            for i in 0..30 {
                let rhs = a * bx.data[i] as f64 + b * by.data[i] as f64;
                prop_assert!((lhs.data[i] as f64 - rhs).abs() < 1e-6);
            }
        }
    }
}
