//! 2D convolution as patch extraction (im2col) plus matmul, wrapped in a
//! custom op with a hand-written backward pass. Candle's own conv2d
//! backpropagates through a slow transposed convolution on CPU.

use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Device, Layout, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let limit = self.w + self.pad;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(col_start, image_start, len)` for each run of patch entries
    /// of batch item `b` inside the image. Column indices address the
    /// (rows, batch * cols) patch matrix. Along a run the column index steps
    /// by 1 and the image index by `stride`.
    fn for_each_run(&self, b: usize, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
        let cols = self.cols();
        let width = batch * cols;
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let y = oy * self.stride + ky;
                        if y < self.pad || y >= self.h + self.pad {
                            continue;
                        }
                        let img_row = (ci * self.h + y - self.pad) * self.w;
                        let x0 = lo * self.stride + kx - self.pad;
                        f(row * width + b * cols + oy * self.wo + lo, img_row + x0, hi - lo);
                    }
                }
            }
        }
    }

    fn gather<T: Copy + Default>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (img, col) = (self.c * self.h * self.w, self.rows() * self.cols());
        let stride = self.stride;
        let mut out = vec![T::default(); batch * col];
        for b in 0..batch {
            let s = &src[b * img..(b + 1) * img];
            self.for_each_run(b, batch, |c0, i0, n| {
                let d = &mut out;
                if stride == 1 {
                    d[c0..c0 + n].copy_from_slice(&s[i0..i0 + n]);
                } else {
                    for (j, v) in d[c0..c0 + n].iter_mut().enumerate() {
                        *v = s[i0 + j * stride];
                    }
                }
            });
        }
        out
    }

    fn scatter<T: Copy + Default + AddAssign>(&self, src: &[T], batch: usize) -> Vec<T> {
        let img = self.c * self.h * self.w;
        let stride = self.stride;
        let mut out = vec![T::default(); batch * img];
        for b in 0..batch {
            let d = &mut out[b * img..(b + 1) * img];
            self.for_each_run(b, batch, |c0, i0, n| {
                for (j, v) in src[c0..c0 + n].iter().enumerate() {
                    d[i0 + j * stride] += *v;
                }
            });
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("conv expects contiguous storage".into())),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry, usize);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.gather(contiguous(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(g.gather(contiguous(v, layout)?, batch)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col")),
        };
        Ok((out, Shape::from((g.rows(), batch * g.cols()))))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let (g, batch) = (self.0, self.1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.scatter(contiguous(v, layout)?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(g.scatter(contiguous(v, layout)?, batch)),
            other => return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "col2im")),
        };
        Ok((out, Shape::from((batch, g.c, g.h, g.w))))
    }
}

fn geometry(xs: &Tensor, k: usize, pad: usize, stride: usize) -> Result<Geometry> {
    let (_, c, h, w) = xs.dims4()?;
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(candle_core::Error::Msg(format!(
            "conv: kernel {k} with padding {pad} does not fit {h}x{w}"
        )));
    }
    Ok(Geometry {
        c,
        h,
        w,
        k,
        pad,
        stride,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (w + 2 * pad - k) / stride + 1,
    })
}

/// Untracked forward pass on detached tensors.
fn forward(xs: &Tensor, weight: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let (b, _, _, _) = xs.dims4()?;
    let (o, c, k, _) = weight.dims4()?;
    let g = geometry(xs, k, pad, stride)?;
    let cols = xs.contiguous()?.apply_op1_no_bwd(&Im2Col(g))?;
    weight
        .reshape((o, c * k * k))?
        .matmul(&cols)?
        .reshape((o, b, g.ho, g.wo))?
        .transpose(0, 1)?
        .contiguous()
}

fn to_tensor(storage: &CpuStorage, layout: &Layout) -> Result<Tensor> {
    let shape = layout.shape();
    match storage {
        CpuStorage::F32(v) => Tensor::from_slice(contiguous(v, layout)?, shape, &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(contiguous(v, layout)?, shape, &Device::Cpu),
        other => Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "conv")),
    }
}

fn to_storage(t: &Tensor) -> Result<CpuStorage> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        candle_core::DType::F32 => Ok(CpuStorage::F32(flat.to_vec1()?)),
        candle_core::DType::F64 => Ok(CpuStorage::F64(flat.to_vec1()?)),
        d => Err(candle_core::Error::UnsupportedDTypeForOp(d, "conv")),
    }
}

struct Conv2dOp {
    pad: usize,
    stride: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let ys = forward(&to_tensor(s1, l1)?, &to_tensor(s2, l2)?, self.pad, self.stride)?;
        Ok((to_storage(&ys)?, ys.shape().clone()))
    }

    fn bwd(&self, xs: &Tensor, weight: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (xs, weight, grad) = (xs.detach(), weight.detach(), grad.detach());
        let (b, _, _, _) = xs.dims4()?;
        let (o, c, k, _) = weight.dims4()?;
        let g = geometry(&xs, k, self.pad, self.stride)?;
        // (O, B*Ho*Wo), columns ordered like the patch matrix.
        let g2 = grad.transpose(0, 1)?.contiguous()?.reshape((o, b * g.ho * g.wo))?;
        let cols = xs.contiguous()?.apply_op1_no_bwd(&Im2Col(g))?;
        let grad_w = cols.matmul(&g2.t()?.contiguous()?)?.t()?.reshape((o, c, k, k))?;
        let grad_x = if self.stride == 1 && self.pad < k {
            // Full correlation of the output gradient with the flipped,
            // channel-transposed kernel.
            let rev = Tensor::from_vec((0..k as u32).rev().collect::<Vec<u32>>(), k, xs.device())?;
            let flipped = weight
                .index_select(&rev, 2)?
                .index_select(&rev, 3)?
                .transpose(0, 1)?
                .contiguous()?;
            forward(&grad, &flipped, k - 1 - self.pad, 1)?
        } else {
            let wt = weight.reshape((o, c * k * k))?.t()?.contiguous()?;
            wt.matmul(&g2)?.apply_op1_no_bwd(&Col2Im(g, b))?
        };
        Ok((Some(grad_x), Some(grad_w)))
    }
}

/// Zero-padded square-kernel 2D convolution of `xs` (B, C, H, W) with
/// `weight` (O, C, k, k), without bias.
pub fn conv2d(xs: &Tensor, weight: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let (_, c, _, _) = xs.dims4()?;
    let (_, wc, k, kw) = weight.dims4()?;
    if wc != c || kw != k {
        return Err(candle_core::Error::Msg(format!(
            "conv: kernel ({wc}, {k}, {kw}) does not match {c} input channels"
        )));
    }
    geometry(xs, k, pad, stride)?;
    xs.contiguous()?.apply_op2(&weight.contiguous()?, Conv2dOp { pad, stride })
}
