//! 4x4 stride-2 convolutions built from index-table patch ops and one matmul.
//!
//! Candle's CPU convolutions and its generic gather backward are slow for the
//! small feature maps used here. The forward convolution gathers patches and
//! multiplies; the transposed one multiplies and scatter-adds footprints. The
//! gather and scatter are custom ops and each other's adjoint.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{bail, Result};
use crate::nn::expand_rows;

/// Which input pixel feeds each (position, tap) pair; index `hw` reads zero padding.
#[derive(Clone, Debug)]
struct Patches {
    c: usize,
    hw: usize,
    positions: usize,
    taps: usize,
    /// Append an all-ones column after the `c * taps` patch columns.
    ones: bool,
    table: Arc<Vec<u32>>,
}

impl Patches {
    fn new(c: usize, hw: usize, taps: usize, ones: bool, table: Vec<Option<usize>>) -> Self {
        let table: Vec<u32> = table.into_iter().map(|t| t.unwrap_or(hw) as u32).collect();
        Self { c, hw, positions: table.len() / taps, taps, ones, table: Arc::new(table) }
    }

    fn width(&self) -> usize {
        self.c * self.taps + self.ones as usize
    }

    /// `[N, C, H, W]` image to `[N * positions, width]` rows.
    fn gather<T: Copy + Default>(&self, x: &[T], one: T) -> Vec<T> {
        let n = x.len() / (self.c * self.hw);
        let (width, taps) = (self.width(), self.taps);
        let mut out = vec![T::default(); n * self.positions * width];
        let mut img = vec![T::default(); self.hw + 1];
        for (b, rows) in out.chunks_exact_mut(self.positions * width).enumerate() {
            for ch in 0..self.c {
                img[..self.hw].copy_from_slice(&x[(b * self.c + ch) * self.hw..][..self.hw]);
                for (row, tab) in rows.chunks_exact_mut(width).zip(self.table.chunks_exact(taps)) {
                    for (d, &s) in row[ch * taps..(ch + 1) * taps].iter_mut().zip(tab) {
                        *d = img[s as usize];
                    }
                }
            }
            if self.ones {
                rows.chunks_exact_mut(width).for_each(|row| row[width - 1] = one);
            }
        }
        out
    }

    /// Adjoint of [`Patches::gather`]: rows back to an image, summing overlaps.
    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, rows: &[T]) -> Vec<T> {
        let (width, taps) = (self.width(), self.taps);
        let n = rows.len() / (self.positions * width);
        let mut out = vec![T::default(); n * self.c * self.hw];
        let mut img = vec![T::default(); self.hw + 1];
        for (b, rows) in rows.chunks_exact(self.positions * width).enumerate() {
            for ch in 0..self.c {
                img.fill(T::default());
                for (row, tab) in rows.chunks_exact(width).zip(self.table.chunks_exact(taps)) {
                    for (&v, &d) in row[ch * taps..(ch + 1) * taps].iter().zip(tab) {
                        img[d as usize] += v;
                    }
                }
                out[(b * self.c + ch) * self.hw..][..self.hw].copy_from_slice(&img[..self.hw]);
            }
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

struct Gather(Patches);
struct Scatter(Patches, (usize, usize, usize, usize));

impl CustomOp1 for Gather {
    fn name(&self) -> &'static str {
        "patch-gather"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = layout.shape().dims()[0];
        let shape = Shape::from((n * self.0.positions, self.0.width()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.gather(contiguous(v, layout)?, 1.0)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.gather(contiguous(v, layout)?, 1.0)),
            _ => candle_core::bail!("patch-gather supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Scatter(self.0.clone(), arg.dims4()?);
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Scatter {
    fn name(&self) -> &'static str {
        "patch-scatter"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from(self.1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.scatter(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.scatter(contiguous(v, layout)?)),
            _ => candle_core::bail!("patch-scatter supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let mut p = self.0.clone();
        let ones = p.ones;
        p.ones = false;
        let g = grad.contiguous()?.apply_op1(Gather(p))?;
        Ok(Some(if ones { g.pad_with_zeros(1, 0, 1)? } else { g }))
    }
}

/// Flat index of pixel `(r - 1, s - 1)`, or `None` inside the one-pixel zero border.
fn pixel(r: usize, s: usize, h: usize, w: usize) -> Option<usize> {
    (r >= 1 && s >= 1 && r <= h && s <= w).then(|| (r - 1) * w + s - 1)
}

/// 4x4 stride-2 convolution with padding 1 and bias.
///
/// `x` is `[N, C, H, W]` with even `H` and `W`; `weight` is `[C_out, C, 4, 4]`.
/// Matches `x.conv2d(weight, 1, 2, 1, 1)` plus a per-channel bias.
pub fn conv4s2(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_out, c_w, kh, kw) = weight.dims4()?;
    if c_w != c || kh != 4 || kw != 4 || h % 2 != 0 || w % 2 != 0 || bias.dims() != [c_out] {
        bail!(Shape, "conv4s2: input {:?} does not fit kernel {:?}", x.dims(), weight.dims());
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut table = Vec::with_capacity(ho * wo * 16);
    for i in 0..ho {
        for j in 0..wo {
            for ki in 0..4 {
                for kj in 0..4 {
                    table.push(pixel(2 * i + ki, 2 * j + kj, h, w));
                }
            }
        }
    }
    let patches = Patches::new(c, h * w, 16, true, table);
    let cols = x.contiguous()?.apply_op1(Gather(patches))?;
    let k = Tensor::cat(&[weight.reshape((c_out, c * 16))?, bias.reshape((c_out, 1))?], 1)?;
    let out = cols.matmul(&k.t()?)?;
    Ok(out.reshape((n, ho, wo, c_out))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// 4x4 stride-2 transposed convolution with padding 1 and bias, doubling the size.
///
/// `weight` is `[C_in, C_out, 4, 4]`. Every input pixel is multiplied out to
/// its 4x4 output footprint in one matmul, then footprints are summed into the
/// output image. Matches `x.conv_transpose2d(weight, 1, 0, 2, 1)` plus a bias.
pub fn conv_transpose4s2(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (c_w, c_out, kh, kw) = weight.dims4()?;
    if c_w != c || kh != 4 || kw != 4 || bias.dims() != [c_out] {
        bail!(Shape, "conv_transpose4s2: input {:?} does not fit kernel {:?}", x.dims(), weight.dims());
    }
    let (ho, wo) = (2 * h, 2 * w);
    let mut table = Vec::with_capacity(h * w * 16);
    for i in 0..h {
        for j in 0..w {
            for ki in 0..4 {
                for kj in 0..4 {
                    table.push(pixel(2 * i + ki, 2 * j + kj, ho, wo));
                }
            }
        }
    }
    let rows = x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?;
    let footprints = rows.matmul(&weight.reshape((c, c_out * 16))?)?;
    let op = Scatter(Patches::new(c_out, ho * wo, 16, false, table), (n, c_out, ho, wo));
    let out = footprints.contiguous()?.apply_op1(op)?;
    let ones = Tensor::ones((1, ho * wo), x.dtype(), x.device())?;
    let bias_map = bias.reshape((c_out, 1))?.matmul(&ones)?.reshape((c_out, ho, wo))?;
    Ok((out + expand_rows(&bias_map, n)?)?)
}
