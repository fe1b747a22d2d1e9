//! Plain frame containers shared by data generation, the model boundary and metrics.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn square(channels: usize, size: usize) -> Self {
        Self::new(channels, size, size)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A sequence of frames `[T, C, H, W]` with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    shape: FrameShape,
    len: usize,
    data: Vec<f32>,
}

impl FrameSequence {
    pub fn new(shape: FrameShape, len: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() * len {
            bail!(Shape, "{} values for {len} frames of {:?}", data.len(), shape);
        }
        Ok(Self { shape, len, data })
    }

    pub fn from_frames(shape: FrameShape, frames: &[&[f32]]) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len() * frames.len());
        for f in frames {
            if f.len() != shape.len() {
                bail!(Shape, "frame of {} values does not match {:?}", f.len(), shape);
            }
            data.extend_from_slice(f);
        }
        Self::new(shape, frames.len(), data)
    }

    /// Builds a sequence from a `[T, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (len, c, h, w) = t.dims4()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(FrameShape::new(c, h, w), len, data)
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.shape.len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.shape.len().max(1))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len {
            bail!(Shape, "frames {start}..{} out of range for length {}", start + len, self.len);
        }
        let n = self.shape.len();
        Self::new(self.shape, len, self.data[start * n..(start + len) * n].to_vec())
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let s = self.shape;
        Ok(Tensor::from_slice(&self.data, (self.len, s.channels, s.height, s.width), &Device::Cpu)?.to_dtype(dtype)?)
    }
}
