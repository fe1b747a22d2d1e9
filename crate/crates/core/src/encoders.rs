//! Frame encoders.
//!
//! [`MotionEncoder`] is a strided convolutional stack producing the motion
//! feature `h^m_t`; [`AppearanceEncoder`] is a patch transformer whose
//! learnable appearance token output is the appearance feature `h^w_t`.
//! Both act on each frame independently.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::conv::conv4s2;
use crate::error::{bail, Result};
use crate::nn::{expand_rows, leaky_relu, Init, LayerNorm, Linear, ParamBuilder, TransformerBlock};

pub(crate) const LEAK: f64 = 0.2;

/// 4x4 stride-2 convolution with bias, halving the spatial size.
#[derive(Clone, Debug)]
pub(crate) struct DownConv {
    weight: Tensor,
    bias: Tensor,
}

impl DownConv {
    pub(crate) fn new(pb: &mut ParamBuilder, path: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * 16) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform(&format!("{path}.weight"), &[c_out, c_in, 4, 4], bound)?,
            bias: pb.uniform(&format!("{path}.bias"), &[c_out], bound)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv4s2(x, &self.weight, &self.bias)
    }
}

fn check_frames(x: &Tensor, cfg: &ModelConfig) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    let (_, c, h, w) = dims;
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        bail!(Shape, "frames are {c}x{h}x{w}, encoder configured for {}x{}x{}", cfg.channels, cfg.image_size, cfg.image_size);
    }
    Ok(dims)
}

/// Convolutional motion encoder: `[N, C, H, W] -> [N, d_h]`.
#[derive(Clone, Debug)]
pub struct MotionEncoder {
    blocks: Vec<DownConv>,
    proj: Linear,
    cfg: ModelConfig,
}

impl MotionEncoder {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.conv_blocks);
        let mut c_in = cfg.channels;
        for i in 0..cfg.conv_blocks {
            let c_out = cfg.base_channels << i;
            blocks.push(DownConv::new(pb, &format!("{path}.conv{i}"), c_in, c_out)?);
            c_in = c_out;
        }
        let s = cfg.bottleneck_size();
        let proj = Linear::new(pb, &format!("{path}.proj"), c_in * s * s, cfg.d_h, Init::Default)?;
        Ok(Self { blocks, proj, cfg: cfg.clone() })
    }

    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let (n, ..) = check_frames(frames, &self.cfg)?;
        let mut h = frames.clone();
        for block in &self.blocks {
            h = leaky_relu(&block.forward(&h)?, LEAK)?;
        }
        self.proj.forward(&h.reshape((n, ()))?)
    }

    /// Encodes every frame of `[B, T, C, H, W]` into `[B, T, d_h]`.
    pub fn forward_sequences(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        Ok(self.forward(&x.reshape((b * t, c, h, w))?)?.reshape((b, t, ()))?)
    }
}

/// Patch transformer with a learnable appearance token: `[N, C, H, W] -> [N, d_w]`.
#[derive(Clone, Debug)]
pub struct AppearanceEncoder {
    patch_embed: Linear,
    token: Tensor,
    positions: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    cfg: ModelConfig,
}

impl AppearanceEncoder {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        if !cfg.image_size.is_multiple_of(cfg.patch_size) {
            bail!(Config, "image size {} not divisible by patch size {}", cfg.image_size, cfg.patch_size);
        }
        let p = cfg.patch_size;
        let patch_embed = Linear::new(pb, &format!("{path}.patch_embed"), cfg.channels * p * p, cfg.d_w, Init::Default)?;
        let token = pb.normal(&format!("{path}.token"), &[1, 1, cfg.d_w], 0.02)?;
        let positions = pb.normal(&format!("{path}.positions"), &[1, cfg.appearance_tokens(), cfg.d_w], 0.02)?;
        let blocks = (0..cfg.vit_layers)
            .map(|i| TransformerBlock::new(pb, &format!("{path}.block{i}"), cfg.d_w, cfg.vit_heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(pb, &format!("{path}.norm"), cfg.d_w)?;
        Ok(Self { patch_embed, token, positions, blocks, norm, cfg: cfg.clone() })
    }

    /// Number of tokens the transformer attends over (patches plus the appearance token).
    pub fn token_count(&self) -> usize {
        self.cfg.appearance_tokens()
    }

    /// Splits frames into non-overlapping patches, `[N, patches, C*P*P]`.
    pub fn patchify(&self, frames: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = frames.dims4()?;
        let p = self.cfg.patch_size;
        if h % p != 0 || w % p != 0 {
            bail!(Shape, "frame {h}x{w} not divisible into {p}x{p} patches");
        }
        let (gh, gw) = (h / p, w / p);
        Ok(frames.reshape((n, c, gh, p, gw, p))?.permute((0, 2, 4, 1, 3, 5))?.reshape((n, gh * gw, c * p * p))?)
    }

    /// Full token sequence after the transformer, `[N, tokens, d_w]`; position 0 is the appearance token.
    pub fn tokens(&self, frames: &Tensor) -> Result<Tensor> {
        let n = frames.dim(0)?;
        let patches = self.patchify(frames)?;
        check_frames(frames, &self.cfg)?;
        let embedded = self.patch_embed.forward(&patches)?;
        let token = expand_rows(&self.token.reshape((1, self.cfg.d_w))?, n)?;
        let x = Tensor::cat(&[&token, &embedded], 1)?;
        let positions = expand_rows(&self.positions.reshape(x.dims()[1..].to_vec())?, n)?;
        let mut x = (x + positions)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        Ok(self.tokens(frames)?.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Encodes every frame of `[B, T, C, H, W]` into `[B, T, d_w]`.
    pub fn forward_sequences(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        Ok(self.forward(&x.reshape((b * t, c, h, w))?)?.reshape((b, t, ()))?)
    }
}
