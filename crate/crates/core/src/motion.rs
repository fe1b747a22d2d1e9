//! Stochastic motion branch.
//!
//! The motion state evolves by residual updates `y_{t+1} = y_t + f(y_t, z_{t+1}, z_1)`
//! where `z_{t+1}` is a per-step local latent and `z_1` a per-sequence latent
//! describing the overall motion trend. Posterior and prior distributions of
//! every latent are diagonal Gaussians produced by small heads.

use candle_core::{DType, Device, Tensor};

use crate::config::{ModelConfig, Pooling};
use crate::error::{bail, Result};
use crate::nn::{expand_rows, sinusoidal_positions, softplus, Init, LayerNorm, Linear, Lstm, Mlp, ParamBuilder, TransformerBlock};

/// Lower bound added to every predicted scale.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Diagonal Gaussian over the last dimension; `scale` is strictly positive.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub scale: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, scale: Tensor) -> Result<Self> {
        if mean.dims() != scale.dims() {
            bail!(Shape, "mean {:?} and scale {:?} differ", mean.dims(), scale.dims());
        }
        Ok(Self { mean, scale })
    }

    /// `N(0, I)` with the given shape.
    pub fn standard(shape: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self { mean: Tensor::zeros(shape, dtype, device)?, scale: Tensor::ones(shape, dtype, device)? })
    }

    pub fn dims(&self) -> &[usize] {
        self.mean.dims()
    }

    pub fn dim(&self) -> usize {
        *self.mean.dims().last().unwrap_or(&0)
    }

    /// Reparameterized draw `mean + scale * noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        sample_gaussian(self, noise)
    }

    /// Slice along a leading axis, e.g. one time step of `[B, T, d]` params.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Result<Self> {
        Ok(Self { mean: self.mean.narrow(dim, start, len)?, scale: self.scale.narrow(dim, start, len)? })
    }

    pub fn squeeze(&self, dim: usize) -> Result<Self> {
        Ok(Self { mean: self.mean.squeeze(dim)?, scale: self.scale.squeeze(dim)? })
    }

    pub fn stack(items: &[GaussianParams], dim: usize) -> Result<Self> {
        let means: Vec<&Tensor> = items.iter().map(|g| &g.mean).collect();
        let scales: Vec<&Tensor> = items.iter().map(|g| &g.scale).collect();
        Ok(Self { mean: Tensor::stack(&means, dim)?, scale: Tensor::stack(&scales, dim)? })
    }

    pub fn detach(&self) -> Self {
        Self { mean: self.mean.detach(), scale: self.scale.detach() }
    }
}

pub fn sample_gaussian(p: &GaussianParams, noise: &Tensor) -> Result<Tensor> {
    if noise.dims() != p.dims() {
        bail!(Shape, "noise {:?} does not match distribution {:?}", noise.dims(), p.dims());
    }
    Ok((&p.mean + (&p.scale * noise)?)?)
}

/// MLP emitting `(mean, softplus(raw) + SCALE_FLOOR)`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    mlp: Mlp,
    dim: usize,
}

impl GaussianHead {
    pub fn new(pb: &mut ParamBuilder, path: &str, d_in: usize, hidden: &[usize], dim: usize) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(pb, path, d_in, hidden, 2 * dim, Init::Default)?, dim })
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<GaussianParams> {
        let out = self.mlp.forward(x)?;
        let last = out.rank() - 1;
        let mean = out.narrow(last, 0, self.dim)?;
        let scale = (softplus(&out.narrow(last, self.dim, self.dim)?)? + SCALE_FLOOR)?;
        GaussianParams::new(mean, scale)
    }
}

/// Causal recurrence over motion features producing `g_{1:T}`.
#[derive(Clone, Debug)]
pub struct PosteriorRecurrence {
    lstm: Lstm,
}

impl PosteriorRecurrence {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { lstm: Lstm::new(pb, path, cfg.d_h, cfg.rnn_hidden)? })
    }

    /// `[B, T, d_h] -> [B, T, rnn_hidden]`; output `t` sees features `1..=t` only.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let (_, t, _) = h.dims3()?;
        if t == 0 {
            bail!(Shape, "posterior recurrence needs at least one feature");
        }
        self.lstm.forward(h)
    }
}

/// Temporal transformer mapping a feature sequence of any length to a Gaussian over `z_1`.
///
/// The same instance serves the posterior (full sequence) and the prior
/// (conditioning frames only).
#[derive(Clone, Debug)]
pub struct GlobalDynamics {
    input: Linear,
    summary: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: GaussianHead,
    pooling: Pooling,
    width: usize,
}

impl GlobalDynamics {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        let width = cfg.tf_width;
        Ok(Self {
            input: Linear::new(pb, &format!("{path}.input"), cfg.d_h, width, Init::Default)?,
            summary: pb.normal(&format!("{path}.summary"), &[1, 1, width], 0.02)?,
            blocks: (0..cfg.tf_layers)
                .map(|i| TransformerBlock::new(pb, &format!("{path}.block{i}"), width, cfg.tf_heads))
                .collect::<Result<Vec<_>>>()?,
            norm: LayerNorm::new(pb, &format!("{path}.norm"), width)?,
            head: GaussianHead::new(pb, &format!("{path}.head"), width, &[], cfg.d_g)?,
            pooling: cfg.pooling,
            width,
        })
    }

    /// `[B, L, d_h] -> N(mean, scale)` with `[B, d_g]` parameters.
    pub fn forward(&self, h: &Tensor) -> Result<GaussianParams> {
        let (b, len, _) = h.dims3()?;
        if len == 0 {
            bail!(Shape, "global dynamics needs a non-empty sequence");
        }
        let x = self.input.forward(h)?;
        let x = match self.pooling {
            Pooling::SummaryToken => Tensor::cat(&[&expand_rows(&self.summary.reshape((1, self.width))?, b)?, &x], 1)?,
            Pooling::Mean => x,
        };
        let positions = sinusoidal_positions(x.dim(1)?, self.width, x.dtype(), x.device())?;
        let mut x = (&x + expand_rows(&positions, b)?)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.norm.forward(&x)?;
        let pooled = match self.pooling {
            Pooling::SummaryToken => x.narrow(1, 0, 1)?.squeeze(1)?,
            Pooling::Mean => x.mean(1)?,
        };
        self.head.forward(&pooled)
    }
}

/// Residual motion update `y + MLP([y, z, z_1])`, or `y + MLP([y, z])` without the global latent.
#[derive(Clone, Debug)]
pub struct MotionTransition {
    mlp: Mlp,
    uses_global: bool,
    d_y: usize,
}

impl MotionTransition {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        let uses_global = cfg.mode.uses_global();
        let d_in = cfg.d_y + cfg.d_z + if uses_global { cfg.d_g } else { 0 };
        let hidden = [cfg.mlp_hidden, cfg.mlp_hidden];
        Ok(Self { mlp: Mlp::new(pb, path, d_in, &hidden, cfg.d_y, Init::Zero)?, uses_global, d_y: cfg.d_y })
    }

    pub fn uses_global(&self) -> bool {
        self.uses_global
    }

    pub fn step(&self, y: &Tensor, z: &Tensor, z1: &Tensor) -> Result<Tensor> {
        if !self.uses_global {
            bail!(InvalidArgument, "transition built without the global latent; use step_no_global");
        }
        self.apply(&[y, z, z1])
    }

    pub fn step_no_global(&self, y: &Tensor, z: &Tensor) -> Result<Tensor> {
        if self.uses_global {
            bail!(InvalidArgument, "transition expects the global latent; use step");
        }
        self.apply(&[y, z])
    }

    fn apply(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let y = parts[0];
        if y.dims().last() != Some(&self.d_y) {
            bail!(Shape, "motion state has shape {:?}, expected last dim {}", y.dims(), self.d_y);
        }
        let input = Tensor::cat(parts, parts[0].rank() - 1)?;
        if input.dims().last() != Some(&self.mlp.in_dim()) {
            bail!(Shape, "transition input width {:?} != {}", input.dims().last(), self.mlp.in_dim());
        }
        Ok((y + self.mlp.forward(&input)?)?)
    }

    /// Dispatches on whether the global latent is present.
    pub fn step_opt(&self, y: &Tensor, z: &Tensor, z1: Option<&Tensor>) -> Result<Tensor> {
        match z1 {
            Some(z1) => self.step(y, z, z1),
            None => self.step_no_global(y, z),
        }
    }
}
