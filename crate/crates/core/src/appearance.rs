//! Deterministic appearance branch.
//!
//! `w_{t+1} = w_t + f(w_t, z^w_{t+1})`. During training and over the observed
//! frames the transitions come from a recurrence over appearance features;
//! past the observed frames a predictor maps `w_t` to the next transition.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::error::{bail, Result};
use crate::nn::{smooth_norm_last, Init, Linear, Lstm, Mlp, ParamBuilder};

/// Causal recurrence producing transitions `z~^w_{2:T}` from `h^w_{1:T}`.
#[derive(Clone, Debug)]
pub struct AppearanceRecurrence {
    lstm: Lstm,
    head: Linear,
}

impl AppearanceRecurrence {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            lstm: Lstm::new(pb, &format!("{path}.lstm"), cfg.d_w, cfg.appearance_rnn_hidden)?,
            head: Linear::new(pb, &format!("{path}.head"), cfg.appearance_rnn_hidden, cfg.d_zw, Init::Default)?,
        })
    }

    /// `[B, T, d_w] -> [B, T - 1, d_zw]`; entry `t - 2` is the transition into frame `t`.
    pub fn forward(&self, h_w: &Tensor) -> Result<Tensor> {
        let (_, t, _) = h_w.dims3()?;
        if t < 2 {
            bail!(Shape, "appearance recurrence needs at least 2 frames, got {t}");
        }
        let out = self.lstm.forward(h_w)?.narrow(1, 1, t - 1)?;
        self.head.forward(&out)
    }
}

/// Test-time map `w_t -> z^w_{t+1}`.
#[derive(Clone, Debug)]
pub struct TransitionPredictor {
    mlp: Mlp,
}

impl TransitionPredictor {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        Self::with_hidden(pb, path, cfg.d_w, &[cfg.mlp_hidden], cfg.d_zw)
    }

    pub fn with_hidden(pb: &mut ParamBuilder, path: &str, d_w: usize, hidden: &[usize], d_zw: usize) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(pb, path, d_w, hidden, d_zw, Init::Default)? })
    }

    pub fn forward(&self, w: &Tensor) -> Result<Tensor> {
        self.mlp.forward(w)
    }
}

/// Residual appearance update `w + MLP([w, z^w])`.
#[derive(Clone, Debug)]
pub struct AppearanceTransition {
    mlp: Mlp,
    d_w: usize,
}

impl AppearanceTransition {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        Self::with_hidden(pb, path, cfg.d_w, cfg.d_zw, &[cfg.mlp_hidden, cfg.mlp_hidden])
    }

    pub fn with_hidden(pb: &mut ParamBuilder, path: &str, d_w: usize, d_zw: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(pb, path, d_w + d_zw, hidden, d_w, Init::Zero)?, d_w })
    }

    pub fn step(&self, w: &Tensor, z_w: &Tensor) -> Result<Tensor> {
        if w.dims().last() != Some(&self.d_w) {
            bail!(Shape, "appearance state has shape {:?}, expected last dim {}", w.dims(), self.d_w);
        }
        let input = Tensor::cat(&[w, z_w], w.rank() - 1)?;
        if input.dims().last() != Some(&self.mlp.in_dim()) {
            bail!(Shape, "appearance transition has shape {:?}", z_w.dims());
        }
        Ok((w + self.mlp.forward(&input)?)?)
    }

    /// Applies the transitions `[B, T - 1, d_zw]` from `w_1` and returns `w_{1:T}` as `[B, T, d_w]`.
    pub fn chain(&self, w1: &Tensor, transitions: &Tensor) -> Result<Tensor> {
        let (_, steps, _) = transitions.dims3()?;
        let mut w = w1.clone();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(w.clone());
        for t in 0..steps {
            w = self.step(&w, &transitions.narrow(1, t, 1)?.squeeze(1)?)?;
            out.push(w.clone());
        }
        Ok(Tensor::stack(&out, 1)?)
    }
}

/// Sum over time of Euclidean distances between transitions.
///
/// Inputs are `[..., T, d]`; the result drops the last two dimensions.
pub fn appearance_supervision_loss(z_pred: &Tensor, z_tilde: &Tensor) -> Result<Tensor> {
    if z_pred.dims() != z_tilde.dims() {
        bail!(Shape, "predicted transitions {:?} vs inferred {:?}", z_pred.dims(), z_tilde.dims());
    }
    if z_pred.rank() < 2 {
        bail!(Shape, "transitions need a time axis, got {:?}", z_pred.dims());
    }
    Ok(smooth_norm_last(&(z_tilde - z_pred)?)?.sum(D::Minus1)?)
}
