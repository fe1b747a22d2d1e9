//! Adam with global gradient-norm clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::config::OptimConfig;
use crate::error::{bail, Result};
use crate::nn::ParamStore;

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

/// Outcome of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, params: &ParamStore) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in params.iter() {
            let zeros = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), Moments { m: zeros.clone(), v: zeros });
        }
        Ok(Self { cfg: cfg.clone(), step: 0, moments })
    }

    /// Restores optimizer state; every parameter needs moments of matching shape.
    pub fn from_state(cfg: &OptimConfig, params: &ParamStore, step: u64, moments: BTreeMap<String, Moments>) -> Result<Self> {
        for (name, var) in params.iter() {
            let Some(mo) = moments.get(name) else {
                bail!(Checkpoint, "optimizer state missing for `{name}`");
            };
            if mo.m.dims() != var.dims() || mo.v.dims() != var.dims() {
                bail!(Checkpoint, "optimizer state for `{name}` has the wrong shape");
            }
        }
        if moments.len() != params.len() {
            bail!(Checkpoint, "optimizer state has {} entries for {} parameters", moments.len(), params.len());
        }
        Ok(Self { cfg: cfg.clone(), step, moments })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Global L2 norm of all gradients present in `grads`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Clips the gradients to the configured global norm and applies one Adam update.
    ///
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<StepStats> {
        let grad_norm = Self::grad_norm(params, grads)?;
        if !grad_norm.is_finite() {
            return Err(crate::error::Error::NonFinite { term: "grad_norm", value: grad_norm });
        }
        let clipped = self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm;
        let scale = if clipped { self.cfg.clip_norm / grad_norm } else { 1.0 };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Leaf gradients still reference the forward graph; keeping them in the
            // moments would chain every step's graph together.
            let g = (g.detach() * scale)?;
            let Some(mo) = self.moments.get_mut(name) else {
                bail!(InvalidArgument, "no optimizer state for `{name}`");
            };
            mo.m = ((&mo.m * b1)? + (&g * (1.0 - b1))?)?;
            mo.v = ((&mo.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&mo.v / bc2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&mo.m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.cfg.lr)?)?.detach())?;
        }
        Ok(StepStats { grad_norm, clipped })
    }
}
