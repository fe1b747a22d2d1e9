//! Training objective: Gaussian reconstruction likelihood, KL terms and the weighted total.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{bail, Error, Result};
use crate::motion::GaussianParams;

/// Closed-form KL between diagonal Gaussians, summed over the last dimension.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if q.dims() != p.dims() {
        bail!(Shape, "KL between {:?} and {:?}", q.dims(), p.dims());
    }
    for (name, s) in [("q", &q.scale), ("p", &p.scale)] {
        let min: f64 = s.flatten_all()?.min(0)?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
        if !(min > 0.0) {
            bail!(InvalidArgument, "scale of {name} must be positive, found {min}");
        }
    }
    let var_ratio = (&q.scale / &p.scale)?.sqr()?;
    let mean_term = ((&q.mean - &p.mean)? / &p.scale)?.sqr()?;
    // ln(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
    let kl = ((var_ratio.log()? * -0.5)? + ((var_ratio + mean_term)? * 0.5)?)? - 0.5;
    Ok(kl?.sum(D::Minus1)?)
}

/// KL of `q(y_1)` against the fixed standard normal prior.
pub fn kl_y1(q: &GaussianParams) -> Result<Tensor> {
    let prior = GaussianParams::standard(q.dims(), q.mean.dtype(), q.mean.device())?;
    gaussian_kl(q, &prior)
}

/// Gaussian negative log-likelihood of `x` under `N(x_hat, sigma_obs^2)`, summed over the
/// last three (channel, row, column) dimensions.
pub fn reconstruction_nll(x_hat: &Tensor, x: &Tensor, sigma_obs: f64) -> Result<Tensor> {
    if !(sigma_obs > 0.0) {
        bail!(InvalidArgument, "sigma_obs must be positive, got {sigma_obs}");
    }
    if x_hat.dims() != x.dims() || x.rank() < 3 {
        bail!(Shape, "reconstruction {:?} vs target {:?}", x_hat.dims(), x.dims());
    }
    let dims = x.dims();
    let pixels: usize = dims[dims.len() - 3..].iter().product();
    let mut flat = dims[..dims.len() - 3].to_vec();
    flat.push(pixels);
    let sse = (x_hat - x)?.sqr()?.reshape(flat)?.sum(D::Minus1)?;
    let constant = pixels as f64 * (sigma_obs.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    Ok(sse.affine(1.0 / (2.0 * sigma_obs * sigma_obs), constant)?)
}

/// Per-sequence loss components of one batch, each shaped `[B]`.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub recon_nll: Tensor,
    pub kl_y1: Tensor,
    pub kl_z_local: Tensor,
    pub kl_z1: Option<Tensor>,
    pub flow_l2: Tensor,
    pub appearance_l2: Option<Tensor>,
}

/// Batch-averaged components and their weighted total.
///
/// Terms absent in an ablation mode are `None` and contribute nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub kl_y1: f64,
    pub kl_z_local: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl_z1: Option<f64>,
    pub flow_l2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub appearance_l2: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the components, recomputed from the reported values.
    pub fn weighted_total(&self, w: &LossConfig) -> f64 {
        self.recon_nll
            + w.kl_y1 * self.kl_y1
            + w.kl_z_local * self.kl_z_local
            + w.kl_z1 * self.kl_z1.unwrap_or(0.0)
            + w.flow * self.flow_l2
            + w.appearance * self.appearance_l2.unwrap_or(0.0)
    }
}

/// Averages every term over the batch and combines them under the weights.
///
/// Returns the differentiable scalar total with its breakdown; a non-finite
/// component aborts with an error naming it.
pub fn assemble_loss(terms: &LossTerms, weights: &LossConfig) -> Result<(Tensor, LossBreakdown)> {
    let mut total: Option<Tensor> = None;
    let mut add = |name: &'static str, t: &Tensor, weight: f64| -> Result<f64> {
        let mean = t.mean_all()?;
        let value: f64 = mean.to_dtype(candle_core::DType::F64)?.to_scalar()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { term: name, value });
        }
        let scaled = (mean * weight)?;
        total = Some(match total.take() {
            Some(acc) => (acc + scaled)?,
            None => scaled,
        });
        Ok(value)
    };
    let recon_nll = add("recon_nll", &terms.recon_nll, 1.0)?;
    let kl_y1 = add("kl_y1", &terms.kl_y1, weights.kl_y1)?;
    let kl_z_local = add("kl_z_local", &terms.kl_z_local, weights.kl_z_local)?;
    let kl_z1 = terms.kl_z1.as_ref().map(|t| add("kl_z1", t, weights.kl_z1)).transpose()?;
    let flow_l2 = add("flow_l2", &terms.flow_l2, weights.flow)?;
    let appearance_l2 = terms.appearance_l2.as_ref().map(|t| add("appearance_l2", t, weights.appearance)).transpose()?;
    let total = total.expect("reconstruction term always present");
    let mut breakdown = LossBreakdown { recon_nll, kl_y1, kl_z_local, kl_z1, flow_l2, appearance_l2, total: 0.0 };
    breakdown.total = total.to_dtype(candle_core::DType::F64)?.to_scalar()?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { term: "total", value: breakdown.total });
    }
    Ok((total, breakdown))
}
