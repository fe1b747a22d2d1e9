//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod reference;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vidpred_core::appearance::appearance_supervision_loss;
use vidpred_core::config::Precision;
use vidpred_core::model::TrainNoise;
use vidpred_core::objective::{assemble_loss, gaussian_kl};
use vidpred_core::{GaussianParams, LossConfig, Mode, ModelConfig, VideoPredictor};

/// Double-precision model with 2x2 frames and every latent at most 4 wide.
pub fn micro_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        image_size: 2,
        channels: 1,
        patch_size: 2,
        conv_blocks: 1,
        base_channels: 2,
        d_h: 4,
        d_w: 4,
        d_y: 3,
        d_z: 2,
        d_g: 2,
        d_zw: 2,
        rnn_hidden: 4,
        appearance_rnn_hidden: 3,
        mlp_hidden: 4,
        vit_layers: 1,
        vit_heads: 2,
        tf_width: 4,
        tf_layers: 1,
        tf_heads: 2,
        mode,
        precision: Precision::F64,
        ..Default::default()
    }
}

/// Overwrites every parameter (zero-initialised ones included) with uniform values in `[-bound, bound]`.
pub fn randomize(model: &VideoPredictor, seed: u64, bound: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, Vec<usize>)> = model.params().iter().map(|(n, v)| (n.clone(), v.dims().to_vec())).collect();
    for (name, dims) in names {
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        model.params().set(&name, &Tensor::from_vec(values, dims, &Device::Cpu).unwrap()).unwrap();
    }
}

pub fn uniform_video(seed: u64, dims: (usize, usize, usize, usize, usize)) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.0 * dims.1 * dims.2 * dims.3 * dims.4;
    let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(values, dims, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Analytic vs central-difference gradient of one parameter group.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `||a - n|| / max(||a|| + ||n||, 1e-10)`
    pub rel_error: f64,
}

/// Compares the backward pass of `analytic` against central differences of `numeric`
/// for every parameter under each group prefix.
pub fn finite_difference_check(
    model: &VideoPredictor,
    groups: &[String],
    h: f64,
    analytic: &dyn Fn() -> Tensor,
    numeric: &dyn Fn() -> f64,
) -> Vec<GroupCheck> {
    let params = model.params();
    let grads = analytic().backward().unwrap();
    let mut out = Vec::new();
    for group in groups {
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for name in params.names_under(group) {
            let var = params.get(&name).unwrap();
            let dims = var.dims().to_vec();
            let base = values(var.as_tensor());
            let analytic = grads.get(var.as_tensor()).map(values).unwrap_or_else(|| vec![0.0; base.len()]);
            let mut probe = base.clone();
            for i in 0..base.len() {
                let mut eval = |v: f64| {
                    probe[i] = v;
                    params.set(&name, &Tensor::from_slice(&probe, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
                    numeric()
                };
                let numeric = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
                probe[i] = base[i];
                diff += (analytic[i] - numeric).powi(2);
                an += analytic[i].powi(2);
                nn += numeric.powi(2);
            }
            params.set(&name, &Tensor::from_slice(&base, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
        }
        let (an, nn) = (an.sqrt(), nn.sqrt());
        out.push(GroupCheck { group: group.clone(), analytic_norm: an, numeric_norm: nn, rel_error: diff.sqrt() / (an + nn).max(1e-10) });
    }
    out
}

/// Fixed batch, noise and weights for gradient checks on a randomized micro-model.
pub struct MicroProblem {
    pub model: VideoPredictor,
    pub x: Tensor,
    pub noise: TrainNoise,
    pub loss: LossConfig,
    pub k: usize,
}

impl MicroProblem {
    pub fn new(mode: Mode, seed: u64) -> Self {
        let cfg = micro_config(mode);
        let model = VideoPredictor::new(&cfg, seed).unwrap();
        randomize(&model, seed + 1, 0.5);
        let (b, t) = (2, 3);
        let x = uniform_video(seed + 2, (b, t, 1, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let noise = TrainNoise::draw(&mut rng, &cfg, b, t).unwrap();
        Self { model, x, noise, loss: LossConfig::default(), k: 2 }
    }

    pub fn total(&self) -> Tensor {
        let out = self.model.forward_train(&self.x, self.k, &self.noise, &self.loss).unwrap();
        assemble_loss(&out.terms, &self.loss).unwrap().0
    }

    /// Appearance teacher transitions at the current parameters.
    pub fn teacher(&self) -> Option<Tensor> {
        let out = self.model.forward_train(&self.x, self.k, &self.noise, &self.loss).unwrap();
        out.latents.z_w_tilde.map(|t| t.detach())
    }

    /// Total loss with the appearance teacher replaced by a constant.
    ///
    /// The model stops gradients through the teacher, so its analytic gradient
    /// is the derivative of this function with `teacher` held at its current value.
    pub fn total_with_teacher(&self, teacher: Option<&Tensor>) -> f64 {
        let out = self.model.forward_train(&self.x, self.k, &self.noise, &self.loss).unwrap();
        let weights = LossConfig { appearance: 0.0, ..self.loss.clone() };
        let mut total = scalar(&assemble_loss(&out.terms, &weights).unwrap().0);
        if let (Some(pred), Some(target)) = (&out.latents.z_w, teacher) {
            total += self.loss.appearance * scalar(&appearance_supervision_loss(pred, target).unwrap().mean_all().unwrap());
        }
        total
    }

    /// Fixed random linear functional of `q(z_1)` (`posterior = true`) or `p(z_1)`.
    pub fn global_functional(&self, posterior: bool) -> Tensor {
        let out = self.model.forward_train(&self.x, self.k, &self.noise, &self.loss).unwrap();
        let dist = if posterior { out.latents.q_z1.unwrap() } else { out.latents.p_z1.unwrap() };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = dist.mean.elem_count();
        let coef = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(v, dist.dims(), &Device::Cpu).unwrap()
        };
        let (a, b) = (coef(&mut rng), coef(&mut rng));
        ((&dist.mean * a).unwrap().sum_all().unwrap() + (&dist.scale * b).unwrap().sum_all().unwrap()).unwrap()
    }
}

/// Closed-form KL of one diagonal pair through the library.
pub fn library_kl(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    let t = |v: &[f64]| Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap();
    let q = GaussianParams::new(t(mq), t(sq)).unwrap();
    let p = GaussianParams::new(t(mp), t(sp)).unwrap();
    scalar(&gaussian_kl(&q, &p).unwrap().squeeze(0).unwrap())
}

/// Monte-Carlo estimate of `E_q[ln q - ln p]` and its standard error.
pub fn monte_carlo_kl(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let log_density = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut v = 0.0;
        for i in 0..mq.len() {
            let e: f64 = StandardNormal.sample(rng);
            let x = mq[i] + sq[i] * e;
            v += log_density(x, mq[i], sq[i]) - log_density(x, mp[i], sp[i]);
        }
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}
