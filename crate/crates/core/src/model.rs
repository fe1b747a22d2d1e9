//! The full video predictor: training-time inference pass and test-time rollout.

use std::sync::Mutex;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::appearance::{appearance_supervision_loss, AppearanceRecurrence, AppearanceTransition, TransitionPredictor};
use crate::config::{AppearanceSource, ConditioningLatent, LossConfig, ModelConfig};
use crate::decoders::{flow_supervision_loss, warp, FlowDecoder, FrameDecoder};
use crate::encoders::{AppearanceEncoder, MotionEncoder};
use crate::error::{bail, Result};
use crate::motion::{GaussianHead, GaussianParams, GlobalDynamics, MotionTransition, PosteriorRecurrence};
use crate::nn::{ParamBuilder, ParamStore};
use crate::objective::{gaussian_kl, kl_y1, reconstruction_nll, LossTerms};

/// Standard normal tensor drawn from `rng` in row-major order.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Noise consumed by one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainNoise {
    /// `[B, d_y]`
    pub y1: Tensor,
    /// `[B, d_g]`, absent without the global latent.
    pub z1: Option<Tensor>,
    /// `[B, T - 1, d_z]`
    pub z: Tensor,
}

impl TrainNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig, batch: usize, len: usize) -> Result<Self> {
        let dtype = cfg.dtype();
        let y1 = standard_normal(rng, &[batch, cfg.d_y], dtype)?;
        let z1 = if cfg.mode.uses_global() { Some(standard_normal(rng, &[batch, cfg.d_g], dtype)?) } else { None };
        let z = standard_normal(rng, &[batch, len.saturating_sub(1), cfg.d_z], dtype)?;
        Ok(Self { y1, z1, z })
    }
}

/// Every latent of one training pass. Time axes start at frame 1 for states and
/// at frame 2 for transitions.
#[derive(Clone, Debug)]
pub struct LatentBundle {
    /// `[B, T, d_y]`
    pub y: Tensor,
    /// `[B, T, d_w]`
    pub w: Tensor,
    pub q_y1: GaussianParams,
    pub z1: Option<Tensor>,
    pub q_z1: Option<GaussianParams>,
    pub p_z1: Option<GaussianParams>,
    /// `[B, T - 1, d_z]`
    pub z: Tensor,
    pub q_z: GaussianParams,
    pub p_z: GaussianParams,
    /// Predictor outputs `z^w_{2:T}`, `[B, T - 1, d_zw]`.
    pub z_w: Option<Tensor>,
    /// Recurrence outputs `z~^w_{2:T}`, `[B, T - 1, d_zw]`.
    pub z_w_tilde: Option<Tensor>,
    /// `[B, T, rnn_hidden]`
    pub g: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub terms: LossTerms,
    pub latents: LatentBundle,
    /// `[B, T, C, H, W]`
    pub x_hat: Tensor,
    /// Warped previous frames for `t = 2..T`, `[B, T - 1, C, H, W]`.
    pub warped: Tensor,
}

/// Latent trajectories of a rollout over conditioning and predicted steps.
#[derive(Clone, Debug)]
pub struct RolloutStates {
    /// `[B, k + H, d_y]`
    pub y: Tensor,
    /// `[B, k + H, d_w]`
    pub w: Tensor,
    pub cond_frames: usize,
}

/// Records which internal operations run, for structural tests.
#[derive(Debug, Default)]
pub struct Tracer {
    events: Mutex<Option<Vec<&'static str>>>,
}

impl Tracer {
    pub fn start(&self) {
        *self.events.lock().unwrap() = Some(Vec::new());
    }

    /// Stops recording and returns the events seen since [`Tracer::start`].
    pub fn take(&self) -> Vec<&'static str> {
        self.events.lock().unwrap().take().unwrap_or_default()
    }

    fn record(&self, event: &'static str) {
        if let Some(events) = self.events.lock().unwrap().as_mut() {
            events.push(event);
        }
    }
}

pub struct VideoPredictor {
    cfg: ModelConfig,
    params: ParamStore,
    motion_encoder: MotionEncoder,
    appearance_encoder: AppearanceEncoder,
    posterior_rnn: PosteriorRecurrence,
    local_posterior: GaussianHead,
    local_prior: GaussianHead,
    initial_posterior: GaussianHead,
    global: Option<GlobalDynamics>,
    motion_transition: MotionTransition,
    appearance_rnn: Option<AppearanceRecurrence>,
    appearance_predictor: Option<TransitionPredictor>,
    appearance_transition: Option<AppearanceTransition>,
    frame_decoder: FrameDecoder,
    flow_decoder: FlowDecoder,
    tracer: Tracer,
}

impl std::fmt::Debug for VideoPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VideoPredictor").field("mode", &self.cfg.mode).field("parameters", &self.params.num_elements()).finish()
    }
}

impl VideoPredictor {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut builder = ParamBuilder::new(cfg.dtype(), seed);
        let pb = &mut builder;
        let hidden = [cfg.mlp_hidden];
        let chain = cfg.mode.uses_appearance_chain();
        let motion_encoder = MotionEncoder::new(pb, "motion_encoder", cfg)?;
        let appearance_encoder = AppearanceEncoder::new(pb, "appearance_encoder", cfg)?;
        let posterior_rnn = PosteriorRecurrence::new(pb, "posterior_rnn", cfg)?;
        let local_posterior = GaussianHead::new(pb, "local_posterior", cfg.rnn_hidden, &hidden, cfg.d_z)?;
        let local_prior = GaussianHead::new(pb, "local_prior", cfg.d_y, &hidden, cfg.d_z)?;
        let initial_posterior = GaussianHead::new(pb, "initial_posterior", 2 * cfg.d_h, &hidden, cfg.d_y)?;
        let global = if cfg.mode.uses_global() { Some(GlobalDynamics::new(pb, "global", cfg)?) } else { None };
        let motion_transition = MotionTransition::new(pb, "motion_transition", cfg)?;
        let appearance_rnn = if chain { Some(AppearanceRecurrence::new(pb, "appearance_rnn", cfg)?) } else { None };
        let appearance_predictor = if chain { Some(TransitionPredictor::new(pb, "appearance_predictor", cfg)?) } else { None };
        let appearance_transition = if chain { Some(AppearanceTransition::new(pb, "appearance_transition", cfg)?) } else { None };
        let frame_decoder = FrameDecoder::new(pb, "frame_decoder", cfg)?;
        let flow_decoder = FlowDecoder::new(pb, "flow_decoder", cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: builder.finish(),
            motion_encoder,
            appearance_encoder,
            posterior_rnn,
            local_posterior,
            local_prior,
            initial_posterior,
            global,
            motion_transition,
            appearance_rnn,
            appearance_predictor,
            appearance_transition,
            frame_decoder,
            flow_decoder,
            tracer: Tracer::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    pub fn dtype(&self) -> DType {
        self.cfg.dtype()
    }

    /// Module computing `p(z_1 | x_{1:k})`.
    pub fn global_prior_module(&self) -> Option<&GlobalDynamics> {
        self.global.as_ref()
    }

    /// Module computing `q(z_1 | x_{1:T})`; the same instance as the prior.
    pub fn global_posterior_module(&self) -> Option<&GlobalDynamics> {
        self.global.as_ref()
    }

    fn check_video(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (b, t, c, h, w) = x.dims5()?;
        let cfg = &self.cfg;
        if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
            bail!(Shape, "video frames are {c}x{h}x{w}, model expects {}x{}x{}", cfg.channels, cfg.image_size, cfg.image_size);
        }
        Ok((b, t))
    }

    fn encode_motion(&self, x: &Tensor) -> Result<Tensor> {
        self.tracer.record("encode_motion");
        self.motion_encoder.forward_sequences(x)
    }

    fn encode_appearance(&self, x: &Tensor) -> Result<Tensor> {
        self.tracer.record("encode_appearance");
        self.appearance_encoder.forward_sequences(x)
    }

    /// `q(y_1 | x_{1:2})` from the first two motion features of `[B, T, d_h]`.
    pub fn initial_posterior(&self, h_m: &Tensor) -> Result<GaussianParams> {
        if h_m.dim(1)? < 2 {
            bail!(InvalidArgument, "the initial motion state needs two frames, got {}", h_m.dim(1)?);
        }
        let h12 = Tensor::cat(&[h_m.narrow(1, 0, 1)?.squeeze(1)?, h_m.narrow(1, 1, 1)?.squeeze(1)?], 1)?;
        self.initial_posterior.forward(&h12)
    }

    /// Motion features `[B, T, d_h]` of a video `[B, T, C, H, W]`.
    pub fn motion_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_video(x)?;
        self.encode_motion(&x.to_dtype(self.dtype())?)
    }

    /// Local posteriors `q(z_t | x_{1:t})` for every frame, `[B, T, d_z]`.
    pub fn local_posteriors(&self, x: &Tensor) -> Result<GaussianParams> {
        let g = self.posterior_rnn.forward(&self.motion_features(x)?)?;
        self.local_posterior.forward(&g)
    }

    /// Local prior `p(z_t | y_{t-1})`.
    pub fn local_prior(&self, y_prev: &Tensor) -> Result<GaussianParams> {
        self.local_prior.forward(y_prev)
    }

    fn motion_step(&self, y: &Tensor, z: &Tensor, z1: Option<&Tensor>) -> Result<Tensor> {
        self.motion_transition.step_opt(y, z, z1)
    }

    /// Decodes frames from states `w: [N, d_w]`, `y: [N, d_y]`.
    pub fn decode(&self, w: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.tracer.record("decode_frame");
        self.frame_decoder.forward(w, y)
    }

    /// Flow for each posterior recurrent output `[N, rnn_hidden] -> [N, 2, H, W]`.
    pub fn decode_flow(&self, g: &Tensor) -> Result<Tensor> {
        self.tracer.record("decode_flow");
        self.flow_decoder.forward(g)
    }

    /// Flow fields `[B, T - 1, 2, H, W]` for the transitions of a video `[B, T, C, H, W]`,
    /// decoded from the posterior recurrence. Inspection only; generation never calls this.
    pub fn flow_fields(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t) = self.check_video(x)?;
        if t < 2 {
            bail!(InvalidArgument, "flow needs at least 2 frames, got {t}");
        }
        let cfg = &self.cfg;
        let g = self.posterior_rnn.forward(&self.motion_features(x)?)?;
        let flows = self.decode_flow(&g.narrow(1, 1, t - 1)?.reshape((b * (t - 1), cfg.rnn_hidden))?)?;
        Ok(flows.reshape((b, t - 1, 2, cfg.image_size, cfg.image_size))?)
    }

    /// Training-time inference over a video `[B, T, C, H, W]` with `cond_frames`
    /// conditioning frames defining the prior of the global latent.
    pub fn forward_train(&self, x: &Tensor, cond_frames: usize, noise: &TrainNoise, loss: &LossConfig) -> Result<TrainOutput> {
        let (b, t) = self.check_video(x)?;
        if cond_frames < 2 || t <= cond_frames {
            bail!(InvalidArgument, "training needs 2 <= k < T, got k = {cond_frames}, T = {t}");
        }
        if noise.z.dims() != [b, t - 1, self.cfg.d_z] {
            bail!(Shape, "local noise {:?} does not match batch {b} x {} steps", noise.z.dims(), t - 1);
        }
        let cfg = &self.cfg;
        let x = x.to_dtype(self.dtype())?;
        let h_m = self.encode_motion(&x)?;
        let g = self.posterior_rnn.forward(&h_m)?;

        let q_y1 = self.initial_posterior(&h_m)?;
        self.tracer.record("sample:q_y1");
        let y1 = q_y1.sample(&noise.y1)?;

        let (z1, q_z1, p_z1) = match &self.global {
            Some(global) => {
                let Some(eps) = &noise.z1 else { bail!(InvalidArgument, "missing global-latent noise") };
                let q = global.forward(&h_m)?;
                let p = global.forward(&h_m.narrow(1, 0, cond_frames)?)?;
                self.tracer.record("sample:q_z1");
                (Some(q.sample(eps)?), Some(q), Some(p))
            }
            None => (None, None, None),
        };

        let q_z = self.local_posterior.forward(&g.narrow(1, 1, t - 1)?)?;
        self.tracer.record("sample:q_z");
        let z = q_z.sample(&noise.z)?;
        let mut ys = Vec::with_capacity(t);
        ys.push(y1);
        for step in 0..t - 1 {
            let next = self.motion_step(&ys[step], &z.narrow(1, step, 1)?.squeeze(1)?, z1.as_ref())?;
            ys.push(next);
        }
        let y = Tensor::stack(&ys, 1)?;
        let p_z = self.local_prior.forward(&y.narrow(1, 0, t - 1)?)?;

        let h_w = self.encode_appearance(&x)?;
        let (w, z_w, z_w_tilde, decode_w) = match (&self.appearance_rnn, &self.appearance_transition, &self.appearance_predictor) {
            (Some(rnn), Some(step), Some(pred)) => {
                let z_tilde = rnn.forward(&h_w)?;
                let w = step.chain(&h_w.narrow(1, 0, 1)?.squeeze(1)?, &z_tilde)?;
                self.tracer.record("predict_appearance");
                let z_pred = pred.forward(&w.narrow(1, 0, t - 1)?)?;
                let decode_w = match cfg.appearance_source {
                    AppearanceSource::Chain => w.clone(),
                    AppearanceSource::Reencoded => h_w.clone(),
                };
                (w, Some(z_pred), Some(z_tilde), decode_w)
            }
            _ => {
                let content = h_w.narrow(1, 0, 1)?;
                let w = content.broadcast_as((b, t, cfg.d_w))?.contiguous()?;
                (w.clone(), None, None, w)
            }
        };

        let x_hat = self.decode(&decode_w.reshape((b * t, cfg.d_w))?, &y.reshape((b * t, cfg.d_y))?)?.reshape(x.dims())?;

        let (_, _, c, hh, ww) = x.dims5()?;
        let flows = self.decode_flow(&g.narrow(1, 1, t - 1)?.reshape((b * (t - 1), cfg.rnn_hidden))?)?;
        self.tracer.record("warp");
        let prev = x.narrow(1, 0, t - 1)?.reshape((b * (t - 1), c, hh, ww))?;
        let warped = warp(&flows, &prev)?.reshape((b, t - 1, c, hh, ww))?;

        let terms = LossTerms {
            recon_nll: reconstruction_nll(&x_hat, &x, loss.sigma_obs)?.sum(1)?,
            kl_y1: kl_y1(&q_y1)?,
            kl_z_local: gaussian_kl(&q_z, &p_z)?.sum(1)?,
            kl_z1: match (&q_z1, &p_z1) {
                (Some(q), Some(p)) => Some(gaussian_kl(q, p)?),
                _ => None,
            },
            flow_l2: flow_supervision_loss(&warped, &x.narrow(1, 1, t - 1)?)?,
            appearance_l2: match (&z_w, &z_w_tilde) {
                (Some(pred), Some(tilde)) => Some(appearance_supervision_loss(pred, &tilde.detach())?),
                _ => None,
            },
        };
        let latents = LatentBundle { y, w, q_y1, z1, q_z1, p_z1, z, q_z, p_z, z_w, z_w_tilde, g };
        Ok(TrainOutput { terms, latents, x_hat, warped })
    }

    /// Re-rolls the motion chain from `y_1` with the stored samples.
    pub fn replay_motion(&self, latents: &LatentBundle) -> Result<Tensor> {
        let steps = latents.z.dim(1)?;
        let mut y = latents.y.narrow(1, 0, 1)?.squeeze(1)?;
        let mut ys = vec![y.clone()];
        for t in 0..steps {
            y = self.motion_step(&y, &latents.z.narrow(1, t, 1)?.squeeze(1)?, latents.z1.as_ref())?;
            ys.push(y.clone());
        }
        Ok(Tensor::stack(&ys, 1)?)
    }

    /// Re-rolls the appearance chain from `w_1` with the stored transitions.
    pub fn replay_appearance(&self, latents: &LatentBundle) -> Result<Tensor> {
        match (&self.appearance_transition, &latents.z_w_tilde) {
            (Some(step), Some(z)) => step.chain(&latents.w.narrow(1, 0, 1)?.squeeze(1)?, z),
            _ => Ok(latents.w.clone()),
        }
    }

    /// Latent trajectories for `k` conditioning frames `[B, k, C, H, W]` followed by `horizon` predicted steps.
    pub fn rollout_states<R: Rng + ?Sized>(&self, cond: &Tensor, horizon: usize, rng: &mut R) -> Result<RolloutStates> {
        let (b, k) = self.check_video(cond)?;
        if k < 2 {
            bail!(InvalidArgument, "rollout needs at least 2 conditioning frames, got {k}");
        }
        if horizon == 0 {
            bail!(InvalidArgument, "rollout horizon must be positive");
        }
        let cfg = &self.cfg;
        let dtype = self.dtype();
        let cond = cond.to_dtype(dtype)?;
        let h_m = self.encode_motion(&cond)?;
        let g = self.posterior_rnn.forward(&h_m)?;

        let z1 = match &self.global {
            Some(global) => {
                let p = global.forward(&h_m)?;
                self.tracer.record("sample:p_z1");
                Some(p.sample(&standard_normal(rng, &[b, cfg.d_g], dtype)?)?)
            }
            None => None,
        };
        let q_y1 = self.initial_posterior(&h_m)?;
        self.tracer.record("sample:q_y1");
        let mut y = q_y1.sample(&standard_normal(rng, &[b, cfg.d_y], dtype)?)?;
        let mut ys = vec![y.clone()];
        let q_z = match cfg.conditioning_latent {
            ConditioningLatent::Posterior => Some(self.local_posterior.forward(&g)?),
            ConditioningLatent::Prior => None,
        };
        for t in 1..k + horizon {
            let eps = standard_normal(rng, &[b, cfg.d_z], dtype)?;
            let dist = match &q_z {
                Some(q) if t < k => {
                    self.tracer.record("sample:q_z");
                    q.narrow(1, t, 1)?.squeeze(1)?
                }
                _ => {
                    self.tracer.record("sample:p_z");
                    self.local_prior.forward(&y)?
                }
            };
            y = self.motion_step(&y, &dist.sample(&eps)?, z1.as_ref())?;
            ys.push(y.clone());
        }

        let h_w = self.encode_appearance(&cond)?;
        let w = match (&self.appearance_rnn, &self.appearance_transition, &self.appearance_predictor) {
            (Some(rnn), Some(step), Some(pred)) => {
                let z_tilde = rnn.forward(&h_w)?;
                let observed = step.chain(&h_w.narrow(1, 0, 1)?.squeeze(1)?, &z_tilde)?;
                let mut w = observed.narrow(1, k - 1, 1)?.squeeze(1)?;
                let mut ws = vec![observed];
                for _ in 0..horizon {
                    self.tracer.record("predict_appearance");
                    w = step.step(&w, &pred.forward(&w)?)?;
                    ws.push(w.unsqueeze(1)?);
                }
                Tensor::cat(&ws, 1)?
            }
            _ => h_w.narrow(1, 0, 1)?.broadcast_as((b, k + horizon, cfg.d_w))?.contiguous()?,
        };
        Ok(RolloutStates { y: Tensor::stack(&ys, 1)?, w, cond_frames: k })
    }

    /// Decodes steps `start..start + len` of a rollout into `[B, len, C, H, W]`.
    pub fn decode_states(&self, states: &RolloutStates, start: usize, len: usize) -> Result<Tensor> {
        let (b, _, _) = states.y.dims3()?;
        let cfg = &self.cfg;
        let w = states.w.narrow(1, start, len)?.reshape((b * len, cfg.d_w))?;
        let y = states.y.narrow(1, start, len)?.reshape((b * len, cfg.d_y))?;
        Ok(self.decode(&w, &y)?.reshape((b, len, cfg.channels, cfg.image_size, cfg.image_size))?)
    }

    /// Predicts `horizon` frames after the conditioning frames `[B, k, C, H, W]`.
    pub fn rollout<R: Rng + ?Sized>(&self, cond: &Tensor, horizon: usize, rng: &mut R) -> Result<Tensor> {
        let states = self.rollout_states(cond, horizon, rng)?;
        self.decode_states(&states, states.cond_frames, horizon)
    }
}
