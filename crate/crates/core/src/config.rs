//! Run configuration: model dimensions, loss weights, optimizer and protocol settings.
//!
//! Every struct deserializes with defaults for missing fields, so a config
//! file only needs to list what it changes.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Which parts of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Appearance chain and global motion trend both active.
    #[default]
    Full,
    /// Appearance chain replaced by a constant content vector encoded from the first frame.
    NoW,
    /// Motion transitions ignore the global motion trend; its KL term is dropped.
    NoZ1,
}

impl Mode {
    pub fn uses_global(self) -> bool {
        self != Mode::NoZ1
    }

    pub fn uses_appearance_chain(self) -> bool {
        self != Mode::NoW
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoW => "no_w",
            Mode::NoZ1 => "no_z1",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "no_w" => Ok(Mode::NoW),
            "no_z1" => Ok(Mode::NoZ1),
            other => Err(format!("unknown mode `{other}` (expected full, no_w or no_z1)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the temporal transformer reduces a sequence to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    SummaryToken,
    Mean,
}

/// Source of the local latent during the observed part of a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningLatent {
    #[default]
    Posterior,
    Prior,
}

/// Appearance input to the frame decoder during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceSource {
    /// The residual chain driven by the recurrent transitions.
    #[default]
    Chain,
    /// The per-frame appearance encoding.
    Reencoded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Number of stride-2 blocks in the convolutional encoder and decoders.
    pub conv_blocks: usize,
    pub base_channels: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub d_g: usize,
    pub d_zw: usize,
    pub rnn_hidden: usize,
    pub appearance_rnn_hidden: usize,
    pub mlp_hidden: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub tf_width: usize,
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub pooling: Pooling,
    pub mode: Mode,
    pub appearance_source: AppearanceSource,
    pub conditioning_latent: ConditioningLatent,
    pub zero_init_flow_head: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            conv_blocks: 4,
            base_channels: 8,
            d_h: 128,
            d_w: 64,
            d_y: 32,
            d_z: 16,
            d_g: 16,
            d_zw: 16,
            rnn_hidden: 128,
            appearance_rnn_hidden: 64,
            mlp_hidden: 128,
            vit_layers: 2,
            vit_heads: 4,
            tf_width: 64,
            tf_layers: 2,
            tf_heads: 4,
            pooling: Pooling::SummaryToken,
            mode: Mode::Full,
            appearance_source: AppearanceSource::Chain,
            conditioning_latent: ConditioningLatent::Posterior,
            zero_init_flow_head: true,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Spatial size of the innermost feature map of the convolutional stacks.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.conv_blocks
    }

    pub fn bottleneck_channels(&self) -> usize {
        if self.conv_blocks == 0 {
            self.channels
        } else {
            self.base_channels << (self.conv_blocks - 1)
        }
    }

    /// Tokens seen by the appearance transformer: one per patch plus the appearance token.
    pub fn appearance_tokens(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("base_channels", self.base_channels),
            ("d_h", self.d_h),
            ("d_w", self.d_w),
            ("d_y", self.d_y),
            ("d_z", self.d_z),
            ("d_g", self.d_g),
            ("d_zw", self.d_zw),
            ("rnn_hidden", self.rnn_hidden),
            ("appearance_rnn_hidden", self.appearance_rnn_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("vit_heads", self.vit_heads),
            ("tf_width", self.tf_width),
            ("tf_heads", self.tf_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            bail!(Config, "image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size);
        }
        if self.conv_blocks == 0 || !self.image_size.is_multiple_of(1 << self.conv_blocks) {
            bail!(
                Config,
                "image_size {} must be divisible by 2^conv_blocks (conv_blocks = {}, at least 1)",
                self.image_size,
                self.conv_blocks
            );
        }
        if !self.d_w.is_multiple_of(self.vit_heads) {
            bail!(Config, "d_w {} not divisible by vit_heads {}", self.d_w, self.vit_heads);
        }
        if !self.tf_width.is_multiple_of(self.tf_heads) {
            bail!(Config, "tf_width {} not divisible by tf_heads {}", self.tf_width, self.tf_heads);
        }
        Ok(())
    }
}

/// Weights of the training objective and the observation noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Standard deviation of the Gaussian pixel likelihood.
    pub sigma_obs: f64,
    pub kl_y1: f64,
    pub kl_z_local: f64,
    pub kl_z1: f64,
    pub flow: f64,
    pub appearance: f64,
    /// Linear ramp of all KL weights from 0 to their value over this many steps (0 disables).
    pub kl_warmup_steps: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            // 1/sqrt(2*pi): the per-pixel log-normalizer vanishes, so the NLL is pi * SSE.
            sigma_obs: 1.0 / (2.0 * std::f64::consts::PI).sqrt(),
            kl_y1: 1.0,
            kl_z_local: 1.0,
            kl_z1: 1.0,
            flow: 1.0,
            appearance: 1.0,
            kl_warmup_steps: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_obs > 0.0 && self.sigma_obs.is_finite()) {
            bail!(Config, "sigma_obs must be positive, got {}", self.sigma_obs);
        }
        for (name, w) in [
            ("kl_y1", self.kl_y1),
            ("kl_z_local", self.kl_z_local),
            ("kl_z1", self.kl_z1),
            ("flow", self.flow),
            ("appearance", self.appearance),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                bail!(Config, "loss weight {name} must be finite and non-negative, got {w}");
            }
        }
        Ok(())
    }

    /// KL weights after applying warmup at the given (zero-based) step.
    pub fn at_step(&self, step: u64) -> LossConfig {
        let mut out = self.clone();
        if self.kl_warmup_steps > 0 && step < self.kl_warmup_steps {
            let r = step as f64 / self.kl_warmup_steps as f64;
            out.kl_y1 *= r;
            out.kl_z_local *= r;
            out.kl_z1 *= r;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 100.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            bail!(Config, "lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.clip_norm < 0.0 {
            bail!(Config, "eps must be positive and clip_norm non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    /// Number of conditioning frames `k`.
    pub cond_frames: usize,
    /// Frames predicted past the conditioning window during training.
    pub train_horizon: usize,
    /// Steps between validation rollouts (0 disables).
    pub val_every: u64,
    /// Steps between checkpoint writes (0: only at the end).
    pub ckpt_every: u64,
    /// Validation sequences used per validation pass.
    pub val_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, batch_size: 16, steps: 2000, cond_frames: 5, train_horizon: 10, val_every: 0, ckpt_every: 0, val_sequences: 16 }
    }
}

impl TrainConfig {
    pub fn sequence_len(&self) -> usize {
        self.cond_frames + self.train_horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if self.cond_frames < 2 {
            bail!(Config, "cond_frames must be at least 2, got {}", self.cond_frames);
        }
        if self.train_horizon == 0 {
            bail!(Config, "train_horizon must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average each metric over the samples, per timestep.
    #[default]
    Mean,
    /// Keep the sample with the highest sequence-mean PSNR.
    Best,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "best" => Ok(Aggregation::Best),
            other => Err(format!("unknown aggregation `{other}` (expected mean or best)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub aggregation: Aggregation,
    pub test_horizon: usize,
    /// Cap on evaluated test sequences (0: all).
    pub max_sequences: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 5, aggregation: Aggregation::Mean, test_horizon: 20, max_sequences: 0, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Path of the dataset tensor file (the metadata sidecar sits next to it).
    pub dataset: String,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset: "data/sprites.vpd".into(), split: [0.8, 0.1, 0.1] }
    }
}

/// Everything a run needs; serialized into checkpoints as the config snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        if self.eval.n_samples == 0 {
            bail!(Config, "eval.n_samples must be at least 1");
        }
        if self.eval.test_horizon == 0 {
            bail!(Config, "eval.test_horizon must be positive");
        }
        let sum: f64 = self.data.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.data.split.iter().any(|r| *r < 0.0) {
            bail!(Config, "split ratios must be non-negative and sum to 1, got {:?}", self.data.split);
        }
        Ok(())
    }
}
