//! Stochastic video prediction with a state-space latent model.
//!
//! Each frame is decoded from two latent chains: a stochastic motion state
//! `y_t` driven by per-step local latents and a per-sequence global latent,
//! and a deterministic appearance state `w_t` with residual transitions.
//! Training maximizes a variational lower bound with auxiliary flow and
//! appearance supervision; generation rolls the chains forward from priors.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appearance;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod datagen;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod motion;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod video;

pub use checkpoint::Checkpoint;
pub use config::{Aggregation, EvalConfig, LossConfig, Mode, ModelConfig, OptimConfig, RunConfig, TrainConfig};
pub use datagen::VideoDataset;
pub use error::{Error, Result};
pub use evaluation::MetricReport;
pub use model::VideoPredictor;
pub use motion::GaussianParams;
pub use objective::LossBreakdown;
pub use pipeline::{StepRecord, Trainer};
pub use video::{FrameSequence, FrameShape};
