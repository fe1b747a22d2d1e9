//! Training loop, step metrics and resumable state.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::datagen::VideoDataset;
use crate::error::{bail, Result};
use crate::evaluation::quick_psnr;
use crate::model::{TrainNoise, VideoPredictor};
use crate::objective::{assemble_loss, LossBreakdown};
use crate::optim::Adam;

/// RNG stream used for batch selection and training noise.
const TRAIN_STREAM: u64 = 1;

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped: bool,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_psnr: Option<f64>,
}

/// Model, optimizer and RNG: everything needed to continue training bit-for-bit.
#[derive(Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: VideoPredictor,
    pub optimizer: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = VideoPredictor::new(&config.model, config.train.seed)?;
        let optimizer = Adam::new(&config.optim, model.params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self { config, model, optimizer, step: 0, rng })
    }

    /// Restores a trainer; `mode` guards against loading a checkpoint of a different variant.
    pub fn from_checkpoint(ckpt: &Checkpoint, mode: Option<Mode>) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.restore_model(mode)?;
        let optimizer = ckpt.restore_optimizer(&model)?;
        Ok(Self { config: ckpt.config.clone(), model, optimizer, step: ckpt.step, rng: ckpt.rng.restore()? })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.config, self.step, &self.rng, &self.model, &self.optimizer)
    }

    /// Draws a training batch `[B, k + horizon, C, H, W]` of random windows.
    pub fn sample_batch(&mut self, data: &VideoDataset) -> Result<Tensor> {
        let len = self.config.train.sequence_len();
        let t = data.frames_per_sequence();
        if len > t {
            bail!(Dataset, "training windows need {len} frames, sequences have {t}");
        }
        if data.is_empty() {
            bail!(Dataset, "empty training set");
        }
        let b = self.config.train.batch_size;
        let indices: Vec<usize> = if b <= data.len() {
            sample(&mut self.rng, data.len(), b).into_vec()
        } else {
            (0..b).map(|_| self.rng.random_range(0..data.len())).collect()
        };
        let start = self.rng.random_range(0..=t - len);
        data.batch(&indices, start, len, self.model.dtype())
    }

    /// One optimizer update on `batch`; returns the loss before the update.
    pub fn training_step(&mut self, batch: &Tensor) -> Result<StepRecord> {
        let started = Instant::now();
        let (b, t, ..) = batch.dims5()?;
        let k = self.config.train.cond_frames;
        if t < k + 1 {
            bail!(InvalidArgument, "training sequences need at least k + 1 = {} frames, got {t}", k + 1);
        }
        let weights = self.config.loss.at_step(self.step);
        let noise = TrainNoise::draw(&mut self.rng, &self.config.model, b, t)?;
        let out = self.model.forward_train(batch, k, &noise, &weights)?;
        let (total, loss) = assemble_loss(&out.terms, &weights)?;
        let grads = total.backward()?;
        let stats = self.optimizer.step(self.model.params(), &grads)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
            seconds: started.elapsed().as_secs_f64(),
            val_psnr: None,
        })
    }

    /// Loss of `batch` under fixed noise without updating anything.
    pub fn evaluate_loss(&self, batch: &Tensor, noise_seed: u64) -> Result<LossBreakdown> {
        let (b, t, ..) = batch.dims5()?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = TrainNoise::draw(&mut rng, &self.config.model, b, t)?;
        let weights = self.config.loss.at_step(self.step);
        let out = self.model.forward_train(batch, self.config.train.cond_frames, &noise, &weights)?;
        Ok(assemble_loss(&out.terms, &weights)?.1)
    }
}

/// Where and how often the training loop writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Metrics file, appended with one JSON record per step.
    pub metrics: Option<PathBuf>,
    /// Checkpoint path, written every `ckpt_every` steps and at the end.
    pub checkpoint: Option<PathBuf>,
}

/// Runs `steps` further training steps, with periodic validation and checkpoints.
pub fn train(
    trainer: &mut Trainer,
    train_set: &VideoDataset,
    val_set: Option<&VideoDataset>,
    steps: u64,
    outputs: &TrainOutputs,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    let cfg = trainer.config.train.clone();
    let fs = train_set.frame_shape();
    let m = &trainer.config.model;
    if fs.channels != m.channels || fs.height != m.image_size || fs.width != m.image_size {
        bail!(Dataset, "dataset frames {:?} do not match the model ({} channels, {} px)", fs, m.channels, m.image_size);
    }
    let mut metrics = match &outputs.metrics {
        Some(path) => Some(open_append(path)?),
        None => None,
    };
    let mut records = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = trainer.sample_batch(train_set)?;
        let mut record = trainer.training_step(&batch)?;
        if let Some(val) = val_set {
            if cfg.val_every > 0 && record.step % cfg.val_every == 0 && !val.is_empty() {
                record.val_psnr =
                    Some(quick_psnr(&trainer.model, val, cfg.val_sequences, cfg.cond_frames, cfg.train_horizon, cfg.seed ^ record.step)?);
            }
        }
        if let Some(f) = metrics.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        if let Some(path) = &outputs.checkpoint {
            if cfg.ckpt_every > 0 && record.step % cfg.ckpt_every == 0 {
                trainer.checkpoint()?.save(path)?;
            }
        }
        on_step(&record);
        records.push(record);
    }
    if let Some(path) = &outputs.checkpoint {
        trainer.checkpoint()?.save(path)?;
    }
    Ok(records)
}

fn open_append(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    Ok(std::io::BufWriter::new(f))
}

/// Reads a metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
