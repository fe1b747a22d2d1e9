use std::path::{Path, PathBuf};

use toml::Value;
use vidpred_core::pipeline::{train, TrainOutputs};
use vidpred_core::{Mode, Trainer};

use crate::config::{self, check_frames, load_checkpoint, load_dataset, parse_override, resolve_input, select_split, SplitName};
use crate::error::{usage, CliError};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// TOML run config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set model.d_y=16` (repeatable, applied after the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset file (`data.dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Steps to run (`train.steps`); with --resume, steps beyond the checkpoint.
    #[arg(long)]
    steps: Option<u64>,
    /// Model variant (`model.mode`): full, no_w or no_z1.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Conditioning frames `k` (`train.cond_frames`).
    #[arg(long)]
    cond_frames: Option<usize>,
    /// Predicted frames per training window (`train.train_horizon`).
    #[arg(long)]
    horizon: Option<usize>,
    /// Continue from a checkpoint; its config is reused as is.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory under the output root. Default: `train`, or the checkpoint's directory on resume.
    #[arg(long)]
    run: Option<String>,
    /// Print a progress line every N steps (0: only the summary).
    #[arg(long, default_value_t = 0)]
    log_every: u64,
}

impl Args {
    fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut out = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
        let int = |v: u64| Value::Integer(v as i64);
        if let Some(v) = &self.dataset {
            out.push(("data.dataset".into(), Value::String(v.display().to_string())));
        }
        if let Some(v) = self.steps {
            out.push(("train.steps".into(), int(v)));
        }
        if let Some(v) = self.mode {
            out.push(("model.mode".into(), Value::String(v.as_str().into())));
        }
        if let Some(v) = self.seed {
            out.push(("train.seed".into(), int(v)));
        }
        if let Some(v) = self.batch_size {
            out.push(("train.batch_size".into(), int(v as u64)));
        }
        if let Some(v) = self.lr {
            out.push(("optim.lr".into(), Value::Float(v)));
        }
        if let Some(v) = self.cond_frames {
            out.push(("train.cond_frames".into(), int(v as u64)));
        }
        if let Some(v) = self.horizon {
            out.push(("train.train_horizon".into(), int(v as u64)));
        }
        Ok(out)
    }

    fn changes_config(&self) -> bool {
        self.config.is_some()
            || !self.set.is_empty()
            || self.seed.is_some()
            || self.batch_size.is_some()
            || self.lr.is_some()
            || self.cond_frames.is_some()
            || self.horizon.is_some()
    }
}

pub fn run(root: &Path, args: Args) -> Result<(), CliError> {
    let (mut trainer, steps, dir, fresh) = match &args.resume {
        Some(path) => {
            if args.changes_config() {
                return Err(usage("--resume reuses the checkpoint's config; only --dataset, --steps, --mode, --run and --log-every apply"));
            }
            let path = resolve_input(root, path);
            let ckpt = load_checkpoint(&path)?;
            if let Some(mode) = args.mode {
                if mode != ckpt.config.model.mode {
                    return Err(usage(format!("checkpoint was trained with mode {}, not {mode}", ckpt.config.model.mode)));
                }
            }
            let mut trainer = Trainer::from_checkpoint(&ckpt, args.mode)?;
            if let Some(d) = &args.dataset {
                trainer.config.data.dataset = d.display().to_string();
            }
            let steps = args.steps.unwrap_or(trainer.config.train.steps);
            let dir = match &args.run {
                Some(name) => config::run_dir(root, name),
                None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            (trainer, steps, dir, false)
        }
        None => {
            let cfg = config::load_run_config(args.config.as_deref(), &args.overrides()?)?;
            let steps = cfg.train.steps;
            let dir = config::run_dir(root, args.run.as_deref().unwrap_or("train"));
            (Trainer::new(cfg)?, steps, dir, true)
        }
    };

    let cfg = trainer.config.clone();
    let data = load_dataset(&resolve_input(root, Path::new(&cfg.data.dataset)))?;
    check_frames(&data, &cfg)?;
    if cfg.train.sequence_len() > data.frames_per_sequence() {
        return Err(usage(format!(
            "training windows need {} frames (k={} + horizon={}), the dataset has {} per sequence",
            cfg.train.sequence_len(),
            cfg.train.cond_frames,
            cfg.train.train_horizon,
            data.frames_per_sequence()
        )));
    }
    let train_set = select_split(&data, &cfg, SplitName::Train)?;
    let val_set = select_split(&data, &cfg, SplitName::Val).ok();

    std::fs::create_dir_all(&dir)?;
    let outputs = TrainOutputs { metrics: Some(dir.join("metrics.jsonl")), checkpoint: Some(dir.join("checkpoint.ckpt")) };
    if fresh {
        if let Some(m) = &outputs.metrics {
            if m.exists() {
                std::fs::remove_file(m)?;
            }
        }
    }
    std::fs::write(dir.join("config.toml"), config::to_toml(&cfg)?)?;

    let start = trainer.step;
    let log_every = args.log_every;
    let records = train(&mut trainer, &train_set, val_set.as_ref(), steps, &outputs, |r| {
        if log_every > 0 && r.step % log_every == 0 {
            let val = r.val_psnr.map(|v| format!(" val_psnr {v:.2}")).unwrap_or_default();
            eprintln!("step {:>6}  loss {:>12.3}  grad {:>9.3}{val}", r.step, r.loss.total, r.grad_norm);
        }
    })?;
    let last = records.last().map(|r| format!(", final loss {:.3}", r.loss.total)).unwrap_or_default();
    println!(
        "trained steps {}..{} ({}){last}; checkpoint {}",
        start + 1,
        trainer.step,
        cfg.model.mode,
        dir.join("checkpoint.ckpt").display()
    );
    Ok(())
}
