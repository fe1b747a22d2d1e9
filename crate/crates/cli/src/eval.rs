use std::path::{Path, PathBuf};

use vidpred_core::evaluation::{evaluate, evaluate_baseline};
use vidpred_core::{Aggregation, EvalConfig};

use crate::config::{self, check_frames, load_checkpoint, load_dataset, resolve_input, select_split, SplitName};
use crate::error::{usage, CliError};
use crate::render::{line_plot, save_png, Series};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file. Default: the one the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Stochastic samples per sequence.
    #[arg(long)]
    samples: Option<usize>,
    /// How the samples of one sequence are combined: mean or best.
    #[arg(long)]
    agg: Option<Aggregation>,
    /// Predicted frames scored per sequence.
    #[arg(long)]
    horizon: Option<usize>,
    /// Conditioning frames. Default: the training value.
    #[arg(long)]
    cond_frames: Option<usize>,
    /// Evaluate only the first N sequences (0: all).
    #[arg(long)]
    max_sequences: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory under the output root.
    #[arg(long, default_value = "eval")]
    run: String,
}

const MODEL_COLOR: [u8; 3] = [30, 90, 200];
const BASELINE_COLOR: [u8; 3] = [150, 150, 150];

pub fn run(root: &Path, args: Args) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&resolve_input(root, &args.checkpoint))?;
    let cfg = &ckpt.config;
    let data_path = args.dataset.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.dataset));
    let data = load_dataset(&resolve_input(root, &data_path))?;
    check_frames(&data, cfg)?;
    let data = select_split(&data, cfg, args.split)?;

    let d = &cfg.eval;
    let eval = EvalConfig {
        n_samples: args.samples.unwrap_or(d.n_samples),
        aggregation: args.agg.unwrap_or(d.aggregation),
        test_horizon: args.horizon.unwrap_or(d.test_horizon),
        max_sequences: args.max_sequences.unwrap_or(d.max_sequences),
        seed: args.seed.unwrap_or(d.seed),
    };
    let k = args.cond_frames.unwrap_or(cfg.train.cond_frames);
    if eval.n_samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    if eval.test_horizon == 0 {
        return Err(usage("--horizon must be positive"));
    }
    if k < 2 {
        return Err(usage("--cond-frames must be at least 2"));
    }
    if k + eval.test_horizon > data.frames_per_sequence() {
        return Err(usage(format!("k={k} + horizon={} exceeds the {} frames per sequence", eval.test_horizon, data.frames_per_sequence())));
    }

    let model = ckpt.restore_model(None)?;
    let report = evaluate(&model, &data, k, &eval)?;
    let baseline = evaluate_baseline(&data, k, &eval)?;

    let dir = config::run_dir(root, &args.run);
    std::fs::create_dir_all(&dir)?;
    report.write_json(&dir.join("results.json"))?;
    report.write_curves(&dir.join("curves.tsv"))?;
    baseline.write_json(&dir.join("baseline.json"))?;
    for (name, model_curve, model_ci, base_curve) in
        [("psnr.png", &report.psnr, &report.psnr_ci, &baseline.psnr), ("ssim.png", &report.ssim, &report.ssim_ci, &baseline.ssim)]
    {
        let plot = line_plot(&[
            Series { values: base_curve, band: None, color: BASELINE_COLOR },
            Series { values: model_curve, band: Some(model_ci), color: MODEL_COLOR },
        ]);
        save_png(&plot, &dir.join(name))?;
    }

    println!(
        "{} sequences, {} samples ({}), horizon {}: PSNR {:.3} +- {:.3}, SSIM {:.4} +- {:.4} (copy-last PSNR {:.3}, SSIM {:.4})",
        report.sequences,
        report.n_samples,
        match report.aggregation {
            Aggregation::Mean => "mean",
            Aggregation::Best => "best",
        },
        report.horizon,
        report.psnr_mean,
        report.psnr_mean_ci,
        report.ssim_mean,
        report.ssim_mean_ci,
        baseline.psnr_mean,
        baseline.ssim_mean
    );
    println!("wrote {}", dir.display());
    Ok(())
}
