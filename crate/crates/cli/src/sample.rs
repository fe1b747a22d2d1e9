use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vidpred_core::decoders::flow_to_rgb;
use vidpred_core::model::RolloutStates;
use vidpred_core::FrameSequence;

use crate::config::{self, check_frames, load_checkpoint, load_dataset, resolve_input, select_split, SplitName};
use crate::error::{usage, CliError};
use crate::render::{grid, save_png, write_gif, Tile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Latent {
    /// Appearance state only; the motion state is zeroed.
    W,
    /// Motion state only; the appearance state is zeroed.
    Y,
}

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file. Default: the one the checkpoint was trained on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Stochastic rollouts per sequence.
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Number of consecutive sequences to render.
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    /// First sequence (index within the split).
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Predicted frames. Default: the checkpoint's evaluation horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Conditioning frames. Default: the training value.
    #[arg(long)]
    cond_frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decode from one latent state only, with the other replaced by zeros.
    #[arg(long, value_enum)]
    decode_only: Option<Latent>,
    /// Also render flow fields of the ground truth and of each rollout.
    #[arg(long)]
    flow: bool,
    /// Leave out the ground-truth row (allows horizons past the end of the data).
    #[arg(long)]
    no_gt: bool,
    /// Pixel magnification of each frame.
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// GIF frame duration in milliseconds.
    #[arg(long, default_value_t = 250)]
    delay_ms: u32,
    /// Output directory under the output root.
    #[arg(long, default_value = "samples")]
    run: String,
}

#[derive(Serialize)]
struct Entry {
    sequence: usize,
    source_index: usize,
    strip: String,
    gif: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow: Option<String>,
}

#[derive(Serialize)]
struct Manifest {
    checkpoint: String,
    mode: String,
    seed: u64,
    cond_frames: usize,
    horizon: usize,
    samples: usize,
    ground_truth: bool,
    decode_only: Option<Latent>,
    caption: String,
    files: Vec<Entry>,
}

fn caption(n: usize, k: usize, h: usize, gt: bool, decode_only: Option<Latent>, flow: bool) -> String {
    let mut parts = Vec::new();
    let mut row = 1;
    if gt {
        parts.push(format!("Row 1: ground truth, {k} conditioning frames then {h} future frames."));
        row = 2;
    }
    parts.push(format!(
        "Rows {row}-{}: {n} sampled rollouts decoded at every step; the first {k} columns reconstruct the conditioning frames, the rest are predictions.",
        row + n - 1
    ));
    match decode_only {
        Some(Latent::W) => parts.push("Decode-only w: the motion state y is replaced by its zero vector at the decoder input.".into()),
        Some(Latent::Y) => parts.push("Decode-only y: the appearance state w is replaced by its zero vector at the decoder input.".into()),
        None => {}
    }
    parts.push("GIF: columns follow the rows left to right; green border while observed, red while predicted.".into());
    if flow {
        parts.push("Flow strip: color-wheel flow (hue = direction, saturation = relative magnitude) of the transition into each frame, computed from the full two-state decode; the first column is empty.".into());
    }
    parts.join(" ")
}

fn tiles(seq: &FrameSequence) -> Vec<Tile> {
    let s = seq.shape();
    seq.frames().map(|f| Tile::from_frame(f, s.channels, s.height, s.width)).collect()
}

fn flow_row(flows: &Tensor, row: usize, size: usize) -> Result<Vec<Tile>, CliError> {
    let f = flows.narrow(0, row, 1)?.squeeze(0)?.to_dtype(candle_core::DType::F32)?;
    let steps = f.dim(0)?;
    let mut out = vec![Tile::blank(size, size, 0)];
    for t in 0..steps {
        let v = f.narrow(0, t, 1)?.flatten_all()?.to_vec1::<f32>()?;
        out.push(Tile { width: size, height: size, rgb: flow_to_rgb(&v, size, size)? });
    }
    Ok(out)
}

pub fn run(root: &Path, args: Args) -> Result<(), CliError> {
    let ckpt_path = resolve_input(root, &args.checkpoint);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let cfg = &ckpt.config;
    let data_path = args.dataset.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.dataset));
    let data = load_dataset(&resolve_input(root, &data_path))?;
    check_frames(&data, cfg)?;
    let data = select_split(&data, cfg, args.split)?;

    let k = args.cond_frames.unwrap_or(cfg.train.cond_frames);
    let h = args.horizon.unwrap_or(cfg.eval.test_horizon);
    let t = data.frames_per_sequence();
    if args.n == 0 || args.sequences == 0 || args.scale == 0 {
        return Err(usage("--n, --sequences and --scale must be positive"));
    }
    if k < 2 || h == 0 {
        return Err(usage("need --cond-frames >= 2 and --horizon >= 1"));
    }
    if k > t {
        return Err(usage(format!("k={k} conditioning frames exceed the {t} frames per sequence")));
    }
    if !args.no_gt && k + h > t {
        return Err(usage(format!("k={k} + horizon={h} exceeds the {t} frames per sequence; pass --no-gt to sample past the data")));
    }
    if args.index + args.sequences > data.len() {
        return Err(usage(format!(
            "sequences {}..{} requested, the {:?} split has {}",
            args.index,
            args.index + args.sequences,
            args.split,
            data.len()
        )));
    }

    let model = ckpt.restore_model(None)?;
    let size = cfg.model.image_size;
    let dir = config::run_dir(root, &args.run);
    let mut files = Vec::new();
    let mut rendered = Vec::new();
    for i in args.index..args.index + args.sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(i as u64);
        let cond = data.batch(&vec![i; args.n], 0, k, model.dtype())?;
        let states = model.rollout_states(&cond, h, &mut rng)?;
        let full = model.decode_states(&states, 0, k + h)?;
        let shown = match args.decode_only {
            None => full.clone(),
            Some(latent) => {
                let (y, w) = match latent {
                    Latent::W => (states.y.zeros_like()?, states.w.clone()),
                    Latent::Y => (states.y.clone(), states.w.zeros_like()?),
                };
                model.decode_states(&RolloutStates { y, w, cond_frames: k }, 0, k + h)?
            }
        };

        let gt = (!args.no_gt).then(|| data.sequence(i).slice(0, k + h)).transpose()?;
        let mut rows: Vec<Vec<Tile>> = Vec::new();
        if let Some(g) = &gt {
            rows.push(tiles(g));
        }
        for s in 0..args.n {
            rows.push(tiles(&FrameSequence::from_tensor(&shown.narrow(0, s, 1)?.squeeze(0)?)?));
        }

        let flow_rows = if args.flow {
            let mut out = Vec::new();
            if let Some(g) = &gt {
                let video = g.to_tensor(model.dtype())?.unsqueeze(0)?;
                out.push(flow_row(&model.flow_fields(&video)?, 0, size)?);
            }
            let flows = model.flow_fields(&full)?;
            for s in 0..args.n {
                out.push(flow_row(&flows, s, size)?);
            }
            Some(out)
        } else {
            None
        };
        rendered.push((i, rows, flow_rows));
    }

    std::fs::create_dir_all(&dir)?;
    for (i, rows, flow_rows) in rendered {
        let stem = format!("seq{i:03}");
        save_png(&grid(&rows, k, args.scale), &dir.join(format!("{stem}.png")))?;
        write_gif(&dir.join(format!("{stem}.gif")), &rows, k, args.scale, args.delay_ms)?;
        let flow = match flow_rows {
            Some(fr) => {
                save_png(&grid(&fr, k, args.scale), &dir.join(format!("{stem}_flow.png")))?;
                Some(format!("{stem}_flow.png"))
            }
            None => None,
        };
        files.push(Entry {
            sequence: i,
            source_index: data.meta.source_indices[i],
            strip: format!("{stem}.png"),
            gif: format!("{stem}.gif"),
            flow,
        });
    }
    let manifest = Manifest {
        checkpoint: ckpt_path.display().to_string(),
        mode: cfg.model.mode.to_string(),
        seed: args.seed,
        cond_frames: k,
        horizon: h,
        samples: args.n,
        ground_truth: !args.no_gt,
        decode_only: args.decode_only,
        caption: caption(args.n, k, h, !args.no_gt, args.decode_only, args.flow),
        files,
    };
    std::fs::write(dir.join("samples.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("{}", manifest.caption);
    println!("wrote {} sequence(s) to {}", manifest.files.len(), dir.display());
    Ok(())
}
