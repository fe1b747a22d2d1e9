//! Frame metrics and the multi-sample evaluation protocol.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Aggregation, EvalConfig};
use crate::datagen::VideoDataset;
use crate::error::{bail, Result};
use crate::model::VideoPredictor;
use crate::video::{FrameSequence, FrameShape};

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for values in `[0, 1]`.
pub fn psnr(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        bail!(Shape, "psnr over {} and {} values", x.len(), x_hat.len());
    }
    let mse = x.iter().zip(x_hat).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over valid 11x11 Gaussian windows and channels.
pub fn ssim(x: &[f32], x_hat: &[f32], shape: FrameShape) -> Result<f64> {
    let FrameShape { channels, height: h, width: w } = shape;
    if x.len() != shape.len() || x_hat.len() != shape.len() {
        bail!(Shape, "ssim inputs of {} and {} values for {:?}", x.len(), x_hat.len(), shape);
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail!(Shape, "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window");
    }
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let a: Vec<f64> = x[ch * plane..(ch + 1) * plane].iter().map(|v| *v as f64).collect();
        let b: Vec<f64> = x_hat[ch * plane..(ch + 1) * plane].iter().map(|v| *v as f64).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v).collect();
        let (mu_a, mu_b) = (filter(&a, h, w, &k), filter(&b, h, w, &k));
        let (e_aa, e_bb, e_ab) = (filter(&aa, h, w, &k), filter(&bb, h, w, &k), filter(&ab, h, w, &k));
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Per-step scores of one predicted sequence against the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Sample kept by best-of-N.
    pub chosen_sample: Option<usize>,
}

impl SequenceScores {
    pub fn score(pred: &FrameSequence, truth: &FrameSequence) -> Result<Self> {
        if pred.len() != truth.len() || pred.shape() != truth.shape() {
            bail!(Shape, "prediction of {} frames vs truth of {}", pred.len(), truth.len());
        }
        let mut psnr_t = Vec::with_capacity(pred.len());
        let mut ssim_t = Vec::with_capacity(pred.len());
        for (p, t) in pred.frames().zip(truth.frames()) {
            psnr_t.push(psnr(t, p)?);
            ssim_t.push(ssim(t, p, truth.shape())?);
        }
        Ok(Self::from_curves(psnr_t, ssim_t, None))
    }

    fn from_curves(psnr: Vec<f64>, ssim: Vec<f64>, chosen_sample: Option<usize>) -> Self {
        let psnr_mean = psnr.iter().sum::<f64>() / psnr.len() as f64;
        let ssim_mean = ssim.iter().sum::<f64>() / ssim.len() as f64;
        Self { psnr, ssim, psnr_mean, ssim_mean, chosen_sample }
    }
}

/// Combines the scores of N samples of one sequence.
pub fn aggregate(samples: &[SequenceScores], mode: Aggregation) -> Result<SequenceScores> {
    let Some(first) = samples.first() else {
        bail!(InvalidArgument, "no samples to aggregate");
    };
    let steps = first.psnr.len();
    Ok(match mode {
        Aggregation::Mean => {
            let n = samples.len() as f64;
            let psnr = (0..steps).map(|t| samples.iter().map(|s| s.psnr[t]).sum::<f64>() / n).collect();
            let ssim = (0..steps).map(|t| samples.iter().map(|s| s.ssim[t]).sum::<f64>() / n).collect();
            SequenceScores::from_curves(psnr, ssim, None)
        }
        Aggregation::Best => {
            let (best, s) =
                samples.iter().enumerate().fold((0, first), |acc, (i, s)| if s.psnr_mean > acc.1.psnr_mean { (i, s) } else { acc });
            SequenceScores::from_curves(s.psnr.clone(), s.ssim.clone(), Some(best))
        }
    })
}

/// Dataset-level results with per-step curves and 95% intervals over sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub aggregation: Aggregation,
    pub n_samples: usize,
    pub cond_frames: usize,
    pub horizon: usize,
    pub sequences: usize,
    pub psnr: Vec<f64>,
    pub psnr_ci: Vec<f64>,
    pub ssim: Vec<f64>,
    pub ssim_ci: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_mean_ci: f64,
    pub ssim_mean: f64,
    pub ssim_mean_ci: f64,
    /// What the confidence intervals range over.
    pub ci_over: String,
    /// Perceptual metric, not computed (needs a pretrained network).
    pub lpips: Option<f64>,
    pub per_sequence: Vec<SequenceScores>,
}

impl MetricReport {
    pub fn from_sequences(
        label: &str,
        aggregation: Aggregation,
        n_samples: usize,
        cond_frames: usize,
        per_sequence: Vec<SequenceScores>,
    ) -> Result<Self> {
        let Some(first) = per_sequence.first() else {
            bail!(InvalidArgument, "no sequences evaluated");
        };
        let horizon = first.psnr.len();
        let mut psnr = Vec::with_capacity(horizon);
        let mut psnr_ci = Vec::with_capacity(horizon);
        let mut ssim_v = Vec::with_capacity(horizon);
        let mut ssim_ci = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let (m, c) = mean_ci(&per_sequence.iter().map(|s| s.psnr[t]).collect::<Vec<_>>());
            psnr.push(m);
            psnr_ci.push(c);
            let (m, c) = mean_ci(&per_sequence.iter().map(|s| s.ssim[t]).collect::<Vec<_>>());
            ssim_v.push(m);
            ssim_ci.push(c);
        }
        let (psnr_mean, psnr_mean_ci) = mean_ci(&per_sequence.iter().map(|s| s.psnr_mean).collect::<Vec<_>>());
        let (ssim_mean, ssim_mean_ci) = mean_ci(&per_sequence.iter().map(|s| s.ssim_mean).collect::<Vec<_>>());
        Ok(Self {
            label: label.to_string(),
            aggregation,
            n_samples,
            cond_frames,
            horizon,
            sequences: per_sequence.len(),
            psnr,
            psnr_ci,
            ssim: ssim_v,
            ssim_ci,
            psnr_mean,
            psnr_mean_ci,
            ssim_mean,
            ssim_mean_ci,
            ci_over: "sequences".into(),
            lpips: None,
            per_sequence,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Per-step curves as tab-separated text with a header row; steps count from 1.
    pub fn write_curves(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step\tpsnr\tpsnr_ci\tssim\tssim_ci")?;
        for t in 0..self.horizon {
            writeln!(f, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", t + 1, self.psnr[t], self.psnr_ci[t], self.ssim[t], self.ssim_ci[t])?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Repeats the last conditioning frame `horizon` times.
pub fn copy_last_frame_baseline(cond: &FrameSequence, horizon: usize) -> Result<FrameSequence> {
    if cond.is_empty() {
        bail!(InvalidArgument, "baseline needs at least one conditioning frame");
    }
    let last = cond.frame(cond.len() - 1);
    let frames: Vec<&[f32]> = (0..horizon).map(|_| last).collect();
    FrameSequence::from_frames(cond.shape(), &frames)
}

fn check_lengths(data: &VideoDataset, cond_frames: usize, horizon: usize) -> Result<usize> {
    if cond_frames + horizon > data.frames_per_sequence() {
        bail!(
            InvalidArgument,
            "sequences have {} frames, need {cond_frames} conditioning + {horizon} predicted",
            data.frames_per_sequence()
        );
    }
    if data.is_empty() {
        bail!(Dataset, "empty evaluation set");
    }
    Ok(data.len())
}

fn sequence_count(data: &VideoDataset, max: usize) -> usize {
    if max == 0 {
        data.len()
    } else {
        max.min(data.len())
    }
}

/// Copy-last-frame scores on the same sequences and horizon as [`evaluate`].
pub fn evaluate_baseline(data: &VideoDataset, cond_frames: usize, cfg: &EvalConfig) -> Result<MetricReport> {
    check_lengths(data, cond_frames, cfg.test_horizon)?;
    let mut per_sequence = Vec::new();
    for i in 0..sequence_count(data, cfg.max_sequences) {
        let seq = data.sequence(i);
        let pred = copy_last_frame_baseline(&seq.slice(0, cond_frames)?, cfg.test_horizon)?;
        per_sequence.push(SequenceScores::score(&pred, &seq.slice(cond_frames, cfg.test_horizon)?)?);
    }
    MetricReport::from_sequences("copy_last_frame", Aggregation::Mean, 1, cond_frames, per_sequence)
}

/// Scores of every sample of one sequence; sample `s` is batch row `s` of one rollout
/// drawn from an RNG stream tied to the sequence index.
pub fn sample_scores(
    model: &VideoPredictor,
    data: &VideoDataset,
    index: usize,
    cond_frames: usize,
    cfg: &EvalConfig,
) -> Result<Vec<SequenceScores>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = cfg.n_samples;
    let cond = data.batch(&vec![index; n], 0, cond_frames, model.dtype())?;
    let pred = model.rollout(&cond, cfg.test_horizon, &mut rng)?;
    let truth = data.sequence(index).slice(cond_frames, cfg.test_horizon)?;
    (0..n)
        .map(|s| {
            let p = FrameSequence::from_tensor(&pred.narrow(0, s, 1)?.squeeze(0)?)?;
            SequenceScores::score(&p, &truth)
        })
        .collect()
}

/// Multi-sample evaluation of a trained model. The model is only read.
pub fn evaluate(model: &VideoPredictor, data: &VideoDataset, cond_frames: usize, cfg: &EvalConfig) -> Result<MetricReport> {
    if cfg.n_samples == 0 {
        bail!(InvalidArgument, "n_samples must be at least 1");
    }
    check_lengths(data, cond_frames, cfg.test_horizon)?;
    let mut per_sequence = Vec::new();
    for i in 0..sequence_count(data, cfg.max_sequences) {
        let samples = sample_scores(model, data, i, cond_frames, cfg)?;
        per_sequence.push(aggregate(&samples, cfg.aggregation)?);
    }
    MetricReport::from_sequences("model", cfg.aggregation, cfg.n_samples, cond_frames, per_sequence)
}

/// Mean PSNR of single rollouts over the first `count` sequences; used for validation during training.
pub fn quick_psnr(model: &VideoPredictor, data: &VideoDataset, count: usize, cond_frames: usize, horizon: usize, seed: u64) -> Result<f64> {
    check_lengths(data, cond_frames, horizon)?;
    let count = count.min(data.len()).max(1);
    let indices: Vec<usize> = (0..count).collect();
    let cond = data.batch(&indices, 0, cond_frames, model.dtype())?;
    let truth = data.batch(&indices, cond_frames, horizon, candle_core::DType::F32)?;
    let pred = model.rollout(&cond, horizon, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mse: f64 = (pred.to_dtype(candle_core::DType::F32)? - truth)?
        .sqr()?
        .flatten_from(2)?
        .mean(2)?
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .map(|m| psnr_from_mse(*m))
        .sum();
    Ok(mse / (count * horizon) as f64)
}
