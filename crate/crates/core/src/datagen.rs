//! Seeded synthetic video datasets.
//!
//! Two generators cover the two kinds of dynamics the model separates:
//! bouncing glyph sprites whose direction is perturbed at every wall contact
//! (stochastic motion), and a procedural texture panned at constant velocity
//! with wrap-around (deterministic background shift).
//!
//! Each sequence draws from its own ChaCha stream selected by its index, so a
//! dataset is a pure function of its parameters and smaller datasets are
//! prefixes of larger ones.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::video::{FrameSequence, FrameShape};

const DATASET_MAGIC: &[u8; 4] = b"VPDS";
const DATASET_VERSION: u32 = 1;

/// 5x7 bitmap digits, one row per byte, most significant of the low five bits on the left.
const DIGITS_5X7: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Digit(u8),
    Square,
}

impl Glyph {
    /// Whether the glyph covers cell `(row, col)` of a `size x size` box.
    pub fn covers(self, row: usize, col: usize, size: usize) -> bool {
        match self {
            Glyph::Square => true,
            Glyph::Digit(d) => {
                let r = row * 7 / size;
                let c = col * 5 / size;
                DIGITS_5X7[d as usize % 10][r] & (0x10 >> c) != 0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpriteStyle {
    #[default]
    Digits,
    Squares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpriteConfig {
    pub num_sprites: usize,
    /// Side of the square sprite box in pixels.
    pub sprite_size: usize,
    /// Maximum speed in pixels per frame; speeds are drawn from `[speed_range / 2, speed_range]`.
    pub speed_range: f64,
    /// Std-dev (radians) of the direction perturbation applied at each wall contact.
    pub bounce_randomization: f64,
    pub style: SpriteStyle,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self { num_sprites: 2, sprite_size: 9, speed_range: 3.0, bounce_randomization: 0.5, style: SpriteStyle::Digits }
    }
}

/// One sprite: top-left corner and velocity in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub size: usize,
    pub glyph: Glyph,
}

impl Sprite {
    /// Advances one frame, reflecting off the walls of a `hw x hw` frame.
    fn advance<R: Rng>(&mut self, hw: usize, bounce_std: f64, rng: &mut R) {
        let max = (hw - self.size) as f64;
        self.x += self.vx;
        self.y += self.vy;
        // (-1, 0, +1): which wall was hit on each axis
        let hit_x = reflect(&mut self.x, &mut self.vx, max);
        let hit_y = reflect(&mut self.y, &mut self.vy, max);
        if (hit_x != 0 || hit_y != 0) && bounce_std > 0.0 {
            let speed = self.vx.hypot(self.vy);
            let noise: f64 = Normal::new(0.0, bounce_std).expect("finite std").sample(rng);
            let angle = self.vy.atan2(self.vx) + noise;
            self.vx = speed * angle.cos();
            self.vy = speed * angle.sin();
            // never point back into the wall just hit
            if hit_x != 0 {
                self.vx = -(hit_x as f64) * self.vx.abs();
            }
            if hit_y != 0 {
                self.vy = -(hit_y as f64) * self.vy.abs();
            }
        }
        self.x = self.x.clamp(0.0, max);
        self.y = self.y.clamp(0.0, max);
    }

    /// Pixel column / row of the top-left corner.
    pub fn cell(&self) -> (usize, usize) {
        ((self.x + 0.5).floor() as usize, (self.y + 0.5).floor() as usize)
    }

    fn draw(&self, frame: &mut [f32], hw: usize) {
        let (cx, cy) = self.cell();
        for r in 0..self.size {
            for c in 0..self.size {
                if self.glyph.covers(r, c, self.size) {
                    let idx = (cy + r) * hw + cx + c;
                    frame[idx] = frame[idx].max(1.0);
                }
            }
        }
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, max: f64) -> i8 {
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = vel.abs();
        -1
    } else if *pos > max {
        *pos = 2.0 * max - *pos;
        *vel = -vel.abs();
        1
    } else {
        0
    }
}

/// Renders `t` frames of the given sprites, max-blending overlaps.
pub fn simulate_sprites<R: Rng>(sprites: &mut [Sprite], t: usize, hw: usize, bounce_std: f64, rng: &mut R) -> Vec<f32> {
    let mut out = vec![0f32; t * hw * hw];
    for frame in out.chunks_exact_mut(hw * hw) {
        for s in sprites.iter() {
            s.draw(frame, hw);
        }
        for s in sprites.iter_mut() {
            s.advance(hw, bounce_std, rng);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Integer velocities only; frames are exact cyclic shifts of the first.
    #[default]
    Exact,
    /// Fractional velocities allowed; frames are bilinear, wrap-around resamples.
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanConfig {
    /// Texture displacement per frame, `(dx, dy)` in pixels.
    pub velocity: (f64, f64),
    /// Number of sinusoidal components in the texture.
    pub components: usize,
    /// Largest spatial frequency, in cycles per frame width.
    pub max_frequency: i32,
    pub shift: ShiftMode,
}

impl Default for PanConfig {
    fn default() -> Self {
        Self { velocity: (1.0, 0.0), components: 3, max_frequency: 2, shift: ShiftMode::Exact }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    /// `[N, T, C, H, W]`
    pub shape: [usize; 5],
    pub params: serde_json::Value,
    /// Index of each sequence in the dataset it was split from (identity for generated data).
    pub source_indices: Vec<usize>,
}

/// A set of equally shaped sequences, `[N, T, C, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDataset {
    data: Vec<f32>,
    pub meta: DatasetMeta,
}

impl VideoDataset {
    pub fn new(data: Vec<f32>, meta: DatasetMeta) -> Result<Self> {
        let n: usize = meta.shape.iter().product();
        if n != data.len() {
            bail!(Dataset, "shape {:?} needs {n} values, got {}", meta.shape, data.len());
        }
        if meta.source_indices.len() != meta.shape[0] {
            bail!(Dataset, "source index list does not match sequence count");
        }
        Ok(Self { data, meta })
    }

    pub fn len(&self) -> usize {
        self.meta.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames_per_sequence(&self) -> usize {
        self.meta.shape[1]
    }

    pub fn frame_shape(&self) -> FrameShape {
        FrameShape::new(self.meta.shape[2], self.meta.shape[3], self.meta.shape[4])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn seq_len(&self) -> usize {
        self.meta.shape[1..].iter().product()
    }

    pub fn sequence_data(&self, i: usize) -> &[f32] {
        let n = self.seq_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sequence(&self, i: usize) -> FrameSequence {
        FrameSequence::new(self.frame_shape(), self.frames_per_sequence(), self.sequence_data(i).to_vec())
            .expect("dataset shape is consistent")
    }

    /// Frames `start..start + len` of the selected sequences as a `[B, len, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize], start: usize, len: usize, dtype: DType) -> Result<Tensor> {
        let t = self.frames_per_sequence();
        if start + len > t {
            bail!(Dataset, "frames {start}..{} requested from sequences of length {t}", start + len);
        }
        let fs = self.frame_shape();
        let per_frame = fs.len();
        let mut out = Vec::with_capacity(indices.len() * len * per_frame);
        for &i in indices {
            if i >= self.len() {
                bail!(Dataset, "sequence {i} out of range ({} sequences)", self.len());
            }
            let seq = self.sequence_data(i);
            out.extend_from_slice(&seq[start * per_frame..(start + len) * per_frame]);
        }
        Ok(Tensor::from_vec(out, (indices.len(), len, fs.channels, fs.height, fs.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let n = self.seq_len();
        let mut meta = self.meta.clone();
        meta.shape[0] = range.len();
        meta.source_indices = self.meta.source_indices[range.clone()].to_vec();
        Self::new(self.data[range.start * n..range.end * n].to_vec(), meta)
    }

    /// Sidecar path for a dataset file: `foo.vpd` -> `foo.vpd.json`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the tensor file and its metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(4 + 4 + 40 + self.data.len() * 4);
        bytes.extend_from_slice(DATASET_MAGIC);
        bytes.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for d in self.meta.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let digest = hex::encode(Sha256::digest(&bytes));
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::File::create(path)?.write_all(&bytes)?;
        let sidecar = Sidecar { meta: self.meta.clone(), sha256: digest };
        fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        let found = hex::encode(Sha256::digest(&bytes));
        if found != sidecar.sha256 {
            return Err(Error::Checksum { expected: sidecar.sha256, found });
        }
        if bytes.len() < 48 || &bytes[..4] != DATASET_MAGIC {
            bail!(Dataset, "{} is not a dataset file", path.display());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            bail!(Dataset, "unsupported dataset version {version}");
        }
        let mut shape = [0usize; 5];
        for (i, d) in shape.iter_mut().enumerate() {
            *d = u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
        }
        if shape != sidecar.meta.shape {
            bail!(Dataset, "tensor shape {:?} disagrees with metadata {:?}", shape, sidecar.meta.shape);
        }
        let data: Vec<f32> = bytes[48..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(data, sidecar.meta)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    meta: DatasetMeta,
    sha256: String,
}

fn check_sizes(n: usize, t: usize, hw: usize) -> Result<()> {
    if n == 0 || t == 0 || hw == 0 {
        bail!(InvalidArgument, "n, t and hw must be positive (got n={n}, t={t}, hw={hw})");
    }
    if t < 2 {
        bail!(InvalidArgument, "sequences need at least 2 frames, got t={t}");
    }
    if hw < 16 {
        bail!(InvalidArgument, "frames must be at least 16 pixels wide, got {hw}");
    }
    Ok(())
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Grayscale sprites bouncing inside a `hw x hw` frame.
pub fn generate_bouncing_sprites(seed: u64, n: usize, t: usize, hw: usize, cfg: &SpriteConfig) -> Result<VideoDataset> {
    check_sizes(n, t, hw)?;
    if cfg.sprite_size == 0 || cfg.sprite_size >= hw {
        bail!(InvalidArgument, "sprite_size {} must be in 1..{hw}", cfg.sprite_size);
    }
    if !(cfg.speed_range >= 0.0 && cfg.speed_range.is_finite()) {
        bail!(InvalidArgument, "speed_range must be finite and non-negative");
    }
    if !(cfg.bounce_randomization >= 0.0 && cfg.bounce_randomization.is_finite()) {
        bail!(InvalidArgument, "bounce_randomization must be finite and non-negative");
    }
    let mut data = Vec::with_capacity(n * t * hw * hw);
    for i in 0..n {
        let mut rng = sequence_rng(seed, i);
        let max = (hw - cfg.sprite_size) as f64;
        let mut sprites: Vec<Sprite> = (0..cfg.num_sprites)
            .map(|_| {
                let glyph = match cfg.style {
                    SpriteStyle::Digits => Glyph::Digit(rng.random_range(0..10)),
                    SpriteStyle::Squares => Glyph::Square,
                };
                let speed = if cfg.speed_range > 0.0 { rng.random_range(0.5 * cfg.speed_range..=cfg.speed_range) } else { 0.0 };
                let angle = rng.random_range(0.0..2.0 * PI);
                Sprite {
                    x: rng.random_range(0.0..=max),
                    y: rng.random_range(0.0..=max),
                    vx: speed * angle.cos(),
                    vy: speed * angle.sin(),
                    size: cfg.sprite_size,
                    glyph,
                }
            })
            .collect();
        data.extend(simulate_sprites(&mut sprites, t, hw, cfg.bounce_randomization, &mut rng));
    }
    VideoDataset::new(
        data,
        DatasetMeta {
            generator: "bouncing_sprites".into(),
            seed,
            shape: [n, t, 1, hw, hw],
            params: serde_json::to_value(cfg)?,
            source_indices: (0..n).collect(),
        },
    )
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

fn random_texture<R: Rng>(rng: &mut R, hw: usize, cfg: &PanConfig) -> Vec<f32> {
    let f = cfg.max_frequency.max(1);
    let mut waves: Vec<Wave> = (0..cfg.components.max(1))
        .map(|_| {
            let (fx, fy) = loop {
                let fx = rng.random_range(-f..=f);
                let fy = rng.random_range(-f..=f);
                if fx != 0 || fy != 0 {
                    break (fx, fy);
                }
            };
            Wave { fx: fx as f64, fy: fy as f64, phase: rng.random_range(0.0..2.0 * PI), amp: rng.random_range(0.2..1.0) }
        })
        .collect();
    // amplitudes sum to 0.5 so values stay within [0, 1]
    let total: f64 = waves.iter().map(|w| w.amp).sum();
    for w in &mut waves {
        w.amp *= 0.5 / total;
    }
    let mut out = vec![0f32; hw * hw];
    for r in 0..hw {
        for c in 0..hw {
            let v: f64 = waves.iter().map(|w| w.amp * (2.0 * PI * (w.fx * c as f64 + w.fy * r as f64) / hw as f64 + w.phase).sin()).sum();
            out[r * hw + c] = (0.5 + v).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Samples `src` at `(row - dy, col - dx)` with wrap-around; bilinear for fractional shifts.
fn shifted(src: &[f32], hw: usize, dx: f64, dy: f64) -> Vec<f32> {
    let n = hw as f64;
    let mut out = vec![0f32; hw * hw];
    for r in 0..hw {
        for c in 0..hw {
            let sy = (r as f64 - dy).rem_euclid(n);
            let sx = (c as f64 - dx).rem_euclid(n);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as usize % hw, x0 as usize % hw);
            let (y1, x1) = ((y0 + 1) % hw, (x0 + 1) % hw);
            let v = if fx == 0.0 && fy == 0.0 {
                src[y0 * hw + x0] as f64
            } else {
                (1.0 - fy) * ((1.0 - fx) * src[y0 * hw + x0] as f64 + fx * src[y0 * hw + x1] as f64)
                    + fy * ((1.0 - fx) * src[y1 * hw + x0] as f64 + fx * src[y1 * hw + x1] as f64)
            };
            out[r * hw + c] = v as f32;
        }
    }
    out
}

/// A random static texture translated by `cfg.velocity` every frame, wrapping at the borders.
///
/// Frame `t` (zero-based) samples the first frame at `(row - t*dy, col - t*dx)`.
pub fn generate_panning_scene(seed: u64, n: usize, t: usize, hw: usize, cfg: &PanConfig) -> Result<VideoDataset> {
    check_sizes(n, t, hw)?;
    let (vx, vy) = cfg.velocity;
    if !vx.is_finite() || !vy.is_finite() {
        bail!(InvalidArgument, "pan velocity must be finite");
    }
    if cfg.shift == ShiftMode::Exact && (vx.fract() != 0.0 || vy.fract() != 0.0) {
        bail!(InvalidArgument, "exact-shift mode needs an integer pan velocity, got ({vx}, {vy})");
    }
    let mut data = Vec::with_capacity(n * t * hw * hw);
    for i in 0..n {
        let mut rng = sequence_rng(seed, i);
        let base = random_texture(&mut rng, hw, cfg);
        for step in 0..t {
            data.extend(shifted(&base, hw, vx * step as f64, vy * step as f64));
        }
    }
    VideoDataset::new(
        data,
        DatasetMeta {
            generator: "panning_scene".into(),
            seed,
            shape: [n, t, 1, hw, hw],
            params: serde_json::to_value(cfg)?,
            source_indices: (0..n).collect(),
        },
    )
}

/// Order-preserving partition into train / validation / test.
///
/// Sizes are `round(n * ratio)` for train and validation; test takes the rest.
/// A positive ratio that yields no sequences is an error.
pub fn split(dataset: &VideoDataset, ratios: [f64; 3]) -> Result<(VideoDataset, VideoDataset, VideoDataset)> {
    if ratios.iter().any(|r| !(*r >= 0.0)) {
        bail!(InvalidArgument, "split ratios must be non-negative, got {ratios:?}");
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        bail!(InvalidArgument, "split ratios must sum to 1, got {sum}");
    }
    let n = dataset.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, ratio, count) in [("train", ratios[0], n_train), ("val", ratios[1], n_val), ("test", ratios[2], n_test)] {
        if ratio > 0.0 && count == 0 {
            bail!(InvalidArgument, "{name} split with ratio {ratio} is empty for {n} sequences");
        }
    }
    Ok((dataset.subset(0..n_train)?, dataset.subset(n_train..n_train + n_val)?, dataset.subset(n_train + n_val..n)?))
}
