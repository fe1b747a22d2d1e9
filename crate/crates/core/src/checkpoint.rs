//! Self-describing, checksummed checkpoint files.
//!
//! Layout: magic `VPCK`, `u32` version, `u64` header length, JSON header
//! (config snapshot, step, RNG state, tensor manifest), raw little-endian
//! tensor bytes in manifest order, then the SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{bail, Error, Result};
use crate::model::VideoPredictor;
use crate::optim::{Adam, Moments};

pub const MAGIC: &[u8; 4] = b"VPCK";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it does not fit in a JSON number).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: u64,
    optimizer_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Complete training state: parameters, optimizer moments, config, step and RNG.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    Ok(match dtype {
        DType::F32 => "f32",
        DType::F64 => "f64",
        other => bail!(Checkpoint, "unsupported tensor dtype {other:?}"),
    })
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => bail!(Checkpoint, "unsupported tensor dtype {other:?}"),
    })
}

fn tensor_from_bytes(entry: &TensorEntry, bytes: &[u8]) -> Result<Tensor> {
    let dev = &Device::Cpu;
    let n: usize = entry.shape.iter().product();
    let t = match entry.dtype.as_str() {
        "f32" if bytes.len() == 4 * n => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape.as_slice(), dev)?
        }
        "f64" if bytes.len() == 8 * n => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, entry.shape.as_slice(), dev)?
        }
        _ => bail!(Checkpoint, "tensor `{}` has dtype {} and {} bytes for shape {:?}", entry.name, entry.dtype, bytes.len(), entry.shape),
    };
    Ok(t)
}

impl Checkpoint {
    /// Snapshot of a model, its optimizer and the training RNG.
    pub fn capture(config: &RunConfig, step: u64, rng: &ChaCha8Rng, model: &VideoPredictor, optimizer: &Adam) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in model.params().iter() {
            tensors.insert(format!("{PARAM}{name}"), var.as_tensor().detach().copy()?);
        }
        for (name, mo) in optimizer.moments() {
            tensors.insert(format!("{ADAM_M}{name}"), mo.m.copy()?);
            tensors.insert(format!("{ADAM_V}{name}"), mo.v.copy()?);
        }
        let mut config = config.clone();
        config.model = model.config().clone();
        Ok(Self { config, step, optimizer_step: optimizer.step_count(), rng: RngState::capture(rng), tensors })
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Rebuilds the model; the checkpoint's mode must match `expected` when given.
    pub fn restore_model(&self, expected: Option<crate::config::Mode>) -> Result<VideoPredictor> {
        let cfg = &self.config.model;
        if let Some(mode) = expected {
            if mode != cfg.mode {
                bail!(Checkpoint, "checkpoint was trained in mode `{}` and cannot be loaded as a `{}` model", cfg.mode, mode);
            }
        }
        let model = VideoPredictor::new(cfg, 0)?;
        let mut seen = 0;
        for (name, _) in model.params().iter() {
            let Some(t) = self.tensors.get(&format!("{PARAM}{name}")) else {
                bail!(Checkpoint, "parameter `{name}` missing from checkpoint");
            };
            model.params().set(name, t)?;
            seen += 1;
        }
        let stored = self.tensors.keys().filter(|k| k.starts_with(PARAM)).count();
        if stored != seen {
            bail!(Checkpoint, "checkpoint holds {stored} parameters, model has {seen}");
        }
        Ok(model)
    }

    pub fn restore_optimizer(&self, model: &VideoPredictor) -> Result<Adam> {
        let mut moments = BTreeMap::new();
        for (name, _) in model.params().iter() {
            let (Some(m), Some(v)) = (self.tensors.get(&format!("{ADAM_M}{name}")), self.tensors.get(&format!("{ADAM_V}{name}"))) else {
                bail!(Checkpoint, "optimizer moments for `{name}` missing from checkpoint");
            };
            moments.insert(name.clone(), Moments { m: m.clone(), v: v.clone() });
        }
        Adam::from_state(&self.config.optim, model.params(), self.optimizer_step, moments)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: data.len() as u64,
                nbytes: bytes.len() as u64,
            });
            data.extend(bytes);
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            optimizer_step: self.optimizer_step,
            rng: self.rng.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + data.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend(header);
        out.extend(data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses and verifies a checkpoint; nothing is returned unless the checksum matches.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
            bail!(Checkpoint, "not a checkpoint file");
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let found = Sha256::digest(body);
        if found.as_slice() != digest {
            return Err(Error::Checksum { expected: hex::encode(digest), found: hex::encode(found) });
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != VERSION {
            bail!(Checkpoint, "unsupported checkpoint version {version} (expected {VERSION})");
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let Some(header_bytes) = body.get(16..16 + header_len) else {
            bail!(Checkpoint, "truncated header");
        };
        let header: Header = serde_json::from_slice(header_bytes)?;
        let data = &body[16 + header_len..];
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            let (start, len) = (entry.offset as usize, entry.nbytes as usize);
            let Some(chunk) = data.get(start..start + len) else {
                bail!(Checkpoint, "tensor `{}` lies outside the data section", entry.name);
            };
            tensors.insert(entry.name.clone(), tensor_from_bytes(entry, chunk)?);
        }
        Ok(Self { config: header.config, step: header.step, optimizer_step: header.optimizer_step, rng: header.rng, tensors })
    }

    /// Writes through a temporary file so an interrupted save never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Mode, ModelConfig, Precision};
    use rand::RngCore;

    fn config(mode: Mode) -> RunConfig {
        let model = ModelConfig {
            image_size: 16,
            conv_blocks: 2,
            base_channels: 2,
            d_h: 8,
            d_w: 8,
            d_y: 4,
            d_z: 2,
            d_g: 2,
            d_zw: 2,
            rnn_hidden: 8,
            appearance_rnn_hidden: 4,
            mlp_hidden: 8,
            vit_layers: 1,
            vit_heads: 2,
            tf_width: 4,
            tf_layers: 1,
            tf_heads: 2,
            mode,
            precision: Precision::F32,
            ..Default::default()
        };
        RunConfig { model, ..Default::default() }
    }

    fn checkpoint(mode: Mode) -> Checkpoint {
        let cfg = config(mode);
        let model = VideoPredictor::new(&cfg.model, 4).unwrap();
        let adam = Adam::new(&cfg.optim, model.params()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.next_u64();
        Checkpoint::capture(&cfg, 17, &rng, &model, &adam).unwrap()
    }

    #[test]
    fn bytes_round_trip_identically() {
        let ck = checkpoint(Mode::Full);
        let bytes = ck.to_bytes().unwrap();
        let again = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(again.step, 17);
        assert_eq!(again.to_bytes().unwrap(), bytes);
        let model = again.restore_model(Some(Mode::Full)).unwrap();
        let original = ck.restore_model(None).unwrap();
        assert_eq!(model.params().fingerprint().unwrap(), original.params().fingerprint().unwrap());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(9);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = checkpoint(Mode::Full).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum { .. })));
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = checkpoint(Mode::Full).to_bytes().unwrap();
        bytes[4] = 9;
        let n = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn mode_guard() {
        let ck = checkpoint(Mode::NoW);
        let err = ck.restore_model(Some(Mode::Full)).unwrap_err().to_string();
        assert!(err.contains("no_w") && err.contains("full"), "{err}");
        assert!(ck.restore_model(Some(Mode::NoW)).is_ok());
    }

    #[test]
    fn optimizer_state_restores() {
        let ck = checkpoint(Mode::NoZ1);
        let model = ck.restore_model(None).unwrap();
        let adam = ck.restore_optimizer(&model).unwrap();
        assert_eq!(adam.moments().len(), model.params().len());
    }
}
