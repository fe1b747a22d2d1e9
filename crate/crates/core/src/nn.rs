//! Parameter storage and the small set of layers the model is assembled from.
//!
//! Layers keep clones of their parameter tensors. A clone shares storage and
//! identity with the [`Var`] in the [`ParamStore`], so optimizer updates are
//! visible to every layer and gradients can be looked up by variable.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};

/// Named model parameters, ordered by path.
#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameter names under a path prefix (`"global"` matches `"global.proj.weight"`).
    pub fn names_under(&self, prefix: &str) -> Vec<String> {
        let dotted = format!("{prefix}.");
        self.vars.keys().filter(|k| k.starts_with(&dotted) || *k == prefix).cloned().collect()
    }

    /// Top-level path segments, one per module.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = self.vars.keys().map(|k| k.split('.').next().unwrap_or(k).to_string()).collect();
        out.dedup();
        out
    }

    /// Overwrites a parameter in place, keeping its identity.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let Some(var) = self.vars.get(name) else {
            bail!(InvalidArgument, "unknown parameter `{name}`");
        };
        if var.dims() != value.dims() {
            bail!(Shape, "parameter `{name}` has shape {:?}, got {:?}", var.dims(), value.dims());
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Digest of every parameter's name, shape and bytes.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f64> = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Creates parameters with deterministic, seeded initial values.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { store: ParamStore::new(dtype), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.store.vars.contains_key(name) {
            bail!(InvalidArgument, "duplicate parameter `{name}`");
        }
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.store.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, values)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                e * std
            })
            .collect();
        self.insert(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `log(1 + exp(x))`, switching to the identity above 20 to avoid overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let low = x.minimum(20.0)?.exp()?.affine(1.0, 1.0)?.log()?;
    let high = (x - 20.0)?.relu()?;
    Ok((low + high)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Euclidean norm over the last dimension, smoothed so the gradient is finite at zero
/// while the value at zero stays exactly zero.
pub fn smooth_norm_last(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1.0 / (1u64 << 20) as f64;
    Ok(x.sqr()?.sum(D::Minus1)?.affine(1.0, EPS * EPS)?.sqrt()?.affine(1.0, -EPS)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in +-1/sqrt(fan_in) for weights and bias.
    Default,
    /// All zeros; used for residual branches so they start as the identity.
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, path: &str, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        let (weight, bias) = match init {
            Init::Default => {
                let bound = 1.0 / (d_in as f64).sqrt();
                (pb.uniform(&format!("{path}.weight"), &[d_in, d_out], bound)?, pb.uniform(&format!("{path}.bias"), &[d_out], bound)?)
            }
            Init::Zero => {
                (pb.constant(&format!("{path}.weight"), &[d_in, d_out], 0.0)?, pb.constant(&format!("{path}.bias"), &[d_out], 0.0)?)
            }
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies the layer to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let Some((&last, lead)) = dims.split_last() else {
            bail!(Shape, "linear layer needs at least a 1-d input");
        };
        if last != self.in_dim() {
            bail!(Shape, "linear layer expects last dim {}, got {:?}", self.in_dim(), dims);
        }
        let rows: usize = lead.iter().product();
        let y = (x.reshape((rows, last))?.matmul(&self.weight)? + expand_rows(&self.bias, rows)?)?;
        let mut out_dims = lead.to_vec();
        out_dims.push(self.out_dim());
        Ok(y.reshape(out_dims)?)
    }
}

/// Repeats `v` along a new leading axis of length `rows`.
///
/// Same values as `broadcast_as`, but built as a rank-1 matmul so the gradient
/// with respect to `v` is a gemm instead of candle's strided leading-axis sum.
pub fn expand_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    let ones = Tensor::ones((rows, 1), v.dtype(), v.device())?;
    let mut dims = vec![rows];
    dims.extend_from_slice(v.dims());
    Ok(ones.matmul(&v.reshape((1, v.elem_count()))?)?.reshape(dims)?)
}

/// Fully connected stack with SiLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, path: &str, d_in: usize, hidden: &[usize], d_out: usize, last: Init) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = d_in;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(pb, &format!("{path}.{i}"), prev, h, Init::Default)?);
            prev = h;
        }
        layers.push(Linear::new(pb, &format!("{path}.{}", hidden.len()), prev, d_out, last)?);
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < n {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

/// Single-layer LSTM over `[batch, time, features]` inputs.
#[derive(Clone, Debug)]
pub struct Lstm {
    input: Linear,
    w_hh: Tensor,
    hidden: usize,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder, path: &str, d_in: usize, hidden: usize) -> Result<Self> {
        let input = Linear::new(pb, &format!("{path}.ih"), d_in, 4 * hidden, Init::Default)?;
        let w_hh = pb.uniform(&format!("{path}.hh"), &[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt())?;
        Ok(Self { input, w_hh, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Runs the recurrence from a zero state and returns the hidden outputs `[batch, time, hidden]`.
    ///
    /// Output `t` depends on inputs `0..=t` only.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        if t == 0 {
            bail!(Shape, "recurrence over an empty sequence");
        }
        let projected = self.input.forward(x)?;
        let mut h = Tensor::zeros((b, self.hidden), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outputs = Vec::with_capacity(t);
        let n = self.hidden;
        for step in 0..t {
            let gates = (projected.narrow(1, step, 1)?.squeeze(1)? + h.matmul(&self.w_hh)?)?;
            let i = sigmoid(&gates.narrow(1, 0, n)?)?;
            let f = sigmoid(&gates.narrow(1, n, n)?)?;
            let g = gates.narrow(1, 2 * n, n)?.tanh()?;
            let o = sigmoid(&gates.narrow(1, 3 * n, n)?)?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outputs.push(h.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, path: &str, dim: usize) -> Result<Self> {
        Ok(Self { gamma: pb.constant(&format!("{path}.gamma"), &[dim], 1.0)?, beta: pb.constant(&format!("{path}.beta"), &[dim], 0.0)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let rows = x.elem_count() / self.gamma.elem_count();
        let gamma = expand_rows(&self.gamma, rows)?.reshape(x.shape())?;
        let beta = expand_rows(&self.beta, rows)?.reshape(x.shape())?;
        Ok(((normed * gamma)? + beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, path: &str, dim: usize, heads: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            bail!(Config, "attention width {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            q: Linear::new(pb, &format!("{path}.q"), dim, dim, Init::Default)?,
            k: Linear::new(pb, &format!("{path}.k"), dim, dim, Init::Default)?,
            v: Linear::new(pb, &format!("{path}.v"), dim, dim, Init::Default)?,
            out: Linear::new(pb, &format!("{path}.out"), dim, dim, Init::Default)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |t: Tensor| -> Result<Tensor> { Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.out.forward(&mixed)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, path: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(pb, &format!("{path}.ln1"), dim)?,
            attn: MultiHeadAttention::new(pb, &format!("{path}.attn"), dim, heads)?,
            ln2: LayerNorm::new(pb, &format!("{path}.ln2"), dim)?,
            ff_in: Linear::new(pb, &format!("{path}.ff_in"), dim, 2 * dim, Init::Default)?,
            ff_out: Linear::new(pb, &format!("{path}.ff_out"), 2 * dim, dim, Init::Default)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&self.ln2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + ff)?)
    }
}

/// Fixed sinusoidal position encodings, `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut values = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            values.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Ok(Tensor::from_vec(values, (len, dim), device)?.to_dtype(dtype)?)
}
