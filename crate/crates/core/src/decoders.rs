//! Frame and flow decoders, and differentiable backward warping.

use candle_core::{DType, Tensor, D};

use crate::config::ModelConfig;
use crate::conv::conv_transpose4s2;
use crate::encoders::LEAK;
use crate::error::{bail, Result};
use crate::nn::{leaky_relu, sigmoid, smooth_norm_last, Init, Linear, ParamBuilder};

/// 4x4 stride-2 transposed convolution doubling the spatial size.
#[derive(Clone, Debug)]
struct UpConv {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv {
    fn new(pb: &mut ParamBuilder, path: &str, c_in: usize, c_out: usize, init: Init) -> Result<Self> {
        let shape = [c_in, c_out, 4, 4];
        Ok(match init {
            Init::Default => {
                let bound = 1.0 / ((c_out * 16) as f64).sqrt();
                Self {
                    weight: pb.uniform(&format!("{path}.weight"), &shape, bound)?,
                    bias: pb.uniform(&format!("{path}.bias"), &[c_out], bound)?,
                }
            }
            Init::Zero => Self {
                weight: pb.constant(&format!("{path}.weight"), &shape, 0.0)?,
                bias: pb.constant(&format!("{path}.bias"), &[c_out], 0.0)?,
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose4s2(x, &self.weight, &self.bias)
    }
}

/// Mirror of the motion encoder: linear to the bottleneck map, then transposed convolutions.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    proj: Linear,
    blocks: Vec<UpConv>,
    channels: usize,
    size: usize,
}

impl ConvDecoder {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig, d_in: usize, out_channels: usize, last: Init) -> Result<Self> {
        let (channels, size) = (cfg.bottleneck_channels(), cfg.bottleneck_size());
        let proj = Linear::new(pb, &format!("{path}.proj"), d_in, channels * size * size, Init::Default)?;
        let mut blocks = Vec::with_capacity(cfg.conv_blocks);
        for i in (0..cfg.conv_blocks).rev() {
            let c_in = cfg.base_channels << i;
            let (c_out, init) = if i == 0 { (out_channels, last) } else { (cfg.base_channels << (i - 1), Init::Default) };
            blocks.push(UpConv::new(pb, &format!("{path}.up{}", cfg.conv_blocks - 1 - i), c_in, c_out, init)?);
        }
        Ok(Self { proj, blocks, channels, size })
    }

    pub fn in_dim(&self) -> usize {
        self.proj.in_dim()
    }

    /// `[N, d_in] -> [N, out_channels, H, W]` before any output nonlinearity.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(0)?;
        let mut h = leaky_relu(&self.proj.forward(x)?, LEAK)?.reshape((n, self.channels, self.size, self.size))?;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h)?;
            if i < last {
                h = leaky_relu(&h, LEAK)?;
            }
        }
        Ok(h)
    }
}

/// Decodes `[w_t, y_t]` into a frame with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FrameDecoder {
    net: ConvDecoder,
    d_w: usize,
    d_y: usize,
}

impl FrameDecoder {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { net: ConvDecoder::new(pb, path, cfg, cfg.d_w + cfg.d_y, cfg.channels, Init::Default)?, d_w: cfg.d_w, d_y: cfg.d_y })
    }

    /// `w: [N, d_w]`, `y: [N, d_y]` -> `[N, C, H, W]`.
    pub fn forward(&self, w: &Tensor, y: &Tensor) -> Result<Tensor> {
        if w.dims().last() != Some(&self.d_w) || y.dims().last() != Some(&self.d_y) || w.dim(0)? != y.dim(0)? {
            bail!(Shape, "decoder inputs w {:?} and y {:?} do not match ({}, {})", w.dims(), y.dims(), self.d_w, self.d_y);
        }
        sigmoid(&self.net.forward(&Tensor::cat(&[w, y], 1)?)?)
    }
}

/// Decodes a posterior recurrent output into a per-pixel displacement `(dx, dy)` in pixels.
#[derive(Clone, Debug)]
pub struct FlowDecoder {
    net: ConvDecoder,
}

impl FlowDecoder {
    pub fn new(pb: &mut ParamBuilder, path: &str, cfg: &ModelConfig) -> Result<Self> {
        let last = if cfg.zero_init_flow_head { Init::Zero } else { Init::Default };
        Ok(Self { net: ConvDecoder::new(pb, path, cfg, cfg.rnn_hidden, 2, last)? })
    }

    /// `[N, rnn_hidden] -> [N, 2, H, W]`.
    pub fn forward(&self, g: &Tensor) -> Result<Tensor> {
        if g.dims().last() != Some(&self.net.in_dim()) {
            bail!(Shape, "flow decoder input {:?}, expected last dim {}", g.dims(), self.net.in_dim());
        }
        self.net.forward(g)
    }
}

/// Integer corner index and fractional weight along one axis, with border replication.
fn axis_coords(pos: &Tensor, size: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let max = (size - 1) as f64;
    let pos = pos.clamp(0.0, max)?;
    let lo = pos.detach().floor()?.clamp(0.0, (size.max(2) - 2) as f64)?;
    let frac = (&pos - &lo)?;
    let lo_idx = lo.to_dtype(DType::U32)?;
    let hi_idx = if size > 1 { (lo + 1.0)?.to_dtype(DType::U32)? } else { lo_idx.clone() };
    Ok((lo_idx, hi_idx, frac))
}

/// Backward bilinear warp: output pixel `(i, j)` samples `x_prev` at `(i + dy, j + dx)`.
///
/// `flow` is `[N, 2, H, W]` with channel 0 holding `dx`; `x_prev` is `[N, C, H, W]`.
/// Out-of-range positions are clamped to the border.
pub fn warp(flow: &Tensor, x_prev: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x_prev.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if fn_ != n || fc != 2 || fh != h || fw != w {
        bail!(Shape, "flow {:?} does not match frames {:?}", flow.dims(), x_prev.dims());
    }
    let (dtype, dev) = (x_prev.dtype(), x_prev.device());
    let cols = Tensor::arange(0u32, w as u32, dev)?.to_dtype(dtype)?.reshape((1, 1, w))?;
    let rows = Tensor::arange(0u32, h as u32, dev)?.to_dtype(dtype)?.reshape((1, h, 1))?;
    let px = flow.narrow(1, 0, 1)?.squeeze(1)?.broadcast_add(&cols)?;
    let py = flow.narrow(1, 1, 1)?.squeeze(1)?.broadcast_add(&rows)?;
    let (x0, x1, wx) = axis_coords(&px, w)?;
    let (y0, y1, wy) = axis_coords(&py, h)?;

    let src = x_prev.reshape((n, c, h * w))?;
    let width = Tensor::new(w as u32, dev)?;
    let gather = |yi: &Tensor, xi: &Tensor| -> Result<Tensor> {
        let idx = yi.broadcast_mul(&width)?.add(xi)?.reshape((n, 1, h * w))?.broadcast_as((n, c, h * w))?.contiguous()?;
        Ok(src.gather(&idx, 2)?.reshape((n, c, h, w))?)
    };
    let (a, b) = (gather(&y0, &x0)?, gather(&y0, &x1)?);
    let (cc, d) = (gather(&y1, &x0)?, gather(&y1, &x1)?);
    let wx = wx.unsqueeze(1)?;
    let wy = wy.unsqueeze(1)?;
    let top = (&a + (b - &a)?.broadcast_mul(&wx)?)?;
    let bottom = (&cc + (d - &cc)?.broadcast_mul(&wx)?)?;
    Ok((&top + (bottom - &top)?.broadcast_mul(&wy)?)?)
}

/// Sum over time of Euclidean norms of flattened frame differences.
///
/// Inputs are `[..., T, C, H, W]`; the result drops the last four dimensions.
pub fn flow_supervision_loss(x_warped: &Tensor, x_true: &Tensor) -> Result<Tensor> {
    if x_warped.dims() != x_true.dims() {
        bail!(Shape, "warped frames {:?} vs targets {:?}", x_warped.dims(), x_true.dims());
    }
    let dims = x_warped.dims();
    if dims.len() < 4 {
        bail!(Shape, "expected [..., T, C, H, W], got {:?}", dims);
    }
    let mut flat: Vec<usize> = dims[..dims.len() - 3].to_vec();
    flat.push(dims[dims.len() - 3..].iter().product());
    let diff = (x_true - x_warped)?.reshape(flat)?;
    Ok(smooth_norm_last(&diff)?.sum(D::Minus1)?)
}

/// Color-wheel rendering of one flow field `[2, H, W]` (dx then dy) as packed RGB bytes.
///
/// Hue encodes direction, saturation the magnitude relative to the largest in the field.
pub fn flow_to_rgb(flow: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    let n = height * width;
    if flow.len() != 2 * n {
        bail!(Shape, "flow of {} values is not [2, {height}, {width}]", flow.len());
    }
    let (dx, dy) = flow.split_at(n);
    let max = dx.iter().zip(dy).map(|(x, y)| x.hypot(*y)).fold(0f32, f32::max).max(1e-6);
    let mut out = Vec::with_capacity(3 * n);
    for (x, y) in dx.iter().zip(dy) {
        let hue = (y.atan2(*x).to_degrees() + 360.0) % 360.0;
        let sat = (x.hypot(*y) / max).min(1.0);
        let (r, g, b) = hsv_to_rgb(hue, sat, 1.0);
        out.extend([r, g, b]);
    }
    Ok(out)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f32| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    (q(r), q(g), q(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Precision;
    use candle_core::{Device, Var};

    fn cfg() -> ModelConfig {
        ModelConfig { precision: Precision::F64, ..Default::default() }
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    fn constant_flow(n: usize, h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
        let mut v = vec![dx; h * w];
        v.extend(vec![dy; h * w]);
        let one = Tensor::from_vec(v, (1, 2, h, w), &Device::Cpu).unwrap();
        Tensor::cat(&vec![&one; n], 0).unwrap()
    }

    /// Independent per-pixel bilinear sampler with border clamping.
    fn gather_oracle(img: &[f64], h: usize, w: usize, flow: &[f64]) -> Vec<f64> {
        let px = |r: isize, c: isize| -> f64 {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            img[r * w + c]
        };
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let x = (j as f64 + flow[i * w + j]).clamp(0.0, (w - 1) as f64);
                let y = (i as f64 + flow[h * w + i * w + j]).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                out[i * w + j] = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1))
                    + fy * ((1.0 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
            }
        }
        out
    }

    #[test]
    fn zero_flow_is_identity() {
        let x = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let out = warp(&constant_flow(2, 8, 8, 0.0, 0.0), &x).unwrap();
        assert_eq!(flat(&out), flat(&x));
    }

    #[test]
    fn unit_shift_matches_gather_oracle() {
        let x = Tensor::rand(0f64, 1.0, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let out = flat(&warp(&constant_flow(1, 8, 8, 1.0, 0.0), &x).unwrap());
        let img = flat(&x);
        for i in 0..8 {
            for j in 0..8 {
                let src = (j + 1).min(7);
                assert_eq!(out[i * 8 + j], img[i * 8 + src]);
            }
        }
    }

    #[test]
    fn half_pixel_on_two_columns() {
        let x = Tensor::new(&[[[[0.2f64, 0.8], [0.4, 1.0]]]], &Device::Cpu).unwrap();
        let out = flat(&warp(&constant_flow(1, 2, 2, 0.5, 0.0), &x).unwrap());
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[2] - 0.7).abs() < 1e-15);
        // last column clamps to itself
        assert_eq!(out[1], 0.8);
    }

    #[test]
    fn random_flows_match_oracle() {
        let (h, w) = (7, 9);
        let x = Tensor::rand(0f64, 1.0, (1, 1, h, w), &Device::Cpu).unwrap();
        let f = Tensor::randn(0f64, 3.0, (1, 2, h, w), &Device::Cpu).unwrap();
        let got = flat(&warp(&f, &x).unwrap());
        let expect = gather_oracle(&flat(&x), h, w, &flat(&f));
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let (h, w) = (4, 5);
        let x = Var::from_tensor(&Tensor::rand(0f64, 1.0, (1, 1, h, w), &Device::Cpu).unwrap()).unwrap();
        // interior, non-integer positions so the sampler is smooth around them
        let f0: Vec<f64> = (0..2 * h * w).map(|i| 0.3 + 0.37 * ((i * 7 % 5) as f64) / 5.0 - 0.4).collect();
        let f = Var::from_tensor(&Tensor::from_vec(f0.clone(), (1, 2, h, w), &Device::Cpu).unwrap()).unwrap();
        let weights = Tensor::rand(0f64, 1.0, (1, 1, h, w), &Device::Cpu).unwrap();
        let loss = |f: &Tensor, x: &Tensor| -> f64 { (warp(f, x).unwrap() * &weights).unwrap().sum_all().unwrap().to_scalar().unwrap() };
        let out = (warp(f.as_tensor(), x.as_tensor()).unwrap() * &weights).unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        let gf = flat(grads.get(f.as_tensor()).unwrap());
        let gx = flat(grads.get(x.as_tensor()).unwrap());
        let eps = 1e-6;
        for i in 0..f0.len() {
            let mut hi = f0.clone();
            let mut lo = f0.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let hi = Tensor::from_vec(hi, (1, 2, h, w), &Device::Cpu).unwrap();
            let lo = Tensor::from_vec(lo, (1, 2, h, w), &Device::Cpu).unwrap();
            let num = (loss(&hi, x.as_tensor()) - loss(&lo, x.as_tensor())) / (2.0 * eps);
            assert!((num - gf[i]).abs() < 1e-6, "flow {i}: {num} vs {}", gf[i]);
        }
        let x0 = flat(x.as_tensor());
        for i in 0..x0.len() {
            let mut hi = x0.clone();
            let mut lo = x0.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let hi = Tensor::from_vec(hi, (1, 1, h, w), &Device::Cpu).unwrap();
            let lo = Tensor::from_vec(lo, (1, 1, h, w), &Device::Cpu).unwrap();
            let num = (loss(f.as_tensor(), &hi) - loss(f.as_tensor(), &lo)) / (2.0 * eps);
            assert!((num - gx[i]).abs() < 1e-6, "pixel {i}: {num} vs {}", gx[i]);
        }
    }

    #[test]
    fn warp_rejects_mismatched_shapes() {
        let x = Tensor::zeros((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(warp(&constant_flow(1, 4, 4, 0.0, 0.0), &x).is_err());
    }

    #[test]
    fn frame_decoder_range_and_shape() {
        let c = cfg();
        let mut pb = ParamBuilder::new(DType::F64, 0);
        let dec = FrameDecoder::new(&mut pb, "dec", &c).unwrap();
        let w = Tensor::randn(0f64, 10.0, (3, c.d_w), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 10.0, (3, c.d_y), &Device::Cpu).unwrap();
        let x = dec.forward(&w, &y).unwrap();
        assert_eq!(x.dims(), &[3, 1, 32, 32]);
        assert!(flat(&x).iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(flat(&dec.forward(&w, &y).unwrap()), flat(&x));
        assert!(dec.forward(&y, &w).is_err());
    }

    #[test]
    fn frame_decoder_gradient_in_y() {
        let c = ModelConfig { image_size: 8, conv_blocks: 2, base_channels: 2, d_w: 3, d_y: 2, ..cfg() };
        let mut pb = ParamBuilder::new(DType::F64, 5);
        let dec = FrameDecoder::new(&mut pb, "dec", &c).unwrap();
        let w = Tensor::randn(0f64, 1.0, (1, 3), &Device::Cpu).unwrap();
        let y0 = vec![0.3f64, -0.6];
        let pixel = |y: &[f64]| -> Tensor {
            let y = Tensor::from_slice(y, (1, 2), &Device::Cpu).unwrap();
            dec.forward(&w, &y).unwrap().flatten_all().unwrap().narrow(0, 27, 1).unwrap().sum_all().unwrap()
        };
        let y = Var::new(&[[0.3f64, -0.6]], &Device::Cpu).unwrap();
        let out = dec.forward(&w, y.as_tensor()).unwrap().flatten_all().unwrap().narrow(0, 27, 1).unwrap().sum_all().unwrap();
        let g = flat(out.backward().unwrap().get(y.as_tensor()).unwrap());
        let eps = 1e-6;
        let num: Vec<f64> = (0..2)
            .map(|i| {
                let mut hi = y0.clone();
                let mut lo = y0.clone();
                hi[i] += eps;
                lo[i] -= eps;
                (pixel(&hi).to_scalar::<f64>().unwrap() - pixel(&lo).to_scalar::<f64>().unwrap()) / (2.0 * eps)
            })
            .collect();
        let diff = ((g[0] - num[0]).powi(2) + (g[1] - num[1]).powi(2)).sqrt();
        let scale = (g[0].powi(2) + g[1].powi(2)).sqrt().max((num[0].powi(2) + num[1].powi(2)).sqrt());
        assert!(diff / scale < 1e-4, "{g:?} vs {num:?}");
    }

    #[test]
    fn flow_decoder_zero_init() {
        let c = cfg();
        let mut pb = ParamBuilder::new(DType::F64, 0);
        let dec = FlowDecoder::new(&mut pb, "flow", &c).unwrap();
        let g = Tensor::randn(0f64, 1.0, (2, c.rnn_hidden), &Device::Cpu).unwrap();
        let f = dec.forward(&g).unwrap();
        assert_eq!(f.dims(), &[2, 2, 32, 32]);
        assert!(flat(&f).iter().all(|v| *v == 0.0));

        let c = ModelConfig { zero_init_flow_head: false, ..cfg() };
        let mut pb = ParamBuilder::new(DType::F64, 0);
        let dec = FlowDecoder::new(&mut pb, "flow", &c).unwrap();
        let f = dec.forward(&g).unwrap();
        assert!(flat(&f).iter().any(|v| *v != 0.0));
        assert_eq!(flat(&dec.forward(&g).unwrap()), flat(&f));
    }

    #[test]
    fn flow_loss_examples() {
        let x = Tensor::rand(0f64, 1.0, (3, 1, 4, 4), &Device::Cpu).unwrap();
        let l: f64 = flow_supervision_loss(&x, &x).unwrap().to_scalar().unwrap();
        assert_eq!(l, 0.0);
        let mut v = flat(&x);
        v[5] += 0.6;
        let y = Tensor::from_vec(v, (3, 1, 4, 4), &Device::Cpu).unwrap();
        let l: f64 = flow_supervision_loss(&y, &x).unwrap().to_scalar().unwrap();
        assert!((l - 0.6).abs() < 1e-5);

        let a = Tensor::rand(0f64, 1.0, (2, 1, 4, 4), &Device::Cpu).unwrap();
        let b = Tensor::rand(0f64, 1.0, (2, 1, 4, 4), &Device::Cpu).unwrap();
        let total: f64 = flow_supervision_loss(&a, &b).unwrap().to_scalar().unwrap();
        let parts: f64 = (0..2)
            .map(|t| flow_supervision_loss(&a.narrow(0, t, 1).unwrap(), &b.narrow(0, t, 1).unwrap()).unwrap().to_scalar::<f64>().unwrap())
            .sum();
        assert!((total - parts).abs() < 1e-12);
        assert!(flow_supervision_loss(&a, &x).is_err());
    }

    #[test]
    fn flow_colors() {
        let rgb = flow_to_rgb(&[0.0, 1.0, 0.0, 0.0], 1, 2).unwrap();
        assert_eq!(&rgb[0..3], &[255, 255, 255]);
        assert_eq!(&rgb[3..6], &[255, 0, 0]);
        assert!(flow_to_rgb(&[0.0; 3], 1, 2).is_err());
    }
}
