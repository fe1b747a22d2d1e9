//! Scalar re-implementation of the training forward pass.
//!
//! Reads weights by name from a parameter store and recomputes every loss
//! term with plain loops over `f64`, sharing no code with the tensor model.
//! Layer counts are discovered from the stored names; head counts, patch size
//! and pooling come from the config since they leave no trace in the weights.

use vidpred_core::config::{AppearanceSource, Pooling};
use vidpred_core::nn::ParamStore;
use vidpred_core::{LossConfig, ModelConfig};

pub struct Weights<'a>(pub &'a ParamStore);

impl Weights<'_> {
    pub fn has(&self, name: &str) -> bool {
        self.0.get(name).is_some()
    }

    pub fn get(&self, name: &str) -> (Vec<usize>, Vec<f64>) {
        let var = self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let t = var.as_tensor().to_dtype(candle_core::DType::F64).unwrap();
        (t.dims().to_vec(), t.flatten_all().unwrap().to_vec1().unwrap())
    }
}

type Vector = Vec<f64>;

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.2 * v
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn smooth_norm(v: &[f64]) -> f64 {
    let eps = 2f64.powi(-20);
    (v.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt() - eps
}

fn cat(parts: &[&[f64]]) -> Vector {
    parts.concat()
}

fn linear(p: &Weights, path: &str, x: &[f64]) -> Vector {
    let (ws, w) = p.get(&format!("{path}.weight"));
    let (_, b) = p.get(&format!("{path}.bias"));
    let (d_in, d_out) = (ws[0], ws[1]);
    assert_eq!(x.len(), d_in, "{path}");
    (0..d_out).map(|o| b[o] + (0..d_in).map(|i| x[i] * w[i * d_out + o]).sum::<f64>()).collect()
}

fn mlp(p: &Weights, path: &str, x: &[f64]) -> Vector {
    let mut n = 0;
    while p.has(&format!("{path}.{n}.weight")) {
        n += 1;
    }
    let mut h = x.to_vec();
    for i in 0..n {
        h = linear(p, &format!("{path}.{i}"), &h);
        if i + 1 < n {
            h.iter_mut().for_each(|v| *v = silu(*v));
        }
    }
    h
}

/// `(mean, scale)` of a Gaussian head.
pub fn gaussian_head(p: &Weights, path: &str, x: &[f64]) -> (Vector, Vector) {
    let out = mlp(p, path, x);
    let d = out.len() / 2;
    (out[..d].to_vec(), out[d..].iter().map(|v| softplus(*v) + 1e-4).collect())
}

pub fn kl(q: &(Vector, Vector), p: &(Vector, Vector)) -> f64 {
    (0..q.0.len())
        .map(|i| {
            let (mq, sq, mp, sp) = (q.0[i], q.1[i], p.0[i], p.1[i]);
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

fn lstm(p: &Weights, path: &str, xs: &[Vector]) -> Vec<Vector> {
    let (hs, hh) = p.get(&format!("{path}.hh"));
    let n = hs[0];
    let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::new();
    for x in xs {
        let mut gates = linear(p, &format!("{path}.ih"), x);
        for (j, g) in gates.iter_mut().enumerate() {
            *g += (0..n).map(|i| h[i] * hh[i * 4 * n + j]).sum::<f64>();
        }
        for u in 0..n {
            let (i, f) = (sigmoid(gates[u]), sigmoid(gates[n + u]));
            let (g, o) = (gates[2 * n + u].tanh(), sigmoid(gates[3 * n + u]));
            c[u] = f * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn layer_norm(p: &Weights, path: &str, x: &[f64]) -> Vector {
    let (_, gamma) = p.get(&format!("{path}.gamma"));
    let (_, beta) = p.get(&format!("{path}.beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i]).collect()
}

fn attention(p: &Weights, path: &str, xs: &[Vector], heads: usize) -> Vec<Vector> {
    let q: Vec<Vector> = xs.iter().map(|x| linear(p, &format!("{path}.q"), x)).collect();
    let k: Vec<Vector> = xs.iter().map(|x| linear(p, &format!("{path}.k"), x)).collect();
    let v: Vec<Vector> = xs.iter().map(|x| linear(p, &format!("{path}.v"), x)).collect();
    let d = xs[0].len();
    let hd = d / heads;
    let mut mixed = vec![vec![0.0; d]; xs.len()];
    for head in 0..heads {
        let r = head * hd..(head + 1) * hd;
        for (a, row) in mixed.iter_mut().enumerate() {
            let scores: Vec<f64> = (0..xs.len()).map(|b| r.clone().map(|i| q[a][i] * k[b][i]).sum::<f64>() / (hd as f64).sqrt()).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (b, eb) in e.iter().enumerate() {
                for i in r.clone() {
                    row[i] += eb / z * v[b][i];
                }
            }
        }
    }
    mixed.iter().map(|m| linear(p, &format!("{path}.out"), m)).collect()
}

fn transformer(p: &Weights, path: &str, mut xs: Vec<Vector>, heads: usize) -> Vec<Vector> {
    let mut i = 0;
    while p.has(&format!("{path}.block{i}.ln1.gamma")) {
        let b = format!("{path}.block{i}");
        let normed: Vec<Vector> = xs.iter().map(|x| layer_norm(p, &format!("{b}.ln1"), x)).collect();
        let attn = attention(p, &format!("{b}.attn"), &normed, heads);
        for (x, a) in xs.iter_mut().zip(&attn) {
            x.iter_mut().zip(a).for_each(|(v, d)| *v += d);
            let mut ff = linear(p, &format!("{b}.ff_in"), &layer_norm(p, &format!("{b}.ln2"), x));
            ff.iter_mut().for_each(|v| *v = gelu(*v));
            let ff = linear(p, &format!("{b}.ff_out"), &ff);
            x.iter_mut().zip(&ff).for_each(|(v, d)| *v += d);
        }
        i += 1;
    }
    xs.iter().map(|x| layer_norm(p, &format!("{path}.norm"), x)).collect()
}

/// Image as `(channels, height, width, values)`.
type Image = (usize, usize, usize, Vector);

fn conv_down(p: &Weights, path: &str, x: &Image) -> Image {
    let (ws, w) = p.get(&format!("{path}.weight"));
    let (_, b) = p.get(&format!("{path}.bias"));
    let (co, ci) = (ws[0], ws[1]);
    let (c, h, wd, v) = x;
    assert_eq!(*c, ci);
    let (ho, wo) = (h / 2, wd / 2);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[o];
                for cc in 0..ci {
                    for ki in 0..4 {
                        for kj in 0..4 {
                            let (r, s) = ((2 * i + ki) as isize - 1, (2 * j + kj) as isize - 1);
                            if r >= 0 && s >= 0 && (r as usize) < *h && (s as usize) < *wd {
                                acc += v[(cc * h + r as usize) * wd + s as usize] * w[((o * ci + cc) * 4 + ki) * 4 + kj];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    (co, ho, wo, out)
}

fn conv_up(p: &Weights, path: &str, x: &Image) -> Image {
    let (ws, w) = p.get(&format!("{path}.weight"));
    let (_, b) = p.get(&format!("{path}.bias"));
    let (ci, co) = (ws[0], ws[1]);
    let (c, h, wd, v) = x;
    assert_eq!(*c, ci);
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out: Vector = (0..co * ho * wo).map(|idx| b[idx / (ho * wo)]).collect();
    for cc in 0..ci {
        for i in 0..*h {
            for j in 0..*wd {
                let xv = v[(cc * h + i) * wd + j];
                for o in 0..co {
                    for ki in 0..4 {
                        for kj in 0..4 {
                            let (r, s) = ((2 * i + ki) as isize - 1, (2 * j + kj) as isize - 1);
                            if r >= 0 && s >= 0 && (r as usize) < ho && (s as usize) < wo {
                                out[(o * ho + r as usize) * wo + s as usize] += xv * w[((cc * co + o) * 4 + ki) * 4 + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (co, ho, wo, out)
}

fn motion_encode(p: &Weights, cfg: &ModelConfig, frame: &[f64]) -> Vector {
    let s = cfg.image_size;
    let mut img: Image = (cfg.channels, s, s, frame.to_vec());
    let mut i = 0;
    while p.has(&format!("motion_encoder.conv{i}.weight")) {
        img = conv_down(p, &format!("motion_encoder.conv{i}"), &img);
        img.3.iter_mut().for_each(|v| *v = leaky(*v));
        i += 1;
    }
    linear(p, "motion_encoder.proj", &img.3)
}

fn appearance_encode(p: &Weights, cfg: &ModelConfig, frame: &[f64]) -> Vector {
    let (s, ps, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let grid = s / ps;
    let (_, token) = p.get("appearance_encoder.token");
    let (_, pos) = p.get("appearance_encoder.positions");
    let mut tokens = vec![token];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut patch = Vec::with_capacity(c * ps * ps);
            for cc in 0..c {
                for py in 0..ps {
                    for px in 0..ps {
                        patch.push(frame[(cc * s + gy * ps + py) * s + gx * ps + px]);
                    }
                }
            }
            tokens.push(linear(p, "appearance_encoder.patch_embed", &patch));
        }
    }
    let d = cfg.d_w;
    for (n, t) in tokens.iter_mut().enumerate() {
        t.iter_mut().enumerate().for_each(|(i, v)| *v += pos[n * d + i]);
    }
    transformer(p, "appearance_encoder", tokens, cfg.vit_heads).swap_remove(0)
}

fn sinusoid(pos: usize, i: usize, dim: usize) -> f64 {
    let angle = pos as f64 * 10000f64.powf(-((i - i % 2) as f64) / dim as f64);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Global-latent Gaussian from a feature sequence.
pub fn global(p: &Weights, cfg: &ModelConfig, hs: &[Vector]) -> (Vector, Vector) {
    let width = cfg.tf_width;
    let mut tokens: Vec<Vector> = hs.iter().map(|h| linear(p, "global.input", h)).collect();
    if cfg.pooling == Pooling::SummaryToken {
        tokens.insert(0, p.get("global.summary").1);
    }
    for (n, t) in tokens.iter_mut().enumerate() {
        t.iter_mut().enumerate().for_each(|(i, v)| *v += sinusoid(n, i, width));
    }
    let out = transformer(p, "global", tokens, cfg.tf_heads);
    let pooled = match cfg.pooling {
        Pooling::SummaryToken => out[0].clone(),
        Pooling::Mean => (0..width).map(|i| out.iter().map(|t| t[i]).sum::<f64>() / out.len() as f64).collect(),
    };
    gaussian_head(p, "global.head", &pooled)
}

fn decode(p: &Weights, path: &str, cfg: &ModelConfig, input: &[f64]) -> Image {
    let (ch, s) = (cfg.base_channels << (cfg.conv_blocks - 1), cfg.image_size >> cfg.conv_blocks);
    let mut v = linear(p, &format!("{path}.proj"), input);
    v.iter_mut().for_each(|x| *x = leaky(*x));
    let mut img: Image = (ch, s, s, v);
    let mut j = 0;
    while p.has(&format!("{path}.up{j}.weight")) {
        if j > 0 {
            img.3.iter_mut().for_each(|x| *x = leaky(*x));
        }
        img = conv_up(p, &format!("{path}.up{j}"), &img);
        j += 1;
    }
    img
}

/// Bilinear backward warp with border clamping, one output pixel at a time.
pub fn warp(flow: &[f64], prev: &[f64], c: usize, h: usize, w: usize) -> Vector {
    let mut out = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let px = (j as f64 + flow[i * w + j]).clamp(0.0, (w - 1) as f64);
            let py = (i as f64 + flow[h * w + i * w + j]).clamp(0.0, (h - 1) as f64);
            let x0 = (px.floor() as usize).min(w.saturating_sub(2));
            let y0 = (py.floor() as usize).min(h.saturating_sub(2));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (px - x0 as f64, py - y0 as f64);
            for cc in 0..c {
                let at = |y: usize, x: usize| prev[(cc * h + y) * w + x];
                out[(cc * h + i) * w + j] =
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct Terms {
    pub recon_nll: f64,
    pub kl_y1: f64,
    pub kl_z_local: f64,
    pub kl_z1: Option<f64>,
    pub flow_l2: f64,
    pub appearance_l2: Option<f64>,
}

impl Terms {
    pub fn total(&self, w: &LossConfig) -> f64 {
        self.recon_nll
            + w.kl_y1 * self.kl_y1
            + w.kl_z_local * self.kl_z_local
            + w.kl_z1 * self.kl_z1.unwrap_or(0.0)
            + w.flow * self.flow_l2
            + w.appearance * self.appearance_l2.unwrap_or(0.0)
    }
}

/// Noise for one sequence, laid out like the model's draws.
pub struct SequenceNoise<'a> {
    pub y1: &'a [f64],
    pub z1: Option<&'a [f64]>,
    /// `[T - 1][d_z]` flattened.
    pub z: &'a [f64],
}

/// Loss terms of one sequence `x: [T, C, H, W]` (flattened).
pub fn sequence_terms(p: &Weights, cfg: &ModelConfig, x: &[f64], t: usize, k: usize, noise: &SequenceNoise, sigma: f64) -> Terms {
    let (c, s) = (cfg.channels, cfg.image_size);
    let px = c * s * s;
    let frame = |i: usize| &x[i * px..(i + 1) * px];
    let sample = |d: &(Vector, Vector), e: &[f64]| -> Vector { (0..d.0.len()).map(|i| d.0[i] + d.1[i] * e[i]).collect() };

    let hm: Vec<Vector> = (0..t).map(|i| motion_encode(p, cfg, frame(i))).collect();
    let g = lstm(p, "posterior_rnn", &hm);
    let q_y1 = gaussian_head(p, "initial_posterior", &cat(&[&hm[0], &hm[1]]));
    let mut terms = Terms { kl_y1: kl(&q_y1, &(vec![0.0; cfg.d_y], vec![1.0; cfg.d_y])), ..Default::default() };
    let mut y = vec![sample(&q_y1, noise.y1)];

    let z1 = noise.z1.map(|e| {
        let q = global(p, cfg, &hm);
        let prior = global(p, cfg, &hm[..k]);
        terms.kl_z1 = Some(kl(&q, &prior));
        sample(&q, e)
    });
    for step in 1..t {
        let q = gaussian_head(p, "local_posterior", &g[step]);
        let prior = gaussian_head(p, "local_prior", &y[step - 1]);
        terms.kl_z_local += kl(&q, &prior);
        let z = sample(&q, &noise.z[(step - 1) * cfg.d_z..step * cfg.d_z]);
        let prev = &y[step - 1];
        let input = match &z1 {
            Some(z1) => cat(&[prev, &z, z1]),
            None => cat(&[prev, &z]),
        };
        let delta = mlp(p, "motion_transition", &input);
        y.push(prev.iter().zip(&delta).map(|(a, b)| a + b).collect());
    }

    let hw: Vec<Vector> = (0..t).map(|i| appearance_encode(p, cfg, frame(i))).collect();
    let w: Vec<Vector> = if p.has("appearance_rnn.head.weight") {
        let a = lstm(p, "appearance_rnn.lstm", &hw);
        let mut w = vec![hw[0].clone()];
        let mut app = 0.0;
        for step in 1..t {
            let tilde = linear(p, "appearance_rnn.head", &a[step]);
            let pred = mlp(p, "appearance_predictor", &w[step - 1]);
            app += smooth_norm(&tilde.iter().zip(&pred).map(|(a, b)| a - b).collect::<Vec<_>>());
            let delta = mlp(p, "appearance_transition", &cat(&[&w[step - 1], &tilde]));
            w.push(w[step - 1].iter().zip(&delta).map(|(a, b)| a + b).collect());
        }
        terms.appearance_l2 = Some(app);
        match cfg.appearance_source {
            AppearanceSource::Chain => w,
            AppearanceSource::Reencoded => hw.clone(),
        }
    } else {
        vec![hw[0].clone(); t]
    };

    let log_norm = px as f64 * (sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    for i in 0..t {
        let (_, _, _, logits) = decode(p, "frame_decoder", cfg, &cat(&[&w[i], &y[i]]));
        let sse: f64 = logits.iter().zip(frame(i)).map(|(l, v)| (sigmoid(*l) - v).powi(2)).sum();
        terms.recon_nll += sse / (2.0 * sigma * sigma) + log_norm;
    }
    for (step, g_t) in g.iter().enumerate().take(t).skip(1) {
        let (_, _, _, flow) = decode(p, "flow_decoder", cfg, g_t);
        let warped = warp(&flow, frame(step - 1), c, s, s);
        let diff: Vector = frame(step).iter().zip(&warped).map(|(a, b)| a - b).collect();
        terms.flow_l2 += smooth_norm(&diff);
    }
    terms
}

/// Batch-averaged terms for `x: [B, T, C, H, W]` and noise drawn as `(y1 [B, d_y], z1 [B, d_g], z [B, T-1, d_z])`.
#[allow(clippy::too_many_arguments)]
pub fn batch_terms(
    p: &Weights,
    cfg: &ModelConfig,
    x: &[f64],
    b: usize,
    t: usize,
    k: usize,
    y1: &[f64],
    z1: Option<&[f64]>,
    z: &[f64],
    sigma: f64,
) -> Terms {
    let per = x.len() / b;
    let steps = (t - 1) * cfg.d_z;
    let all: Vec<Terms> = (0..b)
        .map(|i| {
            let noise = SequenceNoise {
                y1: &y1[i * cfg.d_y..(i + 1) * cfg.d_y],
                z1: z1.map(|v| &v[i * cfg.d_g..(i + 1) * cfg.d_g]),
                z: &z[i * steps..(i + 1) * steps],
            };
            sequence_terms(p, cfg, &x[i * per..(i + 1) * per], t, k, &noise, sigma)
        })
        .collect();
    let mean = |f: &dyn Fn(&Terms) -> f64| all.iter().map(f).sum::<f64>() / b as f64;
    Terms {
        recon_nll: mean(&|t| t.recon_nll),
        kl_y1: mean(&|t| t.kl_y1),
        kl_z_local: mean(&|t| t.kl_z_local),
        kl_z1: all[0].kl_z1.map(|_| mean(&|t| t.kl_z1.unwrap())),
        flow_l2: mean(&|t| t.flow_l2),
        appearance_l2: all[0].appearance_l2.map(|_| mean(&|t| t.appearance_l2.unwrap())),
    }
}
