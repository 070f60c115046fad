//! One decoder layer: self-attention, in-box multi-level sampling, static
//! mixing and a box-delta head.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{DecoderConfig, FeaturePyramid};
use crate::geometry::apply_box_delta_tensor;
use crate::tensor::{ParamId, ParamStore, Result, Tape, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w).expect("shape")),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.linear(x, &store.bind(tape, self.weight), &store.bind(tape, self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    fn forward(&self, store: &ParamStore, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let n = tape.layer_norm(x, LN_EPS)?;
        tape.add(&tape.mul(&n, &store.bind(tape, self.gain))?, &store.bind(tape, self.bias))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub points: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm1: Norm,
    offsets: Linear,
    level_logits: Linear,
    mix1: Linear,
    mix2: Linear,
    norm2: Norm,
    delta1: Linear,
    pub delta2: Linear,
}

/// Offset-head bias placing the initial sampling points on two rings inside
/// the box, in pre-tanh units.
fn ring_bias(points: usize) -> Vec<f64> {
    let mut xs = Vec::with_capacity(points);
    let mut ys = Vec::with_capacity(points);
    for s in 0..points {
        let angle = std::f64::consts::TAU * s as f64 / points as f64;
        let radius = if s % 2 == 0 { 0.35 } else { 0.7 };
        xs.push((radius * angle.cos()).atanh());
        ys.push((radius * angle.sin()).atanh());
    }
    xs.extend(ys);
    xs
}

impl LayerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &DecoderConfig, points: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let m = cfg.mix_channels;
        let mut lin = |store: &mut ParamStore, name: &str, i, o| Linear::new(store, &format!("{prefix}.{name}"), i, o, rng);
        let query = lin(store, "attn.query", d, d);
        let key = lin(store, "attn.key", d, d);
        let value = lin(store, "attn.value", d, d);
        let out = lin(store, "attn.out", d, d);
        let norm1 = Norm::new(store, &format!("{prefix}.norm1"), d);
        let offsets = lin(store, "sampling.offsets", d, 2 * points);
        store.set(offsets.bias, Tensor::vector(ring_bias(points)));
        let level_logits = lin(store, "sampling.levels", d, points * cfg.levels);
        let mix1 = lin(store, "mixing.channel", d, m);
        let mix2 = lin(store, "mixing.points", points * m, d);
        let norm2 = Norm::new(store, &format!("{prefix}.norm2"), d);
        let delta1 = lin(store, "delta.hidden", d, d);
        let delta2 = Linear::zeros(store, &format!("{prefix}.delta.out"), d, 4);
        Self {
            points,
            query,
            key,
            value,
            out,
            norm1,
            offsets,
            level_logits,
            mix1,
            mix2,
            norm2,
            delta1,
            delta2,
        }
    }

    /// Applies the layer to content `q` (`N x D`) and position `p` (`N x 4`).
    /// `p` is used as given; callers detach it when required.
    pub fn forward(
        &self,
        store: &ParamStore,
        cfg: &DecoderConfig,
        tape: &Tape,
        x: &FeaturePyramid,
        q: &Tensor,
        p: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let n = q.shape()[0];
        let d = cfg.d_model;
        let s = self.points;

        // self-attention with a positional embedding on queries and keys
        let pe = positional_embedding(tape, p, cfg)?;
        let qk_in = tape.add(q, &pe)?;
        let qq = self.query.forward(store, tape, &qk_in)?;
        let kk = self.key.forward(store, tape, &qk_in)?;
        let vv = self.value.forward(store, tape, q)?;
        let dh = d / cfg.heads;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice(&qq, 1, h * dh, dh)?;
            let kh = tape.slice(&kk, 1, h * dh, dh)?;
            let vh = tape.slice(&vv, 1, h * dh, dh)?;
            let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, 1.0 / (dh as f64).sqrt())?;
            heads.push(tape.matmul(&tape.softmax(&scores, 1)?, &vh)?);
        }
        let attn = self.out.forward(store, tape, &tape.concat(&heads.iter().collect::<Vec<_>>(), 1)?)?;
        let q1 = self.norm1.forward(store, tape, &tape.add(q, &attn)?)?;

        // sampling points inside the decoded box
        let ln2 = std::f64::consts::LN_2;
        let col = |i| tape.slice(p, 1, i, 1);
        let (cx, cy, z, r) = (col(0)?, col(1)?, col(2)?, col(3)?);
        let half_r = tape.scale(&r, 0.5)?;
        let half_w = tape.scale(&tape.exp(&tape.scale(&tape.sub(&z, &half_r)?, ln2)?)?, 0.5)?;
        let half_h = tape.scale(&tape.exp(&tape.scale(&tape.add(&z, &half_r)?, ln2)?)?, 0.5)?;
        let offsets = tape.tanh(&self.offsets.forward(store, tape, &q1)?)?;
        let px = tape.add(&cx, &tape.mul(&tape.slice(&offsets, 1, 0, s)?, &half_w)?)?;
        let py = tape.add(&cy, &tape.mul(&tape.slice(&offsets, 1, s, s)?, &half_h)?)?;
        let px = tape.reshape(&px, &[n * s, 1])?;
        let py = tape.reshape(&py, &[n * s, 1])?;
        let levels = x.levels.len();
        let weights = tape.reshape(&self.level_logits.forward(store, tape, &q1)?, &[n * s, levels])?;
        let weights = tape.softmax(&weights, 1)?;
        let mut sampled: Option<Tensor> = None;
        for (l, map) in x.levels.iter().enumerate() {
            let inv = 1.0 / (1u64 << l) as f64;
            let gx = tape.shift(&tape.scale(&px, inv)?, -0.5)?;
            let gy = tape.shift(&tape.scale(&py, inv)?, -0.5)?;
            let pts = tape.concat(&[&gx, &gy], 1)?;
            let v = tape.mul(&tape.bilinear_sample(map, &pts)?, &tape.slice(&weights, 1, l, 1)?)?;
            sampled = Some(match sampled {
                None => v,
                Some(acc) => tape.add(&acc, &v)?,
            });
        }
        let sampled = sampled.expect("at least one level");

        // static mixing over channels, then over points
        let m1 = tape.gelu(&self.mix1.forward(store, tape, &sampled)?)?;
        let m1 = tape.reshape(&m1, &[n, s * cfg.mix_channels])?;
        let mixed = self.mix2.forward(store, tape, &m1)?;
        let q2 = self.norm2.forward(store, tape, &tape.add(&q1, &mixed)?)?;

        let hidden = tape.gelu(&self.delta1.forward(store, tape, &q2)?)?;
        let delta = self.delta2.forward(store, tape, &hidden)?;
        let p2 = apply_box_delta_tensor(tape, p, &delta)?;
        Ok((q2, p2))
    }
}

/// Sinusoidal embedding of `(x / W, y / H, z / log2(max side), r / 2)`,
/// `D / 8` frequencies per coordinate, sines then cosines.
fn positional_embedding(tape: &Tape, p: &Tensor, cfg: &DecoderConfig) -> Result<Tensor> {
    let f = cfg.d_model / 8;
    let (h, w) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let scales = [1.0 / w, 1.0 / h, 1.0 / h.max(w).log2().max(1.0), 0.5];
    let mut proj = vec![0.0; 4 * 4 * f];
    for c in 0..4 {
        for j in 0..f {
            let omega = std::f64::consts::PI * 2f64.powf(4.0 * j as f64 / f as f64);
            proj[c * 4 * f + c * f + j] = omega * scales[c];
        }
    }
    let angles = tape.matmul(p, &Tensor::new(vec![4, 4 * f], proj)?)?;
    tape.concat(&[&tape.sin(&angles)?, &tape.cos(&angles)?], 1)
}

#[derive(Debug, Clone)]
pub(crate) struct HeadParams {
    hidden: Linear,
    out: Linear,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        let hidden = Linear::new(store, "head.hidden", cfg.d_model, cfg.d_model, rng);
        let out = Linear::new(store, "head.class", cfg.d_model, cfg.num_classes, rng);
        let prior: f64 = 0.01;
        store.set(out.bias, Tensor::full(vec![cfg.num_classes], -((1.0 - prior) / prior).ln()));
        Self { hidden, out }
    }

    pub fn logits(&self, store: &ParamStore, tape: &Tape, q: &Tensor) -> Result<Tensor> {
        let h = tape.gelu(&self.hidden.forward(store, tape, q)?)?;
        self.out.forward(store, tape, &h)
    }
}
