//! Refinement-aware perturbation of the latent queries.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Decoder, FeaturePyramid, QuerySet};
use crate::geometry::{decode_pos, encode_corners, BBox, PositionalVector};
use crate::tensor::{Result, Tape, Tensor};

/// Smallest box side after perturbation, in pixels.
const MIN_SIDE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Probability of perturbing content, and independently position, per step.
    pub prob: f64,
    pub sigma_q: f64,
    /// Corner noise std as a fraction of the image's longer side.
    pub sigma_p_frac: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { prob: 0.2, sigma_q: 0.1, sigma_p_frac: 25.0 / 800.0 }
    }
}

/// `(1 - s) q + s eps` with `eps` drawn row-wise with std `||q_row||`.
/// Returns an untracked tensor.
pub fn noise_content(q: &Tensor, sigma_q: f64, rng: &mut impl Rng) -> Tensor {
    if sigma_q == 0.0 {
        return q.detach();
    }
    let d = *q.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(q.numel());
    for row in q.data().chunks(d.max(1)) {
        let std = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for &v in row {
            let eps: f64 = StandardNormal.sample(rng);
            out.push((1.0 - sigma_q) * v + sigma_q * std * eps);
        }
    }
    Tensor::new(q.shape().to_vec(), out).expect("same shape")
}

/// Jitters each decoded corner by `N(0, (frac * max(H, W))^2)`, swaps
/// flipped corners, enforces a minimum side around the center and
/// re-encodes. Returns an untracked `N x 4` tensor.
pub fn noise_pos(p: &Tensor, sigma_p_frac: f64, image_size: (usize, usize), rng: &mut impl Rng) -> Tensor {
    if sigma_p_frac == 0.0 {
        return p.detach();
    }
    let std = sigma_p_frac * image_size.0.max(image_size.1) as f64;
    let mut out = Vec::with_capacity(p.numel());
    for row in p.data().chunks(4) {
        let b = decode_pos(PositionalVector::from_array([row[0], row[1], row[2], row[3]])).to_corners();
        let mut c = b.to_array();
        for v in &mut c {
            *v += std * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        let mut b = BBox::from_array(c);
        for (lo, hi) in [(&mut b.x1, &mut b.x2), (&mut b.y1, &mut b.y2)] {
            if *hi - *lo < MIN_SIDE {
                let mid = 0.5 * (*lo + *hi);
                *lo = mid - 0.5 * MIN_SIDE;
                *hi = mid + 0.5 * MIN_SIDE;
            }
        }
        out.extend(encode_corners(b).expect("sides clamped positive").to_array());
    }
    Tensor::new(p.shape().to_vec(), out).expect("same shape")
}

/// With probability `prob` perturb content, independently with probability
/// `prob` perturb position, then apply refinement layer `layer`.
pub fn rap_step(
    decoder: &Decoder,
    tape: &Tape,
    x: &FeaturePyramid,
    y: &QuerySet,
    layer: usize,
    noise: NoiseConfig,
    rng: &mut impl Rng,
) -> Result<QuerySet> {
    let mut y = y.clone();
    if noise.prob > 0.0 && rng.random::<f64>() < noise.prob {
        y.content = noise_content(&y.content, noise.sigma_q, rng);
    }
    if noise.prob > 0.0 && rng.random::<f64>() < noise.prob {
        y.position = noise_pos(&y.position, noise.sigma_p_frac, decoder.config().image_size, rng);
    }
    decoder.refine(tape, x, &y, layer)
}
