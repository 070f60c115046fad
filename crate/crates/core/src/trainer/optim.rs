//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::tensor::{ParamId, ParamStore, Tensor};

/// Gradients keyed by parameter.
pub type ParamGrads = BTreeMap<ParamId, Tensor>;

/// Only matrices decay; biases, norms, queries and positions do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params`. A parameter missing from
    /// `grads` is treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let value = params.get(id);
            let n = value.numel();
            let wd = if decays(params.name(id)) { self.weight_decay } else { 0.0 };
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = grads.get(&id).map(Tensor::data);
            let mut out = value.to_vec();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                out[i] -= lr * update + lr * wd * value.data()[i];
            }
            params.set(id, Tensor::new(value.shape().to_vec(), out).expect("same shape"));
        }
    }
}

/// L2 norm of all gradients flattened into one vector.
pub fn grad_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Adds `src` into `dst`, inserting missing entries.
pub fn accumulate(dst: &mut ParamGrads, src: ParamGrads) {
    for (id, g) in src {
        match dst.get_mut(&id) {
            Some(acc) => {
                let data = acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                *acc = Tensor::new(acc.shape().to_vec(), data).expect("same shape");
            }
            None => {
                dst.insert(id, g);
            }
        }
    }
}

/// Multiplies every gradient by `c`.
pub fn scale_grads(grads: &mut ParamGrads, c: f64) {
    for g in grads.values_mut() {
        *g = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * c).collect()).expect("same shape");
    }
}
