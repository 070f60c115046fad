//! Gradient estimators for an implicit layer `y* = f(x, y*|theta)`.
//!
//! The map binds its parameters and conditioning inputs as keyed leaves on
//! the tape it is given, so every estimator reports gradients per
//! [`LeafKey`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{LeafKey, Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("unroll depth k must be at least 1")]
    ZeroUnroll,
    #[error("upstream cotangent shapes {upstream:?} do not match the latent {latent:?}")]
    Upstream { upstream: Vec<Vec<usize>>, latent: Vec<Vec<usize>> },
    #[error(
        "adjoint iteration diverged at step {step} (residual {residual:e}): f is not contractive at y*"
    )]
    AdjointDiverged { step: usize, residual: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// One application of the implicit map on a tape.
pub trait ImplicitMap {
    fn apply(&self, tape: &Tape, latent: &[Tensor]) -> crate::tensor::Result<Vec<Tensor>>;
}

impl<F> ImplicitMap for F
where
    F: Fn(&Tape, &[Tensor]) -> crate::tensor::Result<Vec<Tensor>>,
{
    fn apply(&self, tape: &Tape, latent: &[Tensor]) -> crate::tensor::Result<Vec<Tensor>> {
        self(tape, latent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKind {
    ExactIft { max_steps: usize, tol: f64 },
    Jfb,
    Neumann { k: usize },
}

impl EstimatorKind {
    pub const DEFAULT_ADJOINT_STEPS: usize = 200;
    pub const DEFAULT_ADJOINT_TOL: f64 = 1e-9;

    pub fn exact() -> Self {
        Self::ExactIft { max_steps: Self::DEFAULT_ADJOINT_STEPS, tol: Self::DEFAULT_ADJOINT_TOL }
    }

    pub fn rag() -> Self {
        Self::Neumann { k: 2 }
    }
}

impl Default for EstimatorKind {
    fn default() -> Self {
        Self::rag()
    }
}

/// Gradients keyed by leaf, plus the adjoint residual history for the exact
/// estimator.
#[derive(Debug, Clone, Default)]
pub struct ImplicitGrads {
    pub by_key: BTreeMap<LeafKey, Tensor>,
    pub adjoint_residuals: Vec<f64>,
}

impl ImplicitGrads {
    pub fn get(&self, key: LeafKey) -> Option<&Tensor> {
        self.by_key.get(&key)
    }
}

fn check_upstream(latent: &[Tensor], upstream: &[Tensor]) -> Result<()> {
    let a: Vec<Vec<usize>> = latent.iter().map(|t| t.shape().to_vec()).collect();
    let b: Vec<Vec<usize>> = upstream.iter().map(|t| t.shape().to_vec()).collect();
    if a != b {
        return Err(GradError::Upstream { upstream: b, latent: a });
    }
    Ok(())
}

fn keyed_grads(tape: &Tape, outputs: &[Tensor], cotangents: &[Tensor]) -> Result<BTreeMap<LeafKey, Tensor>> {
    let seeds: Vec<(&Tensor, &[f64])> = outputs.iter().zip(cotangents).map(|(o, c)| (o, c.data())).collect();
    Ok(tape.vjp(&seeds)?.keyed())
}

/// Re-applies `f` `k` times from `detach(y)` with recording on. The returned
/// latent is tracked on `tape`; a loss on it backpropagates through exactly
/// `k` applications.
pub fn unroll<M: ImplicitMap + ?Sized>(f: &M, tape: &Tape, y: &[Tensor], k: usize) -> Result<Vec<Tensor>> {
    if k == 0 {
        return Err(GradError::ZeroUnroll);
    }
    let mut cur: Vec<Tensor> = y.iter().map(Tensor::detach).collect();
    for _ in 0..k {
        cur = f.apply(tape, &cur)?;
    }
    Ok(cur)
}

/// Truncated Neumann estimate: backpropagates `upstream` through `k`
/// unrolled applications, realizing `sum_{i<k} (df/dy)^i`.
pub fn grad_neumann_k<M: ImplicitMap + ?Sized>(
    f: &M,
    y_star: &[Tensor],
    upstream: &[Tensor],
    k: usize,
) -> Result<ImplicitGrads> {
    check_upstream(y_star, upstream)?;
    let tape = Tape::new();
    let out = unroll(f, &tape, y_star, k)?;
    Ok(ImplicitGrads { by_key: keyed_grads(&tape, &out, upstream)?, adjoint_residuals: Vec::new() })
}

/// Jacobian-free estimate: one application of `f` from `detach(y_star)`.
pub fn grad_jfb<M: ImplicitMap + ?Sized>(f: &M, y_star: &[Tensor], upstream: &[Tensor]) -> Result<ImplicitGrads> {
    check_upstream(y_star, upstream)?;
    let tape = Tape::new();
    let y: Vec<Tensor> = y_star.iter().map(Tensor::detach).collect();
    let out = f.apply(&tape, &y)?;
    Ok(ImplicitGrads { by_key: keyed_grads(&tape, &out, upstream)?, adjoint_residuals: Vec::new() })
}

/// Number of consecutive residual increases, ending above the first
/// residual, treated as divergence.
const DIVERGENCE_RUN: usize = 5;

/// Exact implicit gradient. Solves `a = upstream + J^T a` with
/// `J = df/dy` at `y_star` by fixed-point iteration of vector-Jacobian
/// products on a single tape, then pulls `a` back to every keyed leaf.
pub fn grad_exact_ift<M: ImplicitMap + ?Sized>(
    f: &M,
    y_star: &[Tensor],
    upstream: &[Tensor],
    max_steps: usize,
    tol: f64,
) -> Result<ImplicitGrads> {
    check_upstream(y_star, upstream)?;
    let tape = Tape::new();
    let leaves: Vec<Tensor> = y_star.iter().map(|y| tape.variable(y.detach())).collect();
    let out = f.apply(&tape, &leaves)?;

    let mut adjoint: Vec<Tensor> = upstream.iter().map(Tensor::detach).collect();
    let mut residuals = Vec::new();
    let mut growing = 0;
    for step in 1..=max_steps {
        let seeds: Vec<(&Tensor, &[f64])> = out.iter().zip(&adjoint).map(|(o, a)| (o, a.data())).collect();
        let grads = tape.vjp(&seeds)?;
        let next: Vec<Tensor> = leaves
            .iter()
            .zip(upstream)
            .map(|(leaf, g)| {
                let jt_a = grads.wrt(leaf);
                let data = g.data().iter().zip(jt_a.data()).map(|(u, v)| u + v).collect();
                Tensor::new(g.shape().to_vec(), data)
            })
            .collect::<crate::tensor::Result<_>>()?;
        let r = next
            .iter()
            .zip(&adjoint)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)))
            .sum::<f64>()
            .sqrt();
        if !r.is_finite() {
            return Err(GradError::AdjointDiverged { step, residual: r });
        }
        if residuals.last().is_some_and(|&prev| r > prev) {
            growing += 1;
            if growing >= DIVERGENCE_RUN && r > residuals[0] {
                return Err(GradError::AdjointDiverged { step, residual: r });
            }
        } else {
            growing = 0;
        }
        residuals.push(r);
        adjoint = next;
        if r <= tol {
            break;
        }
    }
    let by_key = keyed_grads(&tape, &out, &adjoint)?;
    Ok(ImplicitGrads { by_key, adjoint_residuals: residuals })
}

/// Dispatches on `kind`.
pub fn estimate<M: ImplicitMap + ?Sized>(
    kind: EstimatorKind,
    f: &M,
    y_star: &[Tensor],
    upstream: &[Tensor],
) -> Result<ImplicitGrads> {
    match kind {
        EstimatorKind::ExactIft { max_steps, tol } => grad_exact_ift(f, y_star, upstream, max_steps, tol),
        EstimatorKind::Jfb => grad_jfb(f, y_star, upstream),
        EstimatorKind::Neumann { k } => grad_neumann_k(f, y_star, upstream, k),
    }
}
