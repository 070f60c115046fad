//! Fixed-point solvers for `y = F(y)` over a latent made of several tensors.
//!
//! The residual of an iterate is the L2 norm of `F(y) - y` over all tensors
//! of the latent, flattened and concatenated.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// A latent state: the tensors the map iterates on, in a fixed order.
pub type Latent = Vec<Tensor>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solver config: {0}")]
    Config(String),
    #[error("step {step}: map changed latent shapes from {before:?} to {after:?}")]
    ShapeChanged { step: usize, before: Vec<Vec<usize>>, after: Vec<Vec<usize>> },
    #[error("step {step}: iterate is not finite")]
    NonFinite { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SolveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMode {
    #[default]
    Naive,
    Anderson,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_steps: usize,
    /// Stop once the residual drops to this value. `None` runs exactly
    /// `max_steps` steps.
    pub tol: Option<f64>,
    pub anderson_m: usize,
    pub damping: f64,
    pub mode: SolverMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_steps: 20, tol: None, anderson_m: 5, damping: 1.0, mode: SolverMode::Naive }
    }
}

impl SolverConfig {
    pub fn fixed_steps(steps: usize) -> Self {
        Self { max_steps: steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(SolveError::Config("max_steps must be at least 1".into()));
        }
        if self.anderson_m == 0 {
            return Err(SolveError::Config("anderson_m must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SolveError::Config(format!("damping {} outside (0, 1]", self.damping)));
        }
        if let Some(tol) = self.tol {
            if !(tol >= 0.0) {
                return Err(SolveError::Config(format!("tol {tol} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Residual history and recorded iterates of one solve.
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    /// `residuals[t - 1]` is `|F(y_{t-1}) - y_{t-1}|`.
    pub residuals: Vec<f64>,
    /// Iterate after step `t` (1-based), for each requested `t` reached.
    pub snapshots: BTreeMap<usize, Latent>,
    pub steps_taken: usize,
}

fn shapes(y: &[Tensor]) -> Vec<Vec<usize>> {
    y.iter().map(|t| t.shape().to_vec()).collect()
}

fn flatten(y: &[Tensor]) -> Vec<f64> {
    y.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(template: &[Tensor], flat: Vec<f64>) -> Latent {
    let mut offset = 0;
    template
        .iter()
        .map(|t| {
            let n = t.numel();
            let part = flat[offset..offset + n].to_vec();
            offset += n;
            Tensor::new(t.shape().to_vec(), part).expect("template shape")
        })
        .collect()
}

fn diff_norm(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)))
        .sum::<f64>()
        .sqrt()
}

/// Applies `f` once and checks that the shapes are preserved.
fn step<F>(f: &mut F, y: &[Tensor], step: usize) -> Result<Latent>
where
    F: FnMut(&[Tensor]) -> crate::tensor::Result<Latent>,
{
    let out = f(y)?;
    let (before, after) = (shapes(y), shapes(&out));
    if before != after {
        return Err(SolveError::ShapeChanged { step, before, after });
    }
    Ok(out)
}

/// `|F(y) - y|`.
pub fn residual<F>(mut f: F, y: &[Tensor]) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> crate::tensor::Result<Latent>,
{
    let out = step(&mut f, y, 1)?;
    Ok(diff_norm(&out, y))
}

/// Dispatches on `cfg.mode`.
pub fn solve<F>(f: F, y0: &[Tensor], cfg: &SolverConfig, record_at: &[usize]) -> Result<(Latent, SolveTrace)>
where
    F: FnMut(&[Tensor]) -> crate::tensor::Result<Latent>,
{
    match cfg.mode {
        SolverMode::Naive => solve_naive(f, y0, cfg, record_at),
        SolverMode::Anderson => solve_anderson(f, y0, cfg, record_at),
    }
}

/// Picard iteration `y_t = F(y_{t-1})`.
pub fn solve_naive<F>(mut f: F, y0: &[Tensor], cfg: &SolverConfig, record_at: &[usize]) -> Result<(Latent, SolveTrace)>
where
    F: FnMut(&[Tensor]) -> crate::tensor::Result<Latent>,
{
    cfg.validate()?;
    let record: BTreeSet<usize> = record_at.iter().copied().collect();
    let mut trace = SolveTrace::default();
    let mut y = y0.to_vec();
    for t in 1..=cfg.max_steps {
        let next = step(&mut f, &y, t)?;
        if !next.iter().all(Tensor::all_finite) {
            return Err(SolveError::NonFinite { step: t });
        }
        let r = diff_norm(&next, &y);
        y = next;
        trace.residuals.push(r);
        trace.steps_taken = t;
        if record.contains(&t) {
            trace.snapshots.insert(t, y.clone());
        }
        if cfg.tol.is_some_and(|tol| r <= tol) {
            break;
        }
    }
    Ok((y, trace))
}

/// Tikhonov term added to the diagonal of the column-normalized Gram matrix.
const ANDERSON_REG: f64 = 1e-8;

/// Least-squares coefficients `gamma` minimizing `|f_k - dF gamma|`, where
/// the columns of `dF` are successive residual differences. Solved through
/// the regularized normal equations; `None` when they are degenerate.
fn anderson_gamma(residuals: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = residuals.len() - 1;
    let diffs: Vec<Vec<f64>> =
        residuals.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
    let last = &residuals[m];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let v = dot(&diffs[i], &diffs[j]);
            gram[i * m + j] = v;
            gram[j * m + i] = v;
        }
    }
    // unit-diagonal scaling so the regularization is relative per column
    let d: Vec<f64> = (0..m).map(|i| gram[i * m + i].sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return None;
    }
    for i in 0..m {
        for j in 0..m {
            gram[i * m + j] /= d[i] * d[j];
        }
    }
    let rhs: Vec<f64> = diffs.iter().zip(&d).map(|(c, s)| dot(c, last) / s).collect();
    let mut regularized = gram.clone();
    for i in 0..m {
        regularized[i * m + i] += ANDERSON_REG;
    }
    let chol = Cholesky::factor(regularized, m)?;
    let mut gamma = chol.solve(rhs.clone());
    // refinement against the unregularized system removes the Tikhonov bias
    // in well-determined directions and leaves null directions at zero
    for _ in 0..REFINE_SWEEPS {
        let resid: Vec<f64> =
            (0..m).map(|i| rhs[i] - (0..m).map(|j| gram[i * m + j] * gamma[j]).sum::<f64>()).collect();
        let corr = chol.solve(resid);
        gamma.iter_mut().zip(corr).for_each(|(g, c)| *g += c);
    }
    let gamma: Vec<f64> = gamma.iter().zip(&d).map(|(g, s)| g / s).collect();
    gamma.iter().all(|g| g.is_finite()).then_some(gamma)
}

const REFINE_SWEEPS: usize = 3;

/// Lower Cholesky factor of a symmetric positive definite matrix.
struct Cholesky {
    l: Vec<f64>,
    n: usize,
}

impl Cholesky {
    fn factor(mut a: Vec<f64>, n: usize) -> Option<Self> {
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        Some(Self { l: a, n })
    }

    fn solve(&self, mut b: Vec<f64>) -> Vec<f64> {
        let (l, n) = (&self.l, self.n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        b
    }
}

/// Anderson mixing over the last `cfg.anderson_m` iterates.
///
/// With history `y_i`, residuals `f_i = F(y_i) - y_i` and differences
/// `dY`, `dF`, the next iterate is `y_k + beta f_k - (dY + beta dF) gamma`.
/// This equals `sum alpha_i (beta F(y_i) + (1 - beta) y_i)` for the
/// affine weights `alpha` minimizing `|sum alpha_i f_i|`. A degenerate
/// least-squares system falls back to the Picard step `F(y_k)`.
pub fn solve_anderson<F>(
    mut f: F,
    y0: &[Tensor],
    cfg: &SolverConfig,
    record_at: &[usize],
) -> Result<(Latent, SolveTrace)>
where
    F: FnMut(&[Tensor]) -> crate::tensor::Result<Latent>,
{
    cfg.validate()?;
    let record: BTreeSet<usize> = record_at.iter().copied().collect();
    let mut trace = SolveTrace::default();
    let mut y = y0.to_vec();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut fs: Vec<Vec<f64>> = Vec::new();
    let beta = cfg.damping;
    for t in 1..=cfg.max_steps {
        let g_latent = step(&mut f, &y, t)?;
        if !g_latent.iter().all(Tensor::all_finite) {
            return Err(SolveError::NonFinite { step: t });
        }
        let x = flatten(&y);
        let g = flatten(&g_latent);
        let res: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a - b).collect();
        let r = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        if xs.len() == cfg.anderson_m {
            xs.remove(0);
            fs.remove(0);
        }
        xs.push(x);
        fs.push(res);

        let k = fs.len() - 1;
        y = if k == 0 && beta == 1.0 {
            g_latent
        } else if k == 0 {
            let next = xs[0].iter().zip(&fs[0]).map(|(x, f)| x + beta * f).collect();
            unflatten(&g_latent, next)
        } else {
            match anderson_gamma(&fs) {
                Some(gamma) => {
                    let mut next: Vec<f64> = xs[k].iter().zip(&fs[k]).map(|(x, f)| x + beta * f).collect();
                    for (j, c) in gamma.iter().enumerate() {
                        for (i, v) in next.iter_mut().enumerate() {
                            let dx = xs[j + 1][i] - xs[j][i];
                            let df = fs[j + 1][i] - fs[j][i];
                            *v -= c * (dx + beta * df);
                        }
                    }
                    if next.iter().all(|v| v.is_finite()) {
                        unflatten(&g_latent, next)
                    } else {
                        g_latent
                    }
                }
                None => g_latent,
            }
        };
        trace.residuals.push(r);
        trace.steps_taken = t;
        if record.contains(&t) {
            trace.snapshots.insert(t, y.clone());
        }
        if cfg.tol.is_some_and(|tol| r <= tol) {
            break;
        }
    }
    Ok((y, trace))
}
