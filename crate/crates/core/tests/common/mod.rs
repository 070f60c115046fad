//! Dense linear-algebra oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    (0..rows).map(|_| random_vec(rng, cols, scale)).collect()
}

pub fn matvec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn transpose(a: &Matrix) -> Matrix {
    let cols = a[0].len();
    (0..cols).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let bt = transpose(b);
    a.iter().map(|row| bt.iter().map(|col| row.iter().zip(col).map(|(p, q)| p * q).sum()).collect()).collect()
}

pub fn scale(a: &Matrix, c: f64) -> Matrix {
    a.iter().map(|row| row.iter().map(|v| v * c).collect()).collect()
}

/// Orthogonal matrix from Gram-Schmidt on random columns.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v = random_vec(rng, n, 1.0);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum();
            v.iter_mut().zip(b).for_each(|(p, q)| *p -= d * q);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    transpose(&basis)
}

/// Symmetric matrix with the given eigenvalues.
pub fn symmetric_with_spectrum(rng: &mut ChaCha8Rng, eigen: &[f64]) -> Matrix {
    let q = random_orthogonal(rng, eigen.len());
    let qd: Matrix = q.iter().map(|row| row.iter().zip(eigen).map(|(v, e)| v * e).collect()).collect();
    matmul(&qd, &transpose(&q))
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Matrix = a.iter().zip(b).map(|(row, v)| row.iter().copied().chain([*v]).collect()).collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, pivot);
        assert!(m[col][col].abs() > 1e-14, "singular system");
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

pub fn identity_minus(a: &Matrix) -> Matrix {
    a.iter()
        .enumerate()
        .map(|(i, row)| row.iter().enumerate().map(|(j, v)| if i == j { 1.0 - v } else { -v }).collect())
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Fresh decoder with every delta head and bias jittered so positions move
/// and no branch sits at an exact zero.
pub fn jittered_decoder(cfg: deqdet::decoder::DecoderConfig, seed: u64) -> deqdet::decoder::Decoder {
    use deqdet::tensor::Tensor;
    let mut dec = deqdet::decoder::Decoder::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<_> = dec.params().iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let scale = if name.contains("delta.out") {
            0.02
        } else if name.ends_with(".bias") && !name.contains("sampling") && !name.contains("head.class") {
            0.05
        } else {
            continue;
        };
        let t = dec.params().get(id).clone();
        let data = t.data().iter().map(|v| v + r.random_range(-scale..scale)).collect();
        dec.params_mut().set(id, Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    dec
}

/// `||f(y + e) - f(y) - J e|| / ||e||^2` for content perturbations `e`
/// scaled by each factor, with `J e` from a central difference along `e`.
pub fn second_order_ratios(
    dec: &deqdet::decoder::Decoder,
    x: &deqdet::decoder::FeaturePyramid,
    y: &deqdet::decoder::QuerySet,
    direction: &[f64],
    scales: &[f64],
) -> Vec<f64> {
    use deqdet::decoder::QuerySet;
    use deqdet::tensor::{Tape, Tensor};
    let f = |shift: &[f64], c: f64| -> Vec<f64> {
        let content: Vec<f64> = y.content.data().iter().zip(shift).map(|(q, e)| q + c * e).collect();
        let yq = QuerySet { content: Tensor::new(y.content.shape().to_vec(), content).unwrap(), position: y.position.clone() };
        let tape = Tape::new();
        let _g = tape.no_grad();
        let out = dec.refine(&tape, x, &yq, 0).unwrap();
        out.content.data().iter().chain(out.position.data()).copied().collect()
    };
    let base = f(direction, 0.0);
    let h = 1e-5;
    let plus = f(direction, h);
    let minus = f(direction, -h);
    let jd: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let dnorm = norm(direction);
    scales
        .iter()
        .map(|&s| {
            let shifted = f(direction, s);
            let rem: Vec<f64> = shifted.iter().zip(&base).zip(&jd).map(|((a, b), j)| a - b - s * j).collect();
            norm(&rem) / (s * dnorm).powi(2)
        })
        .collect()
}

fn scale_param(dec: &mut deqdet::decoder::Decoder, name: &str, c: f64) {
    use deqdet::tensor::Tensor;
    let id = dec.params().id(name).unwrap();
    let t = dec.params().get(id).clone();
    dec.params_mut().set(id, Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap());
}

/// Jittered decoder whose refinement layer contracts in content on smooth
/// features: small sampling offsets and self-attention output, a dominant
/// sampled-feature branch, and zeroed delta heads.
pub fn contractive_decoder(cfg: deqdet::decoder::DecoderConfig, seed: u64) -> deqdet::decoder::Decoder {
    let mut dec = jittered_decoder(cfg, seed);
    dec.zero_position_heads();
    scale_param(&mut dec, "refine.0.sampling.offsets.weight", 0.02);
    scale_param(&mut dec, "refine.0.mixing.points.weight", 100.0);
    scale_param(&mut dec, "refine.0.attn.out.weight", 0.02);
    dec
}
