//! Implicit-gradient estimators against dense and finite-difference oracles.

mod common;

use std::convert::Infallible;

use common::*;
use deqdet::fixed_point::{solve, SolverConfig, SolverMode};
use deqdet::grad::{grad_exact_ift, grad_jfb, grad_neumann_k, ImplicitMap};
use deqdet::tensor::{finite_diff_grad, LeafKey, ParamId, Tape, Tensor};
use proptest::prelude::*;

const X: LeafKey = LeafKey::Input(0);

fn key(i: usize) -> LeafKey {
    LeafKey::Param(ParamId(i))
}

fn to_tensor(m: &Matrix) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// `f(y) = A y + B x + theta`, with `y` and `x` as column vectors.
struct Linear {
    a: Tensor,
    b: Tensor,
    x: Tensor,
    theta: Tensor,
}

impl ImplicitMap for Linear {
    fn apply(&self, tape: &Tape, y: &[Tensor]) -> deqdet::tensor::Result<Vec<Tensor>> {
        let x = tape.leaf(X, &self.x);
        let theta = tape.leaf(key(0), &self.theta);
        let ay = tape.matmul(&self.a, &y[0])?;
        let bx = tape.matmul(&self.b, &x)?;
        Ok(vec![tape.add(&tape.add(&ay, &bx)?, &theta)?])
    }
}

impl Linear {
    fn random(rng: &mut rand_chacha::ChaCha8Rng, a: Matrix, d: usize) -> Self {
        let n = a.len();
        Self {
            a: to_tensor(&a),
            b: to_tensor(&random_matrix(rng, n, d, 1.0)),
            x: Tensor::new(vec![d, 1], random_vec(rng, d, 1.0)).unwrap(),
            theta: Tensor::new(vec![n, 1], random_vec(rng, n, 1.0)).unwrap(),
        }
    }

    fn fixed_point(&self) -> Vec<Tensor> {
        let n = self.a.shape()[0];
        let cfg = SolverConfig { tol: Some(1e-14), ..SolverConfig::fixed_steps(5000) };
        let tape = Tape::new();
        let _guard = tape.no_grad();
        solve(|y: &[Tensor]| self.apply(&tape, y), &[Tensor::zeros(vec![n, 1])], &cfg, &[]).unwrap().0
    }
}

/// `f(y) = tanh(W y + U x + b)`.
struct TanhLayer {
    params: Vec<Tensor>,
    x: Tensor,
}

impl TanhLayer {
    fn random(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize, w_norm: f64) -> Self {
        let w = scale(&random_orthogonal(rng, n), w_norm);
        Self {
            params: vec![
                to_tensor(&w),
                to_tensor(&random_matrix(rng, n, d, 1.0)),
                Tensor::new(vec![n, 1], random_vec(rng, n, 0.5)).unwrap(),
            ],
            x: Tensor::new(vec![d, 1], random_vec(rng, d, 1.0)).unwrap(),
        }
    }

    fn with_params(&self, params: &[Tensor]) -> Self {
        Self { params: params.to_vec(), x: self.x.clone() }
    }

    fn solve(&self, mode: SolverMode, tol: f64) -> Vec<Tensor> {
        let n = self.params[0].shape()[0];
        let cfg = SolverConfig { tol: Some(tol), anderson_m: 4, mode, ..SolverConfig::fixed_steps(5000) };
        let tape = Tape::new();
        let _guard = tape.no_grad();
        solve(|y: &[Tensor]| self.apply(&tape, y), &[Tensor::zeros(vec![n, 1])], &cfg, &[]).unwrap().0
    }
}

impl ImplicitMap for TanhLayer {
    fn apply(&self, tape: &Tape, y: &[Tensor]) -> deqdet::tensor::Result<Vec<Tensor>> {
        let w = tape.leaf(key(0), &self.params[0]);
        let u = tape.leaf(key(1), &self.params[1]);
        let b = tape.leaf(key(2), &self.params[2]);
        let x = tape.leaf(X, &self.x);
        let pre = tape.add(&tape.add(&tape.matmul(&w, &y[0])?, &tape.matmul(&u, &x)?)?, &b)?;
        Ok(vec![tape.tanh(&pre)?])
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    dist(a, b) / norm(b).max(1e-300)
}

#[test]
fn exact_ift_matches_dense_adjoint_solve() {
    for (seed, n, d) in [(21, 3, 2), (22, 6, 4), (23, 8, 8)] {
        let mut r = rng(seed);
        let eigen: Vec<f64> = (0..n).map(|i| 0.85 * (i as f64 / n as f64 * 2.0 - 1.0)).collect();
        let a = matmul(&symmetric_with_spectrum(&mut r, &eigen), &random_orthogonal(&mut r, n));
        let map = Linear::random(&mut r, a.clone(), d);
        let g = random_vec(&mut r, n, 1.0);
        let y = map.fixed_point();
        let up = [Tensor::new(vec![n, 1], g.clone()).unwrap()];
        let got = grad_exact_ift(&map, &y, &up, 500, 1e-13).unwrap();

        // x gradient: B^T (I - A^T)^{-1} g
        let adj = solve_dense(&identity_minus(&transpose(&a)), &g);
        let bt = transpose(&map.b.data().chunks(d).map(<[f64]>::to_vec).collect());
        let expected_x = matvec(&bt, &adj);
        assert!(rel(got.get(X).unwrap().data(), &expected_x) < 1e-9);
        assert!(rel(got.get(key(0)).unwrap().data(), &adj) < 1e-9);
    }
}

#[test]
fn exact_ift_matches_finite_differences_of_the_solve() {
    let mut r = rng(24);
    let layer = TanhLayer::random(&mut r, 4, 3, 0.6);
    let target = random_vec(&mut r, 4, 0.5);
    let loss = |y: &[f64]| 0.5 * dist(y, &target).powi(2);

    let y = layer.solve(SolverMode::Naive, 1e-13);
    let up: Vec<f64> = y[0].data().iter().zip(&target).map(|(a, b)| a - b).collect();
    let got = grad_exact_ift(&layer, &y, &[Tensor::new(vec![4, 1], up).unwrap()], 500, 1e-13).unwrap();

    let fd = finite_diff_grad(&layer.params, 1e-6, |p| {
        Ok::<_, Infallible>(loss(layer.with_params(p).solve(SolverMode::Naive, 1e-10)[0].data()))
    })
    .unwrap();
    for (i, g_fd) in fd.iter().enumerate() {
        let err = rel(got.get(key(i)).unwrap().data(), g_fd.data());
        assert!(err < 1e-4, "param {i}: relative error {err:e}");
    }
}

#[test]
fn exact_ift_does_not_depend_on_the_solver() {
    let mut r = rng(25);
    let layer = TanhLayer::random(&mut r, 5, 3, 0.7);
    let up = [Tensor::new(vec![5, 1], random_vec(&mut r, 5, 1.0)).unwrap()];
    let naive = layer.solve(SolverMode::Naive, 1e-12);
    let anderson = layer.solve(SolverMode::Anderson, 1e-12);
    let a = grad_exact_ift(&layer, &naive, &up, 500, 1e-9).unwrap();
    let b = grad_exact_ift(&layer, &anderson, &up, 500, 1e-9).unwrap();
    for k in [key(0), key(1), key(2), X] {
        let (ga, gb) = (a.get(k).unwrap(), b.get(k).unwrap());
        assert!(dist(ga.data(), gb.data()) <= 1e-8 * norm(ga.data()).max(1.0));
    }
}

#[test]
fn neumann_error_decays_geometrically() {
    let mut r = rng(26);
    let layer = TanhLayer::random(&mut r, 6, 3, 0.8);
    let y = layer.solve(SolverMode::Naive, 1e-13);
    let up = [Tensor::new(vec![6, 1], random_vec(&mut r, 6, 1.0)).unwrap()];
    let exact = grad_exact_ift(&layer, &y, &up, 1000, 1e-14).unwrap();
    let flat = |g: &deqdet::grad::ImplicitGrads| -> Vec<f64> {
        g.by_key.values().flat_map(|t| t.data().to_vec()).collect()
    };
    let reference = flat(&exact);
    let errors: Vec<f64> =
        (1..=30).map(|k| rel(&flat(&grad_neumann_k(&layer, &y, &up, k).unwrap()), &reference)).collect();
    // |df/dy| <= 0.8, so the tail after k terms is at most 0.8^k / 0.2 of the total
    for (i, e) in errors.iter().enumerate() {
        let k = i as i32 + 1;
        assert!(*e <= 0.8f64.powi(k) / 0.2 * 5.0, "k={k}: {e:e}");
    }
    assert!(errors[29] < errors[0] * 1e-2);
    assert!(errors.windows(2).all(|w| w[1] <= w[0] * 1.0001));
}

#[test]
fn affine_truncation_bound() {
    for rho in [0.3, 0.6, 0.9] {
        let mut r = rng((rho * 100.0) as u64);
        let n = 6;
        let eigen: Vec<f64> = (0..n).map(|i| if i == 0 { rho } else { rho * (i as f64 / n as f64 - 0.5) }).collect();
        let a = symmetric_with_spectrum(&mut r, &eigen);
        let map = Linear::random(&mut r, a, 3);
        let y = map.fixed_point();
        let up = [Tensor::new(vec![n, 1], random_vec(&mut r, n, 1.0)).unwrap()];
        let exact = grad_exact_ift(&map, &y, &up, 1000, 1e-14).unwrap();
        let exact_theta = exact.get(key(0)).unwrap();
        for k in [1, 2, 4, 8] {
            let approx = grad_neumann_k(&map, &y, &up, k).unwrap();
            let err = rel(approx.get(key(0)).unwrap().data(), exact_theta.data());
            // theta enters additively, so the error is |A^k (I-A)^{-1} g| / |(I-A)^{-1} g| <= rho^k
            assert!(err <= rho.powi(k as i32) / (1.0 - rho) + 1e-12, "rho={rho} k={k}: {err:e}");
            assert!(err <= rho.powi(k as i32) + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn neumann_one_is_jfb(seed in any::<u64>(), n in 1usize..6, d in 1usize..4) {
        let mut r = rng(seed);
        let layer = TanhLayer::random(&mut r, n, d, 0.9);
        let y = [Tensor::new(vec![n, 1], random_vec(&mut r, n, 1.0)).unwrap()];
        let up = [Tensor::new(vec![n, 1], random_vec(&mut r, n, 1.0)).unwrap()];
        let a = grad_jfb(&layer, &y, &up).unwrap();
        let b = grad_neumann_k(&layer, &y, &up, 1).unwrap();
        prop_assert_eq!(a.by_key.len(), 4);
        for (k, g) in &a.by_key {
            prop_assert_eq!(g.data(), b.by_key[k].data());
        }
    }
}
