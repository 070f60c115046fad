//! Central finite differences, the reference oracle for gradient checks.

use super::Tensor;

/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    assert!(eps > 0.0, "finite-difference step must be positive");
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

fn perturbed(params: &[Tensor], tensor: usize, element: usize, delta: f64) -> Vec<Tensor> {
    let mut out = params.to_vec();
    let mut data = out[tensor].to_vec();
    data[element] += delta;
    out[tensor] = Tensor::new(out[tensor].shape().to_vec(), data).expect("same shape");
    out
}

/// Central-difference gradient of a scalar function of a parameter set,
/// one coordinate at a time. `f` must be deterministic.
pub fn finite_diff_grad<E>(
    params: &[Tensor],
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64, E>,
) -> Result<Vec<Tensor>, E> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    params
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let g = (0..t.numel())
                .map(|e| {
                    let plus = f(&perturbed(params, ti, e, eps))?;
                    let minus = f(&perturbed(params, ti, e, -eps))?;
                    Ok((plus - minus) / (2.0 * eps))
                })
                .collect::<Result<Vec<_>, E>>()?;
            Ok(Tensor::new(t.shape().to_vec(), g).expect("same shape"))
        })
        .collect()
}

/// Central differences for selected `(tensor index, element index)` pairs.
pub fn finite_diff_coords<E>(
    params: &[Tensor],
    coords: &[(usize, usize)],
    eps: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64, E>,
) -> Result<Vec<f64>, E> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    coords
        .iter()
        .map(|&(ti, e)| {
            let plus = f(&perturbed(params, ti, e, eps))?;
            let minus = f(&perturbed(params, ti, e, -eps))?;
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn square_at_three() {
        let d = central_difference(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sine_at_zero() {
        let d = central_difference(f64::sin, 0.0, 1e-5);
        assert!((d - 1.0).abs() < 1e-8);
    }

    #[test]
    fn grad_over_tensor_set() {
        let params = vec![Tensor::vector(vec![1.0, 2.0]), Tensor::scalar(3.0)];
        let g = finite_diff_grad(&params, 1e-5, |p| {
            Ok::<_, Infallible>(p[0].data()[0] * p[0].data()[1] + p[1].item().powi(2))
        })
        .unwrap();
        assert!((g[0].data()[0] - 2.0).abs() < 1e-8);
        assert!((g[0].data()[1] - 1.0).abs() < 1e-8);
        assert!((g[1].item() - 6.0).abs() < 1e-8);
    }
}
