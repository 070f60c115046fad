//! Minimum-cost bipartite assignment by shortest augmenting paths with dual
//! potentials, `O(n^2 m)` for an `n x m` matrix with `n <= m`.

use super::LossError;

/// Matched `(prediction, ground truth)` pairs, sorted by prediction index.
/// Unlisted predictions are background.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }

    /// Ground-truth index per prediction.
    pub fn target_of(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(i, j) in &self.pairs {
            out[i] = Some(j);
        }
        out
    }
}

/// Optimal assignment of rows (predictions) to columns (ground truths).
/// Produces `min(N, M)` pairs. Ties resolve deterministically, preferring
/// lower indices.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment, LossError> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|row| row.len() != m) {
        return Err(LossError::Ragged);
    }
    if let Some((i, j)) =
        cost.iter().enumerate().find_map(|(i, row)| row.iter().position(|v| !v.is_finite()).map(|j| (i, j)))
    {
        return Err(LossError::NonFiniteCost { row: i, col: j });
    }
    if n == 0 || m == 0 {
        return Ok(Assignment::default());
    }
    let mut pairs = if n <= m {
        solve(n, m, |i, j| cost[i][j])
    } else {
        solve(m, n, |i, j| cost[j][i]).into_iter().map(|(j, i)| (i, j)).collect()
    };
    pairs.sort_unstable();
    Ok(Assignment { pairs })
}

/// Rows `0..n` each get a distinct column in `0..m`, `n <= m`.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based with a virtual column 0, following the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect()
}
