//! Minimum-cost rectangular assignment (shortest augmenting paths with
//! potentials, O(n^2 m)).

use crate::error::{Error, Result};

/// Optimal assignment for a row-major `rows x cols` cost matrix, returning
/// `min(rows, cols)` `(row, col)` pairs sorted by row. Ties are broken toward
/// lower indices by scanning rows and columns in ascending order with strict
/// improvements only.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    assert_eq!(cost.len(), rows * cols, "cost matrix shape");
    if let Some(i) = cost.iter().position(|c| c.is_nan()) {
        return Err(Error::NanCost {
            row: i / cols,
            col: i % cols,
        });
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let mut pairs: Vec<(usize, usize)> = solve(&t, cols, rows).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    Ok(solve(cost, rows, cols))
}

/// Requires `n <= m`. Every row gets a column.
fn solve(a: &[f64], n: usize, m: usize) -> Vec<(usize, usize)> {
    // 1-based potentials with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Sum of the selected costs, accumulated in row order.
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}
