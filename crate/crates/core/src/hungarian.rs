//! Minimum-cost bipartite assignment on rectangular dense matrices.
//!
//! Shortest-augmenting-path Hungarian method with row/column potentials,
//! O(r² · c) for `r ≤ c`. Taller matrices are solved transposed.

use crate::error::{Error, Result};
use crate::types::AssignmentMatrix;

/// Optimal assignment for a row-major `rows × cols` cost matrix. Exactly
/// `min(rows, cols)` pairs are matched.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<AssignmentMatrix> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("cost matrix has no rows or columns".into()));
    }
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::EmptyInput("cost matrix contains non-finite entries".into()));
    }
    let pairs = if rows <= cols {
        solve(rows, cols, |r, c| cost[r][c])
    } else {
        solve(cols, rows, |r, c| cost[c][r])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    AssignmentMatrix::from_pairs(rows, cols, &pairs)
}

/// Sum of the costs selected by `assignment`.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &AssignmentMatrix) -> f64 {
    assignment.pairs().iter().map(|&(r, c)| cost[r][c]).sum()
}

/// Requires `n ≤ m`; returns one `(row, col)` per row.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based potentials; column 0 is the virtual start of each augmentation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; m + 1];
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
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        // flip the alternating path back to the start column
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}
