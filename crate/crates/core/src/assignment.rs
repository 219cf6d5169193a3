//! Rectangular linear assignment via the Hungarian method with shortest augmenting paths.

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Optimal assignment of every row to a distinct column.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column matched to row `i`.
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

/// Minimizes `Σ_i cost[i][row_to_col[i]]` over injective maps from rows into columns.
/// Requires `rows ≤ cols`; costs must be finite.
pub fn solve_min(cost: &Matrix) -> Result<Assignment> {
    let (n, m) = cost.shape();
    if n > m {
        return Err(Error::Capacity {
            requested: n,
            available: m,
        });
    }
    if !cost.is_finite() {
        return Err(Error::Argument("assignment costs must be finite".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            row_to_col: Vec::new(),
            cost: 0.0,
        });
    }

    // Potentials and matching are 1-indexed; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=m {
        if matched_row[j] != 0 {
            row_to_col[matched_row[j] - 1] = j - 1;
        }
    }
    let total = row_to_col.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(Assignment {
        row_to_col,
        cost: total,
    })
}

/// Maximizes total weight by minimizing `max(weight) − weight`.
pub fn solve_max(weight: &Matrix) -> Result<Assignment> {
    let top = weight.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = if top.is_finite() { top } else { 0.0 };
    let cost = weight.map(|w| top - w);
    let a = solve_min(&cost)?;
    let total = a.row_to_col.iter().enumerate().map(|(i, &j)| weight[(i, j)]).sum();
    Ok(Assignment {
        row_to_col: a.row_to_col,
        cost: total,
    })
}

/// Among all minimum-cost assignments, the one whose `row_to_col` vector is lexicographically
/// smallest. Optimality is judged with a relative tolerance of `1e-9`.
pub fn solve_min_lexicographic(cost: &Matrix) -> Result<Assignment> {
    let best = solve_min(cost)?;
    let (n, m) = cost.shape();
    let tol = 1e-9 * best.cost.abs().max(1.0);
    let mut used = vec![false; m];
    let mut chosen = Vec::with_capacity(n);
    let mut prefix = 0.0;
    for i in 0..n {
        let mut fixed = None;
        for j in 0..m {
            if used[j] {
                continue;
            }
            used[j] = true;
            let rest_cols: Vec<usize> = (0..m).filter(|&c| !used[c]).collect();
            let rest_rows: Vec<usize> = (i + 1..n).collect();
            let sub = cost.select_rows(&rest_rows).select_cols(&rest_cols);
            let rest = solve_min(&sub)?.cost;
            if prefix + cost[(i, j)] + rest <= best.cost + tol {
                fixed = Some(j);
                break;
            }
            used[j] = false;
        }
        let j = fixed.expect("an optimal completion always exists");
        prefix += cost[(i, j)];
        chosen.push(j);
    }
    Ok(Assignment {
        cost: chosen.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum(),
        row_to_col: chosen,
    })
}
