//! Kuhn–Munkres via shortest augmenting paths on a square-padded matrix,
//! followed by a lexicographic tie-break over the optimal face.

use super::MatchError;

/// Optimal one-to-one assignment of a `rows x cols` cost matrix (row-major).
///
/// Returns `min(rows, cols)` pairs sorted by row. Among all optimal
/// assignments the lexicographically smallest pair list is returned.
pub fn hungarian(
    cost: &[f64],
    rows: usize,
    cols: usize,
) -> Result<Vec<(usize, usize)>, MatchError> {
    if cost.len() != rows * cols {
        return Err(MatchError::Shape(format!(
            "cost has {} entries, expected {rows}x{cols}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().find(|v| !v.is_finite()) {
        return Err(MatchError::Numeric(format!("non-finite cost {bad}")));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let n = rows.max(cols);
    let big = cost.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pad = (big + 1.0) * (rows + cols) as f64;
    let mut a = vec![pad; n * n];
    for r in 0..rows {
        a[r * n..r * n + cols].copy_from_slice(&cost[r * cols..(r + 1) * cols]);
    }
    let (u, v, mut row_of) = solve(&a, n);

    // An assignment is optimal iff it only uses edges with zero reduced cost
    // under the optimal duals, so ties are resolved inside that subgraph.
    let tol = 1e-9 * (pad + 1.0);
    let tight: Vec<bool> = (0..n * n)
        .map(|idx| a[idx] - u[idx / n] - v[idx % n] <= tol)
        .collect();
    let mut col_of = vec![0usize; n];
    for (j, &i) in row_of.iter().enumerate() {
        col_of[i] = j;
    }
    let mut row_fixed = vec![false; n];
    let mut col_fixed = vec![false; n];
    for i in 0..rows {
        for j in 0..n {
            if !tight[i * n + j] || col_fixed[j] {
                continue;
            }
            if col_of[i] == j
                || reroute(
                    i,
                    j,
                    n,
                    &tight,
                    &row_fixed,
                    &col_fixed,
                    &mut col_of,
                    &mut row_of,
                )
            {
                row_fixed[i] = true;
                col_fixed[j] = true;
                break;
            }
        }
    }
    Ok((0..rows)
        .filter(|&i| col_of[i] < cols)
        .map(|i| (i, col_of[i]))
        .collect())
}

/// Shortest-augmenting-path solver on an `n x n` matrix. Returns row duals,
/// column duals and the row assigned to each column.
fn solve(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based with a virtual column 0, as in the classical O(n^3) layout
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let row_of = (1..=n).map(|j| p[j] - 1).collect();
    (u[1..].to_vec(), v[1..].to_vec(), row_of)
}

/// Tries to move row `i` onto column `j` while keeping a perfect matching on
/// tight edges. The row currently holding `j` must find an alternating path
/// that ends at the column `i` gives up.
#[allow(clippy::too_many_arguments)]
fn reroute(
    i: usize,
    j: usize,
    n: usize,
    tight: &[bool],
    row_fixed: &[bool],
    col_fixed: &[bool],
    col_of: &mut [usize],
    row_of: &mut [usize],
) -> bool {
    let freed = col_of[i];
    let displaced = row_of[j];
    let (saved_cols, saved_rows) = (col_of.to_vec(), row_of.to_vec());
    col_of[i] = j;
    row_of[j] = i;
    let mut seen = vec![false; n];
    seen[j] = true;
    if augment(
        displaced, freed, n, tight, row_fixed, col_fixed, &mut seen, col_of, row_of,
    ) {
        return true;
    }
    col_of.copy_from_slice(&saved_cols);
    row_of.copy_from_slice(&saved_rows);
    false
}

#[allow(clippy::too_many_arguments)]
fn augment(
    r: usize,
    free: usize,
    n: usize,
    tight: &[bool],
    row_fixed: &[bool],
    col_fixed: &[bool],
    seen: &mut [bool],
    col_of: &mut [usize],
    row_of: &mut [usize],
) -> bool {
    for c in 0..n {
        if seen[c] || col_fixed[c] || !tight[r * n + c] {
            continue;
        }
        seen[c] = true;
        let ok = c == free || {
            let next = row_of[c];
            !row_fixed[next]
                && augment(
                    next, free, n, tight, row_fixed, col_fixed, seen, col_of, row_of,
                )
        };
        if ok {
            col_of[r] = c;
            row_of[c] = r;
            return true;
        }
    }
    false
}
