//! Exhaustive assignment used to cross-check the Hungarian solver.

/// Exhaustive minimum over injective maps from the smaller side, returning
/// the lexicographically smallest optimal pair list.
pub fn brute_force_assignment(
    cost: &[f64],
    rows: usize,
    cols: usize,
) -> (f64, Vec<(usize, usize)>) {
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        need: usize,
        cost: &[f64],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if cur.len() == need {
            let total: f64 = cur.iter().map(|&(i, j)| cost[i * cols + j]).sum();
            if total < best.0 || (total == best.0 && *cur < best.1) {
                *best = (total, cur.clone());
            }
            return;
        }
        if r == rows || rows - r < need - cur.len() {
            return;
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                cur.push((r, j));
                rec(r + 1, rows, cols, need, cost, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
        rec(r + 1, rows, cols, need, cost, used, cur, best);
    }
    let mut best = (f64::INFINITY, Vec::new());
    rec(
        0,
        rows,
        cols,
        rows.min(cols),
        cost,
        &mut vec![false; cols],
        &mut Vec::new(),
        &mut best,
    );
    best
}
