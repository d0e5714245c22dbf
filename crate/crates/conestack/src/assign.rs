//! Minimum-cost one-to-one assignment (Hungarian algorithm with
//! potentials), used for gated map matching in evaluation.

/// Solve the square assignment problem for `cost[i][j]`; returns the column
/// assigned to each row. O(n^3).
fn solve_square(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-indexed potentials over rows (u) and columns (v); p[j] is the row
    // matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Gated rectangular assignment: rows and columns are matched one-to-one
/// minimizing total cost, where any pair with cost above `gate` (and any
/// row/column surplus) stays unmatched. Returns `row -> Some(col)`.
///
/// Implemented by padding to a square matrix in which every out-of-gate or
/// dummy pairing costs exactly `gate`; matching an in-gate pair can then
/// only lower the total, so the solution has maximum gated cardinality and
/// minimum cost among those.
pub fn assign_with_gate(cost: &[Vec<f64>], gate: f64) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = if rows > 0 { cost[0].len() } else { 0 };
    if rows == 0 {
        return Vec::new();
    }
    if cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let padded: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < rows && j < cols && cost[i][j] <= gate {
                        cost[i][j]
                    } else {
                        gate
                    }
                })
                .collect()
        })
        .collect();
    let assignment = solve_square(&padded);
    (0..rows)
        .map(|i| {
            let j = assignment[i];
            (j < cols && cost[i][j] <= gate && cost[i][j] < gate).then_some(j)
        })
        .collect()
}
