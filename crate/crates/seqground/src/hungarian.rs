//! Minimum-cost assignment for square matrices in `O(n³)`.
//!
//! Shortest-augmenting-path formulation with row/column potentials: rows are
//! inserted one at a time, each insertion growing an alternating tree until a
//! free column is found. Costs may be negative; only finiteness is required.

use ndarray::Array2;

/// Return `assign` such that row `i` is matched to column `assign[i]` and the
/// total cost is minimal. `cost` must be square with finite entries.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    assert!(
        cost.iter().all(|c| c.is_finite()),
        "assignment costs must be finite"
    );
    if n == 0 {
        return Vec::new();
    }

    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1]; // row potentials
    let mut v = vec![0.0f64; n + 1]; // column potentials
    let mut matched = vec![0usize; n + 1]; // matched[j] = row occupying column j
    let mut way = vec![0usize; n + 1]; // predecessor column on the alternating path

    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path, flipping matches.
        while j0 != 0 {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[matched[j] - 1] = j - 1;
    }
    assign
}

/// Total cost of an assignment under `cost`.
pub fn assignment_cost(cost: &Array2<f64>, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum()
}
