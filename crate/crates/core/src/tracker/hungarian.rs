//! Minimum-cost assignment (Kuhn-Munkres).
//!
//! Rectangular inputs are padded with zero-cost rows or columns to a square
//! matrix. Among all optimal assignments the lexicographically smallest one
//! (by the column of row 0, then row 1, ...) is returned, so results do not
//! depend on incidental solver order.

/// Result of [`hungarian`]: assignment pairs restricted to real rows and
/// columns, plus the total cost of those pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Solves the assignment problem for `cost` (rows x cols, row-major slices).
///
/// Costs must be finite and non-negative.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            total: 0.0,
        };
    }
    let n = rows.max(cols);
    let c = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };

    let (row_to_col, u, v) = solve_square(n, &c);
    let row_to_col = lexicographic_min(n, &c, row_to_col, &u, &v);

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (i, &j) in row_to_col.iter().enumerate().take(rows) {
        if j < cols {
            pairs.push((i, j));
            total += cost[i][j];
        }
    }
    Assignment { pairs, total }
}

/// Shortest augmenting path Hungarian method with dual potentials, O(n^3).
/// Returns the row -> column assignment and the row/column potentials.
fn solve_square(n: usize, c: &impl Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based arrays with index 0 as the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Walks rows in order and gives each the smallest column that still admits
/// an optimal completion. With optimal duals, an assignment is optimal iff it
/// only uses tight edges (zero reduced cost), so this is a search for the
/// lexicographically smallest perfect matching of the tight-edge graph.
fn lexicographic_min(
    n: usize,
    c: &impl Fn(usize, usize) -> f64,
    mut row_to_col: Vec<usize>,
    u: &[f64],
    v: &[f64],
) -> Vec<usize> {
    let mut scale = 1.0f64;
    for i in 0..n {
        for j in 0..n {
            scale = scale.max(c(i, j).abs());
        }
    }
    let tol = 1e-9 * scale * n as f64;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| (c(i, j) - u[i] - v[j]).abs() <= tol).collect())
        .collect();
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }

    for i in 0..n {
        for j in 0..n {
            if !tight[i][j] {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            let owner = col_to_row[j];
            if owner < i {
                continue; // fixed by an earlier row
            }
            // Tentatively give j to row i; `owner` must reach the column
            // released by row i through an alternating path over rows > i.
            let released = row_to_col[i];
            if let Some(path) = alternating_path(&tight, &row_to_col, &col_to_row, owner, released, i) {
                // path: sequence of (row, new col)
                for &(r, col) in &path {
                    row_to_col[r] = col;
                    col_to_row[col] = r;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
    }
    row_to_col
}

/// BFS from `start_row` for an alternating path of tight edges ending at
/// `target_col`, moving only rows greater than `fixed_upto`. Returns the
/// `(row, new column)` re-assignments along the path.
fn alternating_path(
    tight: &[Vec<bool>],
    row_to_col: &[usize],
    col_to_row: &[usize],
    start_row: usize,
    target_col: usize,
    fixed_upto: usize,
) -> Option<Vec<(usize, usize)>> {
    let n = tight.len();
    // parent[col] = row that reached col
    let mut parent = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    let mut seen_row = vec![false; n];
    queue.push_back(start_row);
    seen_row[start_row] = true;
    // The column currently held by `start_row` (the contested column) must
    // not be re-entered.
    let contested = row_to_col[start_row];
    while let Some(r) = queue.pop_front() {
        for col in 0..n {
            if !tight[r][col] || parent[col] != usize::MAX || col == contested {
                continue;
            }
            if col != target_col {
                let next = col_to_row[col];
                if next <= fixed_upto || seen_row[next] {
                    continue;
                }
                parent[col] = r;
                seen_row[next] = true;
                queue.push_back(next);
            } else {
                parent[col] = r;
                let mut path = Vec::new();
                let mut col = target_col;
                loop {
                    let row = parent[col];
                    path.push((row, col));
                    if row == start_row {
                        break;
                    }
                    col = row_to_col[row];
                }
                return Some(path);
            }
        }
    }
    None
}
