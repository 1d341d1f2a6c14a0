//! Maximum-weight bipartite matching with a deterministic tie order.
//!
//! Among all matchings with the largest total weight, the solver prefers the
//! one with more pairs, and among those the lexicographically smallest sequence
//! of `(row, col)` pairs sorted by row. Weights are integers so that optimal
//! values and ties are exact.
//!
//! The problem is embedded in a square assignment problem with one dummy column
//! per row ("row left unmatched") and one dummy row per column, solved by the
//! shortest augmenting path form of the Hungarian method. The tie order is then
//! realised by fixing rows one at a time: a candidate choice is only re-solved
//! when it is tight under the current dual potentials, since an edge with
//! positive reduced cost cannot belong to any optimal assignment.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Real(usize),
    Dummy,
}

struct Problem<'a> {
    weights: &'a [Vec<Option<i64>>],
    /// Weight multiplier that makes cardinality a strict secondary objective.
    scale: i64,
    forbidden: i64,
    rows: Vec<Node>,
    cols: Vec<Node>,
}

struct Solution {
    value: i64,
    /// Row position to column position.
    assign: Vec<usize>,
    u: Vec<i64>,
    v: Vec<i64>,
}

impl<'a> Problem<'a> {
    fn boosted(&self, row: usize, col: usize) -> Option<i64> {
        self.weights[row][col].map(|w| w * self.scale + 1)
    }

    fn cost(&self, r: Node, c: Node) -> i64 {
        match (r, c) {
            (Node::Real(i), Node::Real(j)) => match self.boosted(i, j) {
                Some(w) => -w,
                None => self.forbidden,
            },
            _ => 0,
        }
    }

    fn solve(&self) -> Solution {
        let n = self.rows.len();
        debug_assert_eq!(n, self.cols.len());
        if n == 0 {
            return Solution {
                value: 0,
                assign: Vec::new(),
                u: Vec::new(),
                v: Vec::new(),
            };
        }
        let cost: Vec<Vec<i64>> = self
            .rows
            .iter()
            .map(|&r| self.cols.iter().map(|&c| self.cost(r, c)).collect())
            .collect();
        let (assign, u, v) = hungarian(&cost);
        let total: i64 = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        Solution {
            value: -total,
            assign,
            u,
            v,
        }
    }

    fn without(&self, row_pos: usize, col_pos: usize) -> Problem<'a> {
        let mut rows = self.rows.clone();
        let mut cols = self.cols.clone();
        rows.remove(row_pos);
        cols.remove(col_pos);
        Problem {
            weights: self.weights,
            scale: self.scale,
            forbidden: self.forbidden,
            rows,
            cols,
        }
    }

    fn reduced_cost(&self, sol: &Solution, row_pos: usize, col_pos: usize) -> i64 {
        self.cost(self.rows[row_pos], self.cols[col_pos]) - sol.u[row_pos] - sol.v[col_pos]
    }
}

impl Solution {
    /// The optimal solution of the problem with one assigned pair removed.
    fn without(&self, row_pos: usize, col_pos: usize) -> Solution {
        debug_assert_eq!(self.assign[row_pos], col_pos);
        let mut assign = self.assign.clone();
        assign.remove(row_pos);
        for c in &mut assign {
            if *c > col_pos {
                *c -= 1;
            }
        }
        let mut u = self.u.clone();
        let mut v = self.v.clone();
        u.remove(row_pos);
        v.remove(col_pos);
        Solution {
            value: 0,
            assign,
            u,
            v,
        }
    }
}

/// Min-cost perfect assignment on a square matrix. Returns the column assigned
/// to each row and dual potentials `u`, `v` with `cost[i][j] - u[i] - v[j] >= 0`,
/// equality on assigned cells.
fn hungarian(cost: &[Vec<i64>]) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root.
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Solves the matching problem described in the module docs.
///
/// `weights[row][col]` is `Some(w)` with `w >= 0` for an allowed edge and `None`
/// otherwise. Returns the column matched to each row.
///
/// Connected components of the allowed-edge graph are solved independently.
/// The tie order decomposes too: the first row where two optimal matchings
/// differ lies in a single component, whose own tie order decides it.
pub fn max_weight_matching(weights: &[Vec<Option<i64>>]) -> Vec<Option<usize>> {
    let n_rows = weights.len();
    let n_cols = weights.first().map_or(0, Vec::len);
    let mut result = vec![None; n_rows];
    for (rows, cols) in components(weights, n_cols) {
        let sub: Vec<Vec<Option<i64>>> = rows
            .iter()
            .map(|&r| cols.iter().map(|&c| weights[r][c]).collect())
            .collect();
        for (local_row, choice) in solve_component(&sub).into_iter().enumerate() {
            result[rows[local_row]] = choice.map(|c| cols[c]);
        }
    }
    result
}

/// Row and column index sets (ascending) of each component with at least one edge.
fn components(weights: &[Vec<Option<i64>>], n_cols: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n_rows = weights.len();
    // Union-find over rows 0..n_rows and columns n_rows..n_rows + n_cols.
    let mut parent: Vec<usize> = (0..n_rows + n_cols).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (r, row) in weights.iter().enumerate() {
        assert_eq!(row.len(), n_cols, "ragged weight matrix");
        for (c, w) in row.iter().enumerate() {
            if let Some(w) = w {
                assert!(*w >= 0, "negative edge weight");
                let a = find(&mut parent, r);
                let b = find(&mut parent, n_rows + c);
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> =
        Default::default();
    for (r, row) in weights.iter().enumerate() {
        if row.iter().any(Option::is_some) {
            let root = find(&mut parent, r);
            groups.entry(root).or_default().0.push(r);
        }
    }
    for c in 0..n_cols {
        if weights.iter().any(|row| row[c].is_some()) {
            let root = find(&mut parent, n_rows + c);
            groups.entry(root).or_default().1.push(c);
        }
    }
    groups.into_values().collect()
}

fn solve_component(weights: &[Vec<Option<i64>>]) -> Vec<Option<usize>> {
    let n_rows = weights.len();
    let n_cols = weights.first().map_or(0, Vec::len);
    let mut result = vec![None; n_rows];
    if n_rows == 0 || n_cols == 0 {
        return result;
    }

    let scale = n_rows.min(n_cols) as i64 + 1;
    let total: i64 = weights
        .iter()
        .flatten()
        .flatten()
        .map(|&w| w * scale + 1)
        .sum();
    let mut problem = Problem {
        weights,
        scale,
        forbidden: total + 1,
        rows: (0..n_rows)
            .map(Node::Real)
            .chain((0..n_cols).map(|_| Node::Dummy))
            .collect(),
        cols: (0..n_cols)
            .map(Node::Real)
            .chain((0..n_rows).map(|_| Node::Dummy))
            .collect(),
    };
    let mut sol = problem.solve();
    let mut target = sol.value;

    for row in 0..n_rows {
        // Rows are fixed in order, so the current row is always at position 0.
        debug_assert_eq!(problem.rows[0], Node::Real(row));
        let current_col = sol.assign[0];
        let current = problem.cols[current_col];

        let mut chosen = None;
        let candidates = problem
            .cols
            .iter()
            .enumerate()
            .filter_map(|(pos, c)| match *c {
                Node::Real(j) if weights[row][j].is_some() => Some((pos, j)),
                _ => None,
            });
        for (pos, col) in candidates {
            if current == Node::Real(col) {
                chosen = Some(Choice::Keep);
                break;
            }
            if problem.reduced_cost(&sol, 0, pos) != 0 {
                continue;
            }
            let reduced = problem.without(0, pos);
            let trial = reduced.solve();
            let edge = problem.boosted(row, col).expect("allowed edge");
            if trial.value + edge == target {
                chosen = Some(Choice::Resolved(col, reduced, trial, target - edge));
                break;
            }
        }
        // Leaving the row unmatched sorts after every matched option, so it is
        // only taken when no allowed column is optimal, i.e. the current optimum
        // already leaves it unmatched.
        let chosen = chosen.unwrap_or(Choice::Keep);

        match chosen {
            Choice::Keep => {
                if let Node::Real(col) = current {
                    result[row] = Some(col);
                    target -= problem.boosted(row, col).expect("allowed edge");
                }
                sol = sol.without(0, current_col);
                problem = problem.without(0, current_col);
            }
            Choice::Resolved(col, reduced, trial, rest) => {
                result[row] = Some(col);
                problem = reduced;
                sol = trial;
                target = rest;
            }
        }
    }
    result
}

enum Choice<'a> {
    Keep,
    Resolved(usize, Problem<'a>, Solution, i64),
}
