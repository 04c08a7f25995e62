//! Maximum-profit linear assignment.
//!
//! A shortest-augmenting-path Hungarian solver finds an optimal assignment
//! together with dual potentials. Every optimal assignment uses only edges
//! that are tight under those potentials, so the lexicographically smallest
//! perfect matching of the tight-edge graph is the optimal assignment closest
//! to the identity. Ties are therefore broken deterministically toward the
//! identity permutation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `map[i]` is the source index placed in output slot `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Permutation { map: (0..k).collect() }
    }

    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Validation(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Permutation { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { map: inv }
    }

    /// `self ∘ other`: applying `other` first, then `self`, equals applying this.
    /// With the gather convention `out[i] = in[map[i]]`, the result is
    /// `out[i] = in[other.map[self.map[i]]]`.
    pub fn compose(&self, other: &Permutation) -> Permutation {
        assert_eq!(self.len(), other.len(), "composing permutations of different sizes");
        Permutation { map: self.map.iter().map(|&j| other.map[j]).collect() }
    }

    /// Gathers `values` into slot order.
    pub fn apply<T: Clone>(&self, values: &[T]) -> Vec<T> {
        self.map.iter().map(|&j| values[j].clone()).collect()
    }
}

/// `Σ_i profit[i, map[i]]`, summed in row order.
pub fn assignment_profit(profit: &Matrix, perm: &Permutation) -> f64 {
    perm.map.iter().enumerate().map(|(i, &j)| profit[(i, j)]).sum()
}

/// Returns the profit-maximizing bijection; among co-optimal ones, the
/// lexicographically smallest map.
pub fn solve_lap(profit: &Matrix) -> Result<Permutation> {
    let k = profit.rows();
    if profit.cols() != k {
        return Err(Error::Domain(format!("profit matrix must be square, got {}x{}", k, profit.cols())));
    }
    if let Some(x) = profit.as_slice().iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("profit matrix has non-finite entry {x}")));
    }
    if k == 0 {
        return Ok(Permutation::identity(0));
    }

    let (hungarian, u, v) = hungarian_min(profit);
    let scale = profit.max_abs().max(1.0);
    let tol = 1e-9 * scale;
    let mut tight = vec![false; k * k];
    for i in 0..k {
        for j in 0..k {
            let reduced = -profit[(i, j)] - u[i] - v[j];
            tight[i * k + j] = reduced <= tol;
        }
        tight[i * k + hungarian[i]] = true;
    }
    let lex = lex_min_matching(k, &tight, hungarian.clone());

    let found = Permutation { map: hungarian };
    let lex = Permutation { map: lex };
    if assignment_profit(profit, &lex) < assignment_profit(profit, &found) {
        return Ok(found);
    }
    Ok(lex)
}

/// Hungarian algorithm on `cost = −profit` with row potentials `u` and column
/// potentials `v` such that `cost[i][j] − u[i] − v[j] ≥ 0`, with equality on
/// the returned assignment.
fn hungarian_min(profit: &Matrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = profit.rows();
    let cost = |i: usize, j: usize| -profit[(i, j)];
    // 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    (assignment, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching in the bipartite graph given by
/// `tight`, starting from the perfect matching `start`.
fn lex_min_matching(k: usize, tight: &[bool], start: Vec<usize>) -> Vec<usize> {
    let mut row_of = vec![0usize; k];
    let mut col_of = start;
    for (i, &j) in col_of.iter().enumerate() {
        row_of[j] = i;
    }
    let mut fixed_col = vec![false; k];

    for i in 0..k {
        for j in 0..k {
            if fixed_col[j] || !tight[i * k + j] {
                continue;
            }
            if col_of[i] == j {
                break;
            }
            // Put i on j; the row displaced from j must reach i's old column
            // along an alternating path through unfixed rows (> i) and columns.
            let freed = col_of[i];
            let displaced = row_of[j];
            let mut trial_col = col_of.clone();
            let mut trial_row = row_of.clone();
            trial_col[i] = j;
            trial_row[j] = i;
            let mut visited = vec![false; k];
            visited[j] = true;
            if reroute(displaced, freed, i, k, tight, &fixed_col, &mut visited, &mut trial_col, &mut trial_row) {
                col_of = trial_col;
                row_of = trial_row;
                break;
            }
        }
        fixed_col[col_of[i]] = true;
    }
    col_of
}

#[allow(clippy::too_many_arguments)]
fn reroute(
    row: usize,
    target: usize,
    pinned: usize,
    k: usize,
    tight: &[bool],
    fixed_col: &[bool],
    visited: &mut [bool],
    col_of: &mut [usize],
    row_of: &mut [usize],
) -> bool {
    for c in 0..k {
        if visited[c] || fixed_col[c] || !tight[row * k + c] {
            continue;
        }
        visited[c] = true;
        let take = if c == target {
            true
        } else {
            let next = row_of[c];
            next != pinned && reroute(next, target, pinned, k, tight, fixed_col, visited, col_of, row_of)
        };
        if take {
            col_of[row] = c;
            row_of[c] = row;
            return true;
        }
    }
    false
}
