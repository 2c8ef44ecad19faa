//! Exact discrete transport by network simplex on the bipartite
//! transportation graph.
//!
//! The basis is a spanning tree over the `m` supply and `n` demand nodes with
//! `m + n - 1` basic cells. Each pivot prices all non-basic cells against the
//! node potentials, pushes flow around the cycle closed by the entering cell
//! and drops the first blocking cell.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::{check_marginal, marginal_errors, CostMatrix, Solver, TransportPlan};
use crate::error::{Error, Result};

/// Default cap on `m * n` for the exact solver.
pub const DEFAULT_EXACT_CAP: usize = 512 * 512;

const NONE: usize = usize::MAX;

struct Basis {
    m: usize,
    n: usize,
    /// Basic cells `(row, col)` and their flows; slots are reused on pivot.
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    is_basic: Vec<bool>,
    /// Slots incident to each node; rows are nodes `0..m`, columns `m..m+n`.
    adjacent: Vec<Vec<usize>>,
    potential: Vec<f64>,
    parent_slot: Vec<usize>,
    depth: Vec<usize>,
}

impl Basis {
    /// Northwest-corner start: a staircase spanning tree.
    fn northwest(a: &DVector<f64>, b: &DVector<f64>) -> Self {
        let (m, n) = (a.len(), b.len());
        let mut basis = Basis {
            m,
            n,
            cells: Vec::with_capacity(m + n - 1),
            flow: Vec::with_capacity(m + n - 1),
            is_basic: vec![false; m * n],
            adjacent: vec![Vec::new(); m + n],
            potential: vec![0.0; m + n],
            parent_slot: vec![NONE; m + n],
            depth: vec![0; m + n],
        };
        let mut supply = a.as_slice().to_vec();
        let mut demand = b.as_slice().to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let q = supply[i].min(demand[j]);
            supply[i] -= q;
            demand[j] -= q;
            basis.push(i, j, q);
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && supply[i] <= demand[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        basis
    }

    fn push(&mut self, i: usize, j: usize, q: f64) {
        let slot = self.cells.len();
        self.cells.push((i, j));
        self.flow.push(q);
        self.is_basic[i * self.n + j] = true;
        self.adjacent[i].push(slot);
        self.adjacent[self.m + j].push(slot);
    }

    fn other_end(&self, slot: usize, node: usize) -> usize {
        let (i, j) = self.cells[slot];
        if node == i {
            self.m + j
        } else {
            i
        }
    }

    /// Potentials with `u_0 = 0` and `u_i + v_j = C_ij` on basic cells; also
    /// records the tree parents used to trace cycles.
    fn compute_potentials(&mut self, c: &DMatrix<f64>) {
        let total = self.m + self.n;
        self.parent_slot.iter_mut().for_each(|p| *p = NONE);
        let mut seen = vec![false; total];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        self.potential[0] = 0.0;
        self.depth[0] = 0;
        while let Some(node) = queue.pop_front() {
            for &slot in &self.adjacent[node] {
                let next = self.other_end(slot, node);
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let (i, j) = self.cells[slot];
                self.potential[next] = c[(i, j)] - self.potential[node];
                self.parent_slot[next] = slot;
                self.depth[next] = self.depth[node] + 1;
                queue.push_back(next);
            }
        }
        debug_assert!(seen.iter().all(|&s| s), "basis is not a spanning tree");
    }

    /// Tree path from `from` to `to` as the ordered list of slots.
    fn tree_path(&self, from: usize, to: usize) -> Vec<usize> {
        let (mut x, mut y) = (from, to);
        let mut head = Vec::new();
        let mut tail = Vec::new();
        while self.depth[x] > self.depth[y] {
            let s = self.parent_slot[x];
            head.push(s);
            x = self.other_end(s, x);
        }
        while self.depth[y] > self.depth[x] {
            let s = self.parent_slot[y];
            tail.push(s);
            y = self.other_end(s, y);
        }
        while x != y {
            let sx = self.parent_slot[x];
            head.push(sx);
            x = self.other_end(sx, x);
            let sy = self.parent_slot[y];
            tail.push(sy);
            y = self.other_end(sy, y);
        }
        head.extend(tail.into_iter().rev());
        head
    }

    fn pivot(&mut self, enter: (usize, usize)) {
        let (i, j) = enter;
        // Cycle: entering cell (+), then the tree path from column j back to
        // row i with alternating signs starting at (-).
        let path = self.tree_path(self.m + j, i);
        let mut leave = None;
        let mut theta = f64::INFINITY;
        for &slot in path.iter().step_by(2) {
            if self.flow[slot] < theta {
                theta = self.flow[slot];
                leave = Some(slot);
            }
        }
        let leave = leave.expect("cycle has a decreasing cell");
        for (k, &slot) in path.iter().enumerate() {
            if k % 2 == 0 {
                self.flow[slot] -= theta;
            } else {
                self.flow[slot] += theta;
            }
        }
        let (li, lj) = self.cells[leave];
        self.is_basic[li * self.n + lj] = false;
        self.adjacent[li].retain(|&s| s != leave);
        self.adjacent[self.m + lj].retain(|&s| s != leave);

        self.cells[leave] = (i, j);
        self.flow[leave] = theta;
        self.is_basic[i * self.n + j] = true;
        self.adjacent[i].push(leave);
        self.adjacent[self.m + j].push(leave);
    }
}

/// Optimal vertex of the transportation polytope `{T ≥ 0 : T1 = a, Tᵀ1 = b}`.
///
/// `cap` bounds `m * n`; larger problems should go through Sinkhorn.
pub fn exact_ot(cost: &CostMatrix, a: &DVector<f64>, b: &DVector<f64>, cap: usize) -> Result<TransportPlan> {
    let (m, n) = cost.shape();
    if m * n > cap {
        return Err(Error::TooLarge { rows: m, cols: n, cap });
    }
    if a.len() != m || b.len() != n {
        return Err(Error::invalid("marginal lengths do not match the cost matrix"));
    }
    check_marginal(a, "a")?;
    check_marginal(b, "b")?;
    // Rescale b so both sides carry identical total mass in floating point.
    let b = b * (a.sum() / b.sum());

    let c = cost.entries();
    let eps = 1e-13 * c.max().max(1.0);
    let mut basis = Basis::northwest(a, &b);
    let max_pivots = 50 * (m + n) * (m + n) + 1000;
    let mut pivots = 0;
    loop {
        basis.compute_potentials(c);
        let mut best = None;
        let mut best_rc = -eps;
        for i in 0..m {
            let ui = basis.potential[i];
            for j in 0..n {
                if basis.is_basic[i * n + j] {
                    continue;
                }
                let rc = c[(i, j)] - ui - basis.potential[m + j];
                if rc < best_rc {
                    best_rc = rc;
                    best = Some((i, j));
                }
            }
        }
        let Some(enter) = best else { break };
        if pivots == max_pivots {
            return Err(Error::NumericFailure(format!(
                "network simplex did not terminate within {max_pivots} pivots"
            )));
        }
        basis.pivot(enter);
        pivots += 1;
    }

    let mut entries = DMatrix::zeros(m, n);
    for (slot, &(i, j)) in basis.cells.iter().enumerate() {
        entries[(i, j)] = basis.flow[slot].max(0.0);
    }
    let marginal_error = marginal_errors(&entries, a, &b);
    Ok(TransportPlan {
        entries,
        row_marginal: a.clone(),
        col_marginal: b,
        solver: Solver::Exact,
        iterations: pivots,
        marginal_error,
        error_trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::transport_cost;
    use rand::Rng;

    /// Minimum over all permutations of `Σ C[i, π(i)] / n`.
    fn brute_force_assignment(c: &DMatrix<f64>) -> f64 {
        fn rec(c: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = c.ncols();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(c, row + 1, used, acc + c[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.ncols()], 0.0, &mut best);
        best / c.ncols() as f64
    }

    #[test]
    fn single_cell() {
        let c = CostMatrix::new(DMatrix::from_element(1, 1, 3.0)).unwrap();
        let one = DVector::from_element(1, 1.0);
        let plan = exact_ot(&c, &one, &one, DEFAULT_EXACT_CAP).unwrap();
        assert_eq!(plan.entries[(0, 0)], 1.0);
    }

    #[test]
    fn zero_cost_matching() {
        let c = CostMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let h = DVector::from_element(2, 0.5);
        let plan = exact_ot(&c, &h, &h, DEFAULT_EXACT_CAP).unwrap();
        assert_eq!(plan.entries, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]));
        assert_eq!(transport_cost(&c, &plan).unwrap(), 0.0);
    }

    #[test]
    fn matches_permutation_enumeration() {
        let mut r = crate::rng::stream(11, 0);
        for n in 2..=6 {
            for _ in 0..10 {
                let c = CostMatrix::new(DMatrix::from_fn(n, n, |_, _| r.gen_range(0.0..1.0))).unwrap();
                let u = DVector::from_element(n, 1.0 / n as f64);
                let plan = exact_ot(&c, &u, &u, DEFAULT_EXACT_CAP).unwrap();
                let got = transport_cost(&c, &plan).unwrap();
                assert!((got - brute_force_assignment(c.entries())).abs() <= 1e-12);
                assert!(plan.marginal_error <= 1e-9);
            }
        }
    }

    #[test]
    fn vertex_solution_is_sparse() {
        let mut r = crate::rng::stream(12, 0);
        for (m, n) in [(7, 4), (10, 13), (30, 30)] {
            let c = CostMatrix::new(DMatrix::from_fn(m, n, |_, _| r.gen_range(0.0..1.0))).unwrap();
            let mk = |k: usize, r: &mut crate::rng::Rng| {
                let v = DVector::from_fn(k, |_, _| r.gen_range(0.1..1.0));
                let s = v.sum();
                v / s
            };
            let a = mk(m, &mut r);
            let b = mk(n, &mut r);
            let plan = exact_ot(&c, &a, &b, DEFAULT_EXACT_CAP).unwrap();
            let positive = plan.entries.iter().filter(|&&t| t > 1e-12).count();
            assert!(positive < m + n);
            assert!(plan.marginal_error <= 1e-9);
            assert!((plan.entries.sum() - 1.0).abs() <= 1e-9);
            assert!(plan.entries.iter().all(|&t| t >= 0.0));
        }
    }

    #[test]
    fn cap_is_enforced() {
        let c = CostMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let u = DVector::from_element(3, 1.0 / 3.0);
        assert!(matches!(exact_ot(&c, &u, &u, 8), Err(Error::TooLarge { .. })));
    }
}
