//! Discrete optimal transport between two dictionaries.

mod exact;
mod sinkhorn;

pub use exact::{exact_ot, DEFAULT_EXACT_CAP};
pub use sinkhorn::{sinkhorn, SinkhornOptions};

use nalgebra::{DMatrix, DVector};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};

/// Pairwise ground cost, `m x n`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("cost matrix must be non-empty"));
        }
        if entries.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid("cost entries must be finite and non-negative"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    pub fn mean(&self) -> f64 {
        self.entries.mean()
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            entries: self.entries.transpose(),
        }
    }
}

/// How a plan was produced and how well it meets its marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Exact,
    Sinkhorn,
    /// Sinkhorn iterates evaluated on log-scaled potentials.
    SinkhornLog,
}

/// Non-negative coupling with its target marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub entries: DMatrix<f64>,
    pub row_marginal: DVector<f64>,
    pub col_marginal: DVector<f64>,
    pub solver: Solver,
    pub iterations: usize,
    /// `max(||T1 - a||₁, ||Tᵀ1 - b||₁)` at exit.
    pub marginal_error: f64,
    /// Marginal error after each full scaling update (Sinkhorn only).
    pub error_trace: Vec<f64>,
}

impl TransportPlan {
    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    /// Swaps the roles of the two sides.
    pub fn transpose(&self) -> TransportPlan {
        TransportPlan {
            entries: self.entries.transpose(),
            row_marginal: self.col_marginal.clone(),
            col_marginal: self.row_marginal.clone(),
            solver: self.solver,
            iterations: self.iterations,
            marginal_error: self.marginal_error,
            error_trace: self.error_trace.clone(),
        }
    }

    /// Writes the plan as CSV: a header row `i,j,T`, then one line per entry,
    /// followed by marginal rows `a,i,value` and `b,j,value`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::from("kind,i,j,value\n");
        let (m, n) = self.shape();
        for i in 0..m {
            for j in 0..n {
                let _ = writeln!(out, "T,{i},{j},{:e}", self.entries[(i, j)]);
            }
        }
        for (i, v) in self.row_marginal.iter().enumerate() {
            let _ = writeln!(out, "a,{i},,{v:e}");
        }
        for (j, v) in self.col_marginal.iter().enumerate() {
            let _ = writeln!(out, "b,,{j},{v:e}");
        }
        out
    }
}

/// `C[i, j] = ||x_i - y_j||²`.
pub fn cost_matrix(dx: &Dictionary, dy: &Dictionary) -> Result<CostMatrix> {
    if dx.dim() != dy.dim() {
        return Err(Error::invalid(format!(
            "atom dimensions differ: {} vs {}",
            dx.dim(),
            dy.dim()
        )));
    }
    let (x, y) = (dx.atoms(), dy.atoms());
    let entries = DMatrix::from_fn(x.ncols(), y.ncols(), |i, j| {
        x.column(i)
            .iter()
            .zip(y.column(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    });
    CostMatrix::new(entries)
}

/// Frobenius inner product `<C, T>`.
pub fn transport_cost(cost: &CostMatrix, plan: &TransportPlan) -> Result<f64> {
    if cost.shape() != plan.shape() {
        return Err(Error::invalid("cost and plan shapes differ"));
    }
    Ok(cost.entries().dot(&plan.entries))
}

pub(crate) fn check_marginal(v: &DVector<f64>, name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("marginal {name} is empty")));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::invalid(format!("marginal {name} must be strictly positive")));
    }
    let total = v.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("marginal {name} sums to {total}, not 1")));
    }
    Ok(())
}

pub(crate) fn marginal_errors(t: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let rows = (t.column_sum() - a).lp_norm(1);
    let cols = (t.row_sum().transpose() - b).lp_norm(1);
    rows.max(cols)
}
