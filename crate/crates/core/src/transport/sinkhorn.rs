//! Entropy-regularized transport by Sinkhorn-Knopp scaling.
//!
//! With `M = exp(-C / η)` and `v = 1`, each iteration sets
//! `u = a ⊘ (M v)` then `v = b ⊘ (Mᵀ u)`; the plan is `diag(u) M diag(v)`.
//! When the kernel or the scalings leave `[1e-100, 1e100]` the same iterates
//! are evaluated on log potentials `f = η ln u`, `g = η ln v`.

use nalgebra::{DMatrix, DVector};

use super::{check_marginal, marginal_errors, CostMatrix, Solver, TransportPlan};
use crate::error::{Error, Result};

const SCALE_MIN: f64 = 1e-100;
const SCALE_MAX: f64 = 1e100;
/// Iterations without a new lowest error before relaxation is abandoned.
const STALL_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub max_iters: usize,
    /// Stop once the L1 marginal error is at most this.
    pub tol: f64,
    /// Divide the cost by its largest entry before building the kernel, so
    /// `eta` is relative to a unit cost scale.
    pub normalize_cost: bool,
    /// Over-relaxation factor `ω` in `[1, 2)`; `u ← u^(1-ω) (a ⊘ Mv)^ω` and
    /// likewise for `v`. The fixed point does not depend on `ω`; `1.0` is the
    /// plain iteration. The first update is always plain, and the solver
    /// drops to `1.0` for good if the marginal error stops reaching new lows.
    pub relaxation: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-9,
            normalize_cost: true,
            relaxation: 1.5,
        }
    }
}

/// Entropic transport plan between simplex vectors `a` and `b`.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: &DVector<f64>,
    b: &DVector<f64>,
    eta: f64,
    opts: &SinkhornOptions,
) -> Result<TransportPlan> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    let (m, n) = cost.shape();
    if a.len() != m || b.len() != n {
        return Err(Error::invalid("marginal lengths do not match the cost matrix"));
    }
    check_marginal(a, "a")?;
    check_marginal(b, "b")?;
    if !(1.0..2.0).contains(&opts.relaxation) {
        return Err(Error::invalid(format!("relaxation must lie in [1, 2), got {}", opts.relaxation)));
    }

    let c = cost.entries();
    let peak = c.max();
    let c = if opts.normalize_cost && peak > 0.0 {
        c / peak
    } else {
        c.clone()
    };

    let mut state = Scaling::new(&c, eta);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut omega = 1.0;
    let (mut best, mut best_at) = (f64::INFINITY, 0);
    while iterations < opts.max_iters {
        iterations += 1;
        let err = state.step(&c, a, b, eta, omega)?;
        if err < best {
            (best, best_at) = (err, iterations);
        }
        omega = if iterations == 1 {
            opts.relaxation
        } else if iterations - best_at > STALL_LIMIT {
            1.0
        } else {
            omega
        };
        trace.push(err);
        if err <= opts.tol {
            break;
        }
    }
    let entries = state.plan(&c, eta);
    if entries.iter().any(|t| !t.is_finite()) {
        return Err(Error::NumericFailure("non-finite transport plan".into()));
    }
    let marginal_error = marginal_errors(&entries, a, b);
    Ok(TransportPlan {
        entries,
        row_marginal: a.clone(),
        col_marginal: b.clone(),
        solver: if state.is_log() { Solver::SinkhornLog } else { Solver::Sinkhorn },
        iterations,
        marginal_error,
        error_trace: trace,
    })
}

enum Scaling {
    Plain {
        kernel: DMatrix<f64>,
        u: DVector<f64>,
        v: DVector<f64>,
        /// `M v` for the current `v`.
        kv: DVector<f64>,
    },
    Log {
        f: DVector<f64>,
        g: DVector<f64>,
        /// `LSE_j((g_j - C_ij) / η)` for the current `g`.
        row_lse: DVector<f64>,
    },
}

impl Scaling {
    fn new(c: &DMatrix<f64>, eta: f64) -> Self {
        let (m, n) = c.shape();
        if c.max() / eta > -SCALE_MIN.ln() {
            let g = DVector::zeros(n);
            let row_lse = row_lse(c, &g, eta);
            Scaling::Log {
                f: DVector::zeros(m),
                g,
                row_lse,
            }
        } else {
            let kernel = c.map(|x| (-x / eta).exp());
            let v = DVector::from_element(n, 1.0);
            let kv = &kernel * &v;
            Scaling::Plain {
                kernel,
                u: DVector::from_element(m, 1.0),
                v,
                kv,
            }
        }
    }

    fn is_log(&self) -> bool {
        matches!(self, Scaling::Log { .. })
    }

    /// One full `(u, v)` update; returns the L1 error of both marginals after
    /// it. Without relaxation the column part is zero up to rounding.
    fn step(&mut self, c: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, eta: f64, omega: f64) -> Result<f64> {
        if let Scaling::Plain { kernel, u, v, kv } = self {
            let new_u = relax(u, a.component_div(kv), omega);
            let ktu = kernel.tr_mul(&new_u);
            let new_v = relax(v, b.component_div(&ktu), omega);
            if in_range(&new_u) && in_range(&new_v) {
                let new_kv = &*kernel * &new_v;
                let err = l1_gap(new_u.iter().zip(new_kv.iter()).map(|(x, y)| x * y), a)
                    + l1_gap(new_v.iter().zip(ktu.iter()).map(|(x, y)| x * y), b);
                if err.is_finite() {
                    *u = new_u;
                    *v = new_v;
                    *kv = new_kv;
                    return Ok(err);
                }
            }
            // Continue the same iteration on log potentials from the last
            // in-range `v`.
            let g = v.map(|x| eta * x.ln());
            let row_lse = row_lse(c, &g, eta);
            *self = Scaling::Log {
                f: u.map(|x| eta * x.ln()),
                g,
                row_lse,
            };
        }
        let Scaling::Log { f, g, row_lse: lse } = self else {
            unreachable!()
        };
        for i in 0..f.len() {
            f[i] = (1.0 - omega) * f[i] + omega * eta * (a[i].ln() - lse[i]);
        }
        let col_lse = col_lse(c, f, eta);
        for j in 0..g.len() {
            g[j] = (1.0 - omega) * g[j] + omega * eta * (b[j].ln() - col_lse[j]);
        }
        *lse = row_lse(c, g, eta);
        let err = l1_gap((0..f.len()).map(|i| (f[i] / eta + lse[i]).exp()), a)
            + l1_gap((0..g.len()).map(|j| (g[j] / eta + col_lse[j]).exp()), b);
        if !err.is_finite() || f.iter().chain(g.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NumericFailure("non-finite Sinkhorn potentials".into()));
        }
        Ok(err)
    }

    fn plan(&self, c: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
        match self {
            Scaling::Plain { kernel, u, v, .. } => {
                DMatrix::from_fn(kernel.nrows(), kernel.ncols(), |i, j| u[i] * kernel[(i, j)] * v[j])
            }
            Scaling::Log { f, g, .. } => {
                DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| ((f[i] + g[j] - c[(i, j)]) / eta).exp())
            }
        }
    }
}

fn l1_gap(sums: impl Iterator<Item = f64>, target: &DVector<f64>) -> f64 {
    sums.zip(target.iter()).map(|(s, t)| (s - t).abs()).sum()
}

fn relax(old: &DVector<f64>, target: DVector<f64>, omega: f64) -> DVector<f64> {
    if omega == 1.0 {
        return target;
    }
    old.zip_map(&target, |o, t| o.powf(1.0 - omega) * t.powf(omega))
}

fn in_range(x: &DVector<f64>) -> bool {
    x.iter().all(|&v| v.is_finite() && (SCALE_MIN..=SCALE_MAX).contains(&v))
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let peak = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return peak;
    }
    peak + values.map(|x| (x - peak).exp()).sum::<f64>().ln()
}

fn row_lse(c: &DMatrix<f64>, g: &DVector<f64>, eta: f64) -> DVector<f64> {
    DVector::from_fn(c.nrows(), |i, _| lse((0..c.ncols()).map(|j| (g[j] - c[(i, j)]) / eta)))
}

fn col_lse(c: &DMatrix<f64>, f: &DVector<f64>, eta: f64) -> DVector<f64> {
    DVector::from_fn(c.ncols(), |j, _| lse((0..c.nrows()).map(|i| (f[i] - c[(i, j)]) / eta)))
}
