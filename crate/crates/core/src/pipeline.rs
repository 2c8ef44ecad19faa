//! Alternating optimization over both dictionaries, both codes and the plan.
//!
//! Iteration 0 codes the patches on dictionaries sampled from the patches and
//! solves for an initial plan. Every later iteration sweeps both dictionaries
//! (each against the other side's previous atoms), re-codes, and re-solves
//! the plan. One [`LossRecord`] is kept per iteration.

use nalgebra::DMatrix;

use crate::coding::{self, AtomDistribution, SparseCode};
use crate::dictionary::{self, Dictionary, SweepOutcome, UpdateWeights};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel;
use crate::patches::{self, PatchSet};
use crate::rng;
use crate::transport::{self, CostMatrix, SinkhornOptions, TransportPlan};

/// Training parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub patch_size: usize,
    /// Patches sampled from each image.
    pub sample_count: usize,
    /// Atom count of the content dictionary.
    pub dict_size: usize,
    /// Atom count of the reference dictionary; `None` uses `dict_size`.
    pub dict_size_reference: Option<usize>,
    /// OMP stop: squared residual per patch.
    pub omp_tol: f64,
    pub omp_max_atoms: usize,
    /// Row-sum term weight.
    pub lambda: f64,
    /// Marginal-penalty weight. Marginals are enforced exactly by the
    /// transport step, so this is recorded but not used.
    pub tau: f64,
    /// Transport term weight in the dictionary update.
    pub gamma: f64,
    /// Entropic regularization, relative to the max-normalized cost.
    pub eta: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub outer_iters: usize,
    /// Stop once every loss component changes by less than this, relatively.
    pub rel_loss_stop: f64,
    pub seed: u64,
    /// Solve the plan exactly (network simplex) instead of with Sinkhorn.
    pub exact_ot: bool,
    /// Largest `m * n` the exact solver accepts.
    pub exact_cap: usize,
    /// Added to row sums before normalizing them into distributions.
    pub floor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            sample_count: 20_000,
            dict_size: 256,
            dict_size_reference: None,
            omp_tol: 1e-5,
            omp_max_atoms: 8,
            lambda: 1.0,
            tau: 10.0,
            gamma: 0.05,
            eta: 0.05,
            sinkhorn_iters: 200,
            sinkhorn_tol: 1e-9,
            outer_iters: 50,
            rel_loss_stop: 1e-3,
            seed: 0,
            exact_ot: false,
            exact_cap: transport::DEFAULT_EXACT_CAP,
            floor: coding::DEFAULT_FLOOR,
        }
    }
}

impl FitConfig {
    pub fn reference_dict_size(&self) -> usize {
        self.dict_size_reference.unwrap_or(self.dict_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive_ints = [
            ("patch_size", self.patch_size),
            ("sample_count", self.sample_count),
            ("dict_size", self.dict_size),
            ("dict_size_reference", self.reference_dict_size()),
            ("omp_max_atoms", self.omp_max_atoms),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("outer_iters", self.outer_iters),
            ("exact_cap", self.exact_cap),
        ];
        for (name, v) in positive_ints {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        let reals = [
            ("omp_tol", self.omp_tol),
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("gamma", self.gamma),
            ("sinkhorn_tol", self.sinkhorn_tol),
            ("rel_loss_stop", self.rel_loss_stop),
            ("floor", self.floor),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if self.dict_size.max(self.reference_dict_size()) > self.sample_count {
            return Err(Error::invalid("dictionary size exceeds the number of sampled patches"));
        }
        Ok(())
    }

    fn weights(&self) -> UpdateWeights {
        UpdateWeights {
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }
}

/// Loss components after one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    /// `||D^x A - X||²`.
    pub e_sp_x: f64,
    pub e_sp_y: f64,
    /// `||D^x a - X 1||²` with raw row sums `a`.
    pub e_ot_a: f64,
    pub e_ot_b: f64,
    /// `<C, T>`.
    pub e_c: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "iter,E_sp_x,E_sp_y,E_ot_a,E_ot_b,E_c";

    pub fn components(&self) -> [f64; 5] {
        [self.e_sp_x, self.e_sp_y, self.e_ot_a, self.e_ot_b, self.e_c]
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.iteration, self.e_sp_x, self.e_sp_y, self.e_ot_a, self.e_ot_b, self.e_c
        )
    }
}

/// Loss history as CSV with header.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(LossRecord::CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Everything learned by [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransferModel {
    pub config: FitConfig,
    pub channels: usize,
    pub dx: Dictionary,
    pub dy: Dictionary,
    pub code_x: SparseCode,
    pub code_y: SparseCode,
    pub dist_x: AtomDistribution,
    pub dist_y: AtomDistribution,
    pub plan: TransportPlan,
    pub cost: CostMatrix,
    pub history: Vec<LossRecord>,
}

impl TransferModel {
    pub fn check_consistency(&self) -> Result<()> {
        let (m, n) = (self.dx.len(), self.dy.len());
        let ok = self.plan.shape() == (m, n)
            && self.cost.shape() == (m, n)
            && self.code_x.atoms() == m
            && self.code_y.atoms() == n
            && self.dist_x.prob.len() == m
            && self.dist_y.prob.len() == n
            && self.dx.dim() == self.dy.dim()
            && self.dx.dim() == patches::patch_dim(self.config.patch_size, self.channels);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("model components have inconsistent shapes"))
        }
    }
}

/// Per-side summary of a dictionary sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub objective_before: f64,
    pub objective_after: f64,
    pub replaced: Vec<usize>,
}

impl From<&SweepOutcome> for SweepSummary {
    fn from(o: &SweepOutcome) -> Self {
        Self {
            objective_before: o.objective_before,
            objective_after: o.objective_after,
            replaced: o.replaced.clone(),
        }
    }
}

/// Diagnostics for one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub record: LossRecord,
    /// `None` on iteration 0, which does not sweep.
    pub sweep_x: Option<SweepSummary>,
    pub sweep_y: Option<SweepSummary>,
    pub degenerate_columns: usize,
    pub transport_iterations: usize,
    pub marginal_error: f64,
}

struct Side {
    patches: PatchSet,
    dictionary: Dictionary,
    code: SparseCode,
    dist: AtomDistribution,
    degenerate: usize,
}

fn code_side(dictionary: &Dictionary, patches: &PatchSet, config: &FitConfig) -> Result<(Dictionary, SparseCode, AtomDistribution, usize)> {
    let (code, report) = coding::encode_all(dictionary, patches, config.omp_max_atoms, config.omp_tol)?;
    let (dictionary, code) = coding::sign_fix(dictionary, &code);
    let dist = coding::distribution(&code, config.floor)?;
    Ok((dictionary, code, dist, report.degenerate_columns.len()))
}

impl Side {
    fn recode(&mut self, config: &FitConfig) -> Result<()> {
        let (d, c, dist, degenerate) = code_side(&self.dictionary, &self.patches, config)?;
        self.dictionary = d;
        self.code = c;
        self.dist = dist;
        self.degenerate = degenerate;
        Ok(())
    }

    fn sparse_error(&self) -> f64 {
        (self.patches.matrix() - self.code.decode(self.dictionary.atoms())).norm_squared()
    }

    fn rowsum_error(&self) -> f64 {
        (self.patches.matrix().column_sum() - self.dictionary.atoms() * &self.dist.raw).norm_squared()
    }
}

fn solve_plan(cost: &CostMatrix, x: &Side, y: &Side, config: &FitConfig) -> Result<TransportPlan> {
    if config.exact_ot && cost.shape().0 * cost.shape().1 <= config.exact_cap {
        transport::exact_ot(cost, &x.dist.prob, &y.dist.prob, config.exact_cap)
    } else {
        let opts = SinkhornOptions {
            max_iters: config.sinkhorn_iters,
            tol: config.sinkhorn_tol,
            ..SinkhornOptions::default()
        };
        transport::sinkhorn(cost, &x.dist.prob, &y.dist.prob, config.eta, &opts)
    }
}

/// Tags for the independent random streams used during fitting.
mod streams {
    pub const SAMPLE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SWEEP: u64 = 3;
}

/// Learns both dictionaries and the plan between them.
pub fn fit(content: &Image, reference: &Image, config: &FitConfig) -> Result<TransferModel> {
    fit_with(content, reference, config, |_| {})
}

/// [`fit`] with a callback invoked after every outer iteration.
pub fn fit_with(
    content: &Image,
    reference: &Image,
    config: &FitConfig,
    mut observe: impl FnMut(&IterationReport),
) -> Result<TransferModel> {
    config.validate()?;
    if content.channels() != reference.channels() {
        return Err(Error::invalid(format!(
            "content has {} channels but reference has {}",
            content.channels(),
            reference.channels()
        )));
    }
    // Both sides draw from the same streams, so identical images give
    // identical patch sets and initial dictionaries.
    let sample_seed = rng::derive(config.seed, streams::SAMPLE);
    let init_seed = rng::derive(config.seed, streams::INIT);
    let mut sides = Vec::with_capacity(2);
    for (img, m) in [(content, config.dict_size), (reference, config.reference_dict_size())] {
        let patches = patches::sample_random(img, config.patch_size, config.sample_count, sample_seed)?;
        let init = dictionary::init_from_samples(&patches, m, init_seed)?;
        let (dictionary, code, dist, degenerate) =
            code_side(&init, &patches, config).map_err(|e| e.in_stage("iteration 0: sparse coding"))?;
        sides.push(Side {
            patches,
            dictionary,
            code,
            dist,
            degenerate,
        });
    }
    let mut y = sides.pop().expect("two sides");
    let mut x = sides.pop().expect("two sides");

    let mut cost = transport::cost_matrix(&x.dictionary, &y.dictionary)?;
    let mut plan = solve_plan(&cost, &x, &y, config).map_err(|e| e.in_stage("iteration 0: transport"))?;
    let mut history = Vec::with_capacity(config.outer_iters);
    let record = |it: usize, x: &Side, y: &Side, cost: &CostMatrix, plan: &TransportPlan| -> Result<LossRecord> {
        Ok(LossRecord {
            iteration: it,
            e_sp_x: x.sparse_error(),
            e_sp_y: y.sparse_error(),
            e_ot_a: x.rowsum_error(),
            e_ot_b: y.rowsum_error(),
            e_c: transport::transport_cost(cost, plan)?,
        })
    };
    let first = record(0, &x, &y, &cost, &plan)?;
    observe(&IterationReport {
        record: first,
        sweep_x: None,
        sweep_y: None,
        degenerate_columns: x.degenerate + y.degenerate,
        transport_iterations: plan.iterations,
        marginal_error: plan.marginal_error,
    });
    history.push(first);

    let weights = config.weights();
    for it in 1..config.outer_iters {
        let sweep_seed = rng::derive(config.seed, streams::SWEEP + 16 * it as u64);
        let plan_t: DMatrix<f64> = plan.entries.transpose();
        let (sx, sy) = parallel::join(
            || {
                dictionary::sweep(
                    &x.dictionary,
                    &x.patches,
                    &x.code,
                    &x.dist.raw,
                    &plan.entries,
                    &y.dictionary,
                    weights,
                    sweep_seed,
                )
            },
            || {
                dictionary::sweep(
                    &y.dictionary,
                    &y.patches,
                    &y.code,
                    &y.dist.raw,
                    &plan_t,
                    &x.dictionary,
                    weights,
                    sweep_seed,
                )
            },
        );
        let stage = |e: Error| e.in_stage(format!("iteration {it}: dictionary update"));
        let (sx, sy) = (sx.map_err(stage)?, sy.map_err(stage)?);
        for s in [&sx, &sy] {
            debug_assert!(
                s.objective_after <= s.objective_before * (1.0 + 1e-9) + 1e-12,
                "dictionary sweep increased its objective: {} -> {}",
                s.objective_before,
                s.objective_after
            );
        }
        x.dictionary = sx.dictionary.clone();
        y.dictionary = sy.dictionary.clone();

        let (rx, ry) = parallel::join(|| x.recode(config), || y.recode(config));
        let stage = |e: Error| e.in_stage(format!("iteration {it}: sparse coding"));
        rx.map_err(stage)?;
        ry.map_err(stage)?;

        cost = transport::cost_matrix(&x.dictionary, &y.dictionary)?;
        plan = solve_plan(&cost, &x, &y, config).map_err(|e| e.in_stage(format!("iteration {it}: transport")))?;

        let rec = record(it, &x, &y, &cost, &plan)?;
        if rec.components().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!("non-finite loss at iteration {it}")));
        }
        observe(&IterationReport {
            record: rec,
            sweep_x: Some((&sx).into()),
            sweep_y: Some((&sy).into()),
            degenerate_columns: x.degenerate + y.degenerate,
            transport_iterations: plan.iterations,
            marginal_error: plan.marginal_error,
        });
        let prev = *history.last().expect("history starts non-empty");
        history.push(rec);
        if converged(&prev, &rec, config.rel_loss_stop) {
            break;
        }
    }

    let model = TransferModel {
        config: config.clone(),
        channels: content.channels(),
        dx: x.dictionary,
        dy: y.dictionary,
        code_x: x.code,
        code_y: y.code,
        dist_x: x.dist,
        dist_y: y.dist,
        plan,
        cost,
        history,
    };
    model.check_consistency()?;
    Ok(model)
}

fn converged(prev: &LossRecord, cur: &LossRecord, threshold: f64) -> bool {
    prev.components()
        .iter()
        .zip(cur.components().iter())
        .all(|(&p, &c)| {
            let scale = p.abs().max(c.abs());
            scale == 0.0 || (c - p).abs() / scale < threshold
        })
}
