//! Patch dictionaries and the regularized K-SVD atom update.
//!
//! Each atom `d_k` is refit in closed form against
//!
//! ```text
//! ||E_k - d_k α_k||² + λ ||F_k - d_k a_k||² + γ Σ_j T[k, j] ||d_k - y_j||²
//! ```
//!
//! where `E_k` is the patch residual without atom `k`, `F_k` the row-sum
//! residual without atom `k`, and `y_j` the atoms of the other dictionary.
//! Atoms are not renormalized: they are the support points of the transport
//! cost, so their scale is meaningful.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng as _;

use crate::coding::SparseCode;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::patches::{patch_dim, PatchSet};
use crate::rng;

/// Atoms whose normalized correlation with a lower-indexed atom exceeds this
/// are replaced after a sweep.
pub const CORRELATION_THRESHOLD: f64 = 0.99;

/// `d x m` matrix, one atom per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    pub fn new(atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(Error::invalid("dictionary must have at least one atom of positive dimension"));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dictionary entries must be finite"));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn into_atoms(self) -> DMatrix<f64> {
        self.atoms
    }

    /// Patch dimension `d`.
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// Atom count `m`.
    pub fn len(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.ncols() == 0
    }
}

/// Picks `m` distinct patch columns (without replacement) as initial atoms.
pub fn init_from_samples(patches: &PatchSet, m: usize, seed: u64) -> Result<Dictionary> {
    if m == 0 || m > patches.len() {
        return Err(Error::invalid(format!(
            "cannot draw {m} atoms from {} patches",
            patches.len()
        )));
    }
    let mut rng = rng::stream(seed, 1);
    let picks = index::sample(&mut rng, patches.len(), m);
    let x = patches.matrix();
    let atoms = DMatrix::from_fn(x.nrows(), m, |r, c| x[(r, picks.index(c))]);
    Dictionary::new(atoms)
}

/// Residuals for atom `k`, restricted to the patches that use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// Patch indices whose support contains `k`.
    pub columns: Vec<usize>,
    /// Coefficients of atom `k` on those patches.
    pub alpha: DVector<f64>,
    /// `X - Σ_{j≠k} d_j α_j` over `columns`.
    pub e: DMatrix<f64>,
    /// `X 1 - Σ_{j≠k} d_j a_j`.
    pub f: DVector<f64>,
}

/// Builds `E_k` and `F_k` explicitly.
pub fn residuals(
    dictionary: &Dictionary,
    k: usize,
    patches: &PatchSet,
    code: &SparseCode,
    dist_raw: &DVector<f64>,
) -> Result<Residuals> {
    let m = dictionary.len();
    if k >= m {
        return Err(Error::invalid(format!("atom index {k} out of range for {m} atoms")));
    }
    check_shapes(dictionary, patches, code, dist_raw)?;
    let d = dictionary.atoms();
    let x = patches.matrix();
    let (columns, alpha) = code.row(k);
    let mut e = DMatrix::zeros(d.nrows(), columns.len());
    for (c, &i) in columns.iter().enumerate() {
        let mut col = e.column_mut(c);
        col.copy_from(&x.column(i));
        for (j, v) in code.column(i).iter() {
            if j != k {
                col.axpy(-v, &d.column(j), 1.0);
            }
        }
    }
    let mut f = x.column_sum();
    for j in (0..m).filter(|&j| j != k) {
        f.axpy(-dist_raw[j], &d.column(j), 1.0);
    }
    Ok(Residuals {
        columns,
        alpha: DVector::from_vec(alpha),
        e,
        f,
    })
}

fn check_shapes(
    dictionary: &Dictionary,
    patches: &PatchSet,
    code: &SparseCode,
    dist_raw: &DVector<f64>,
) -> Result<()> {
    if patches.dim() != dictionary.dim() {
        return Err(Error::invalid("patch and atom dimensions differ"));
    }
    if code.atoms() != dictionary.len() || dist_raw.len() != dictionary.len() {
        return Err(Error::invalid("code or distribution does not match the dictionary size"));
    }
    if code.len() != patches.len() {
        return Err(Error::invalid("code and patch set have different column counts"));
    }
    Ok(())
}

/// Regularization weights for a dictionary update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateWeights {
    /// Weight of the row-sum term.
    pub lambda: f64,
    /// Weight of the transport term.
    pub gamma: f64,
}

/// Per-atom objective: patch residual, row-sum residual and transport pull.
#[allow(clippy::too_many_arguments)]
pub fn atom_objective(
    atom: &DVector<f64>,
    e: &DMatrix<f64>,
    alpha: &DVector<f64>,
    f: &DVector<f64>,
    a_k: f64,
    plan_row: &[f64],
    other: &Dictionary,
    weights: UpdateWeights,
) -> f64 {
    let fit = (e - atom * alpha.transpose()).norm_squared();
    let rowsum = (f - atom * a_k).norm_squared();
    let transport: f64 = plan_row
        .iter()
        .enumerate()
        .map(|(j, t)| t * (atom - other.atoms().column(j)).norm_squared())
        .sum();
    fit + weights.lambda * rowsum + weights.gamma * transport
}

/// Closed-form minimizer of [`atom_objective`]:
///
/// ```text
/// d_k = (E_k α_k + λ a_k F_k + γ Σ_j T[k,j] y_j) / (||α_k||² + λ a_k² + γ Σ_j T[k,j])
/// ```
#[allow(clippy::too_many_arguments)]
pub fn update_atom(
    k: usize,
    e: &DMatrix<f64>,
    alpha: &DVector<f64>,
    f: &DVector<f64>,
    a_k: f64,
    plan_row: &[f64],
    other: &Dictionary,
    weights: UpdateWeights,
) -> Result<DVector<f64>> {
    if e.ncols() != alpha.len() {
        return Err(Error::invalid("E_k and alpha_k disagree on the column count"));
    }
    if plan_row.len() != other.len() {
        return Err(Error::invalid("plan row length does not match the other dictionary"));
    }
    let mut pull = DVector::zeros(other.dim());
    let mut mass = 0.0;
    for (j, &t) in plan_row.iter().enumerate() {
        if t != 0.0 {
            pull.axpy(t, &other.atoms().column(j), 1.0);
            mass += t;
        }
    }
    closed_form(k, &(e * alpha), alpha.norm_squared(), f, a_k, &pull, mass, weights)
}

#[allow(clippy::too_many_arguments)]
fn closed_form(
    k: usize,
    e_alpha: &DVector<f64>,
    alpha_sq: f64,
    f: &DVector<f64>,
    a_k: f64,
    pull: &DVector<f64>,
    mass: f64,
    w: UpdateWeights,
) -> Result<DVector<f64>> {
    let den = alpha_sq + w.lambda * a_k * a_k + w.gamma * mass;
    if !(den > 0.0) {
        return Err(Error::AtomUnused(k));
    }
    let mut num = e_alpha.clone();
    num.axpy(w.lambda * a_k, f, 1.0);
    num.axpy(w.gamma, pull, 1.0);
    Ok(num / den)
}

/// Precomputed sufficient statistics of one side for a sweep.
struct SweepStats {
    /// `X Aᵀ`, `d x m`.
    xat: DMatrix<f64>,
    /// `A Aᵀ`, `m x m`.
    gram_a: DMatrix<f64>,
    /// `X 1`.
    x_sum: DVector<f64>,
    x_norm_sq: f64,
    /// `Y Tᵀ`, `d x m`: plan-weighted sums of the other side's atoms.
    pull: DMatrix<f64>,
    /// `T 1`.
    mass: DVector<f64>,
    /// `Σ_j (Tᵀ1)_j ||y_j||²`.
    other_sq: f64,
}

impl SweepStats {
    fn new(patches: &PatchSet, code: &SparseCode, plan: &DMatrix<f64>, other: &Dictionary) -> Self {
        let x = patches.matrix();
        let m = code.atoms();
        let mut xat = DMatrix::zeros(x.nrows(), m);
        let mut gram_a = DMatrix::zeros(m, m);
        for (i, col) in code.columns().iter().enumerate() {
            for (k, v) in col.iter() {
                xat.column_mut(k).axpy(v, &x.column(i), 1.0);
                for (j, w) in col.iter() {
                    gram_a[(j, k)] += v * w;
                }
            }
        }
        let y = other.atoms();
        let col_mass = plan.row_sum();
        let other_sq = (0..y.ncols()).map(|j| col_mass[j] * y.column(j).norm_squared()).sum();
        Self {
            xat,
            gram_a,
            x_sum: x.column_sum(),
            x_norm_sq: x.norm_squared(),
            pull: y * plan.transpose(),
            mass: plan.column_sum(),
            other_sq,
        }
    }

    /// Full sweep objective for the current atoms.
    fn objective(&self, d: &DMatrix<f64>, dist_raw: &DVector<f64>, w: UpdateWeights) -> f64 {
        let gram_d = d.tr_mul(d);
        let fit = self.x_norm_sq - 2.0 * d.dot(&self.xat) + gram_d.dot(&self.gram_a);
        let rowsum = (&self.x_sum - d * dist_raw).norm_squared();
        let mut transport = self.other_sq;
        for k in 0..d.ncols() {
            transport += self.mass[k] * gram_d[(k, k)] - 2.0 * d.column(k).dot(&self.pull.column(k));
        }
        fit.max(0.0) + w.lambda * rowsum + w.gamma * transport.max(0.0)
    }
}

/// Full objective of one side, computed directly from the patches:
/// `||X - D A||² + λ ||X 1 - D a||² + γ Σ T[i,j] ||d_i - y_j||²`.
pub fn objective(
    dictionary: &Dictionary,
    patches: &PatchSet,
    code: &SparseCode,
    dist_raw: &DVector<f64>,
    plan: &DMatrix<f64>,
    other: &Dictionary,
    weights: UpdateWeights,
) -> f64 {
    let d = dictionary.atoms();
    let fit = (patches.matrix() - code.decode(d)).norm_squared();
    let rowsum = (patches.matrix().column_sum() - d * dist_raw).norm_squared();
    let mut transport = 0.0;
    for i in 0..d.ncols() {
        for j in 0..other.len() {
            transport += plan[(i, j)] * (d.column(i) - other.atoms().column(j)).norm_squared();
        }
    }
    fit + weights.lambda * rowsum + weights.gamma * transport
}

/// Outcome of one dictionary sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dictionary: Dictionary,
    /// Atoms replaced by patch samples, ascending.
    pub replaced: Vec<usize>,
    /// Objective before any update.
    pub objective_before: f64,
    /// Objective after the closed-form updates, before replacement.
    pub objective_after: f64,
}

/// Updates every atom in index order, then replaces unused atoms and atoms
/// nearly collinear with a lower-indexed atom by random patch columns.
///
/// `plan` is `m x n` with rows indexed by this dictionary's atoms.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    dictionary: &Dictionary,
    patches: &PatchSet,
    code: &SparseCode,
    dist_raw: &DVector<f64>,
    plan: &DMatrix<f64>,
    other: &Dictionary,
    weights: UpdateWeights,
    seed: u64,
) -> Result<SweepOutcome> {
    check_shapes(dictionary, patches, code, dist_raw)?;
    if plan.nrows() != dictionary.len() || plan.ncols() != other.len() {
        return Err(Error::invalid("plan shape does not match the two dictionaries"));
    }
    if other.dim() != dictionary.dim() {
        return Err(Error::invalid("the two dictionaries have different atom dimensions"));
    }
    let stats = SweepStats::new(patches, code, plan, other);
    let mut d = dictionary.atoms().clone();
    let objective_before = stats.objective(&d, dist_raw, weights);
    let mut d_a = &d * dist_raw;
    let m = d.ncols();
    let mut unused = vec![false; m];

    for k in 0..m {
        let a_k = dist_raw[k];
        let s_kk = stats.gram_a[(k, k)];
        if s_kk == 0.0 {
            unused[k] = true;
        }
        let old = d.column(k).clone_owned();
        // E_k α_k = X α_kᵀ - Σ_{j≠k} d_j <α_j, α_k>
        let mut e_alpha = stats.xat.column(k) - &d * stats.gram_a.column(k);
        e_alpha.axpy(s_kk, &old, 1.0);
        let mut f = &stats.x_sum - &d_a;
        f.axpy(a_k, &old, 1.0);
        let pull = stats.pull.column(k).clone_owned();
        match closed_form(k, &e_alpha, s_kk, &f, a_k, &pull, stats.mass[k], weights) {
            Ok(new) => {
                d_a.axpy(a_k, &(&new - &old), 1.0);
                d.set_column(k, &new);
            }
            Err(Error::AtomUnused(_)) => unused[k] = true,
            Err(e) => return Err(e),
        }
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite atom after dictionary update".into()));
    }
    let objective_after = stats.objective(&d, dist_raw, weights);
    let replaced = replace_degenerate(&mut d, &unused, patches, seed);
    Ok(SweepOutcome {
        dictionary: Dictionary::new(d)?,
        replaced,
        objective_before,
        objective_after,
    })
}

fn replace_degenerate(d: &mut DMatrix<f64>, unused: &[bool], patches: &PatchSet, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, 2);
    let x = patches.matrix();
    let mut gram = d.tr_mul(d);
    let mut replaced = Vec::new();
    for k in 0..d.ncols() {
        let nk = gram[(k, k)].sqrt();
        let collinear = nk == 0.0
            || (0..k).any(|j| {
                let nj = gram[(j, j)].sqrt();
                nj > 0.0 && (gram[(j, k)] / (nj * nk)).abs() > CORRELATION_THRESHOLD
            });
        if !(unused[k] || collinear) {
            continue;
        }
        // Skip all-zero samples when possible.
        let mut pick = rng.gen_range(0..x.ncols());
        for _ in 0..16 {
            if x.column(pick).norm_squared() > 0.0 {
                break;
            }
            pick = rng.gen_range(0..x.ncols());
        }
        d.set_column(k, &x.column(pick));
        let g = d.tr_mul(&d.column(k));
        gram.set_column(k, &g);
        gram.set_row(k, &g.transpose());
        replaced.push(k);
    }
    replaced
}

/// Renders atoms as a mosaic on a `ceil(sqrt(m))` grid. Each atom is
/// rescaled on its own to `[0, 1]`; constant atoms render mid-gray.
pub fn atlas(dictionary: &Dictionary, patch_size: usize, channels: usize) -> Result<Image> {
    if patch_dim(patch_size, channels) != dictionary.dim() {
        return Err(Error::invalid("patch geometry does not match the atom dimension"));
    }
    let m = dictionary.len();
    let grid = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(grid);
    let (w, h) = (grid * patch_size, rows * patch_size);
    let mut data = vec![0.0; w * h * channels];
    let p = patch_size;
    for k in 0..m {
        let atom = dictionary.atoms().column(k);
        let lo = atom.min();
        let hi = atom.max();
        let span = hi - lo;
        let (ox, oy) = ((k % grid) * p, (k / grid) * p);
        for ch in 0..channels {
            for r in 0..p {
                for c in 0..p {
                    let v = atom[ch * p * p + r * p + c];
                    let shown = if span > 0.0 { (v - lo) / span } else { 0.5 };
                    data[((oy + r) * w + ox + c) * channels + ch] = shown;
                }
            }
        }
    }
    Image::from_clamped(w, h, channels, data)
}
