//! Sparse coding of patches by orthogonal matching pursuit, plus the atom
//! usage distributions derived from coefficient row sums.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::parallel;
use crate::patches::PatchSet;

/// Default additive floor applied to row sums before normalizing.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// One sparse coefficient column: strictly increasing atom indices and values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseColumn {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseColumn {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Builds from an unordered support, sorting by index.
    pub fn from_unsorted(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.sort_by_key(|p| p.0);
        let (indices, values) = pairs.into_iter().unzip();
        Self { indices, values }
    }
}

/// Column-sparse `m x P` coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    atoms: usize,
    columns: Vec<SparseColumn>,
}

impl SparseCode {
    pub fn new(atoms: usize, columns: Vec<SparseColumn>) -> Result<Self> {
        for (i, col) in columns.iter().enumerate() {
            if col.indices.len() != col.values.len() {
                return Err(Error::invalid(format!("column {i}: index/value length mismatch")));
            }
            if col.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("column {i}: indices not strictly increasing")));
            }
            if col.indices.last().is_some_and(|&k| k >= atoms) {
                return Err(Error::invalid(format!("column {i}: atom index out of range")));
            }
            if col.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("column {i}: non-finite coefficient")));
            }
        }
        Ok(Self { atoms, columns })
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[SparseColumn] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &SparseColumn {
        &self.columns[i]
    }

    pub fn max_support(&self) -> usize {
        self.columns.iter().map(SparseColumn::nnz).max().unwrap_or(0)
    }

    /// Row sums `A * 1`.
    pub fn row_sums(&self) -> DVector<f64> {
        let mut sums = DVector::zeros(self.atoms);
        for col in &self.columns {
            for (k, v) in col.iter() {
                sums[k] += v;
            }
        }
        sums
    }

    /// Column indices whose support contains atom `k`, with the coefficients.
    pub fn row(&self, k: usize) -> (Vec<usize>, Vec<f64>) {
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for (i, col) in self.columns.iter().enumerate() {
            if let Ok(pos) = col.indices.binary_search(&k) {
                cols.push(i);
                vals.push(col.values[pos]);
            }
        }
        (cols, vals)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.atoms, self.columns.len());
        for (i, col) in self.columns.iter().enumerate() {
            for (k, v) in col.iter() {
                out[(k, i)] = v;
            }
        }
        out
    }

    /// `D * A` as a dense `d x P` matrix.
    pub fn decode(&self, dictionary: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(dictionary.nrows(), self.columns.len());
        for (i, col) in self.columns.iter().enumerate() {
            let mut target = out.column_mut(i);
            for (k, v) in col.iter() {
                target.axpy(v, &dictionary.column(k), 1.0);
            }
        }
        out
    }
}

/// Row sums and the normalized probability vector over atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomDistribution {
    pub raw: DVector<f64>,
    pub prob: DVector<f64>,
}

/// Result of coding one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    pub column: SparseColumn,
    /// Squared residual norm at exit.
    pub residual_sq: f64,
    /// Set when a selected atom made the support system rank deficient.
    pub degenerate: bool,
}

/// OMP against a fixed dictionary, with the Gram matrix precomputed so each
/// signal costs one `D^T x` product plus small support solves.
pub struct OmpCoder<'a> {
    atoms: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
    inv_norms: Vec<f64>,
}

impl<'a> OmpCoder<'a> {
    pub fn new(dictionary: &'a Dictionary) -> Self {
        let atoms = dictionary.atoms();
        let gram = atoms.tr_mul(atoms);
        let inv_norms = (0..atoms.ncols())
            .map(|k| {
                let n = gram[(k, k)].sqrt();
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            atoms,
            gram,
            inv_norms,
        }
    }

    pub fn encode(&self, signal: &[f64], max_atoms: usize, tol: f64) -> OmpResult {
        let x = nalgebra::DVectorView::from_slice(signal, signal.len());
        let signal_sq = x.norm_squared();
        let mut out = OmpResult {
            column: SparseColumn::default(),
            residual_sq: signal_sq,
            degenerate: false,
        };
        if signal_sq == 0.0 || max_atoms == 0 || signal_sq <= tol {
            return out;
        }
        let h = self.atoms.tr_mul(&x);
        let m = h.len();
        let mut corr = h.clone();
        let mut support: Vec<usize> = Vec::with_capacity(max_atoms);
        let mut coef = DVector::zeros(0);
        let mut chosen = vec![false; m];

        while support.len() < max_atoms.min(m) {
            let mut best = None;
            let mut best_val = 0.0;
            for j in 0..m {
                if chosen[j] {
                    continue;
                }
                let v = (corr[j] * self.inv_norms[j]).abs();
                if v > best_val {
                    best_val = v;
                    best = Some(j);
                }
            }
            let Some(j) = best else { break };
            if best_val <= 1e-14 * signal_sq.sqrt() {
                break;
            }
            support.push(j);
            let s = support.len();
            let sub = DMatrix::from_fn(s, s, |r, c| self.gram[(support[r], support[c])]);
            let rhs = DVector::from_fn(s, |r, _| h[support[r]]);
            let solved = Cholesky::new(sub)
                .map(|ch| ch.solve(&rhs))
                .filter(|c| c.iter().all(|v| v.is_finite()));
            let Some(new_coef) = solved.filter(|_| self.well_conditioned(&support)) else {
                support.pop();
                out.degenerate = true;
                break;
            };
            chosen[j] = true;
            coef = new_coef;
            // Residual is orthogonal to the support after the least-squares
            // fit; the shortcut loses precision once most energy is explained.
            let fitted: f64 = coef.iter().zip(&support).map(|(c, &k)| c * h[k]).sum();
            out.residual_sq = signal_sq - fitted;
            if out.residual_sq <= 1e-6 * signal_sq {
                out.residual_sq = self.explicit_residual_sq(&x, &support, &coef);
            }
            if out.residual_sq <= tol {
                break;
            }
            corr.copy_from(&h);
            for (c, &k) in coef.iter().zip(&support) {
                corr.axpy(-c, &self.gram.column(k), 1.0);
            }
        }
        if !support.is_empty() {
            out.residual_sq = self.explicit_residual_sq(&x, &support, &coef);
        }
        out.column = SparseColumn::from_unsorted(support.into_iter().zip(coef.iter().copied()).collect());
        out
    }

    fn explicit_residual_sq(&self, x: &nalgebra::DVectorView<f64>, support: &[usize], coef: &DVector<f64>) -> f64 {
        let mut r = x.clone_owned();
        for (c, &k) in coef.iter().zip(support) {
            r.axpy(-c, &self.atoms.column(k), 1.0);
        }
        r.norm_squared()
    }

    /// Rejects a newly added atom that is (numerically) in the span of the
    /// rest by checking its Schur complement against its own norm.
    fn well_conditioned(&self, support: &[usize]) -> bool {
        let s = support.len();
        if s == 1 {
            return self.gram[(support[0], support[0])] > 0.0;
        }
        let last = support[s - 1];
        let prev = &support[..s - 1];
        let sub = DMatrix::from_fn(s - 1, s - 1, |r, c| self.gram[(prev[r], prev[c])]);
        let g = DVector::from_fn(s - 1, |r, _| self.gram[(prev[r], last)]);
        let Some(ch) = Cholesky::new(sub) else {
            return false;
        };
        let proj = g.dot(&ch.solve(&g));
        let own = self.gram[(last, last)];
        own - proj > 1e-10 * own
    }
}

/// Codes one signal: greedy selection by normalized correlation with the
/// residual, then a least-squares refit over the support. Stops once the
/// squared residual is at most `tol` or `max_atoms` atoms are selected.
pub fn omp(dictionary: &Dictionary, signal: &[f64], max_atoms: usize, tol: f64) -> Result<OmpResult> {
    if max_atoms == 0 {
        return Err(Error::invalid("max_atoms must be at least 1"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("tolerance must be non-negative"));
    }
    if signal.len() != dictionary.dim() {
        return Err(Error::invalid(format!(
            "signal length {} does not match atom dimension {}",
            signal.len(),
            dictionary.dim()
        )));
    }
    Ok(OmpCoder::new(dictionary).encode(signal, max_atoms, tol))
}

/// Summary of a batch encode.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeReport {
    /// Columns whose coding hit a rank-deficient support.
    pub degenerate_columns: Vec<usize>,
    /// Sum of squared residuals.
    pub residual_sq: f64,
}

/// Codes every patch column; column order is preserved.
pub fn encode_all(
    dictionary: &Dictionary,
    patches: &PatchSet,
    max_atoms: usize,
    tol: f64,
) -> Result<(SparseCode, EncodeReport)> {
    if max_atoms == 0 {
        return Err(Error::invalid("max_atoms must be at least 1"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("tolerance must be non-negative"));
    }
    if patches.dim() != dictionary.dim() {
        return Err(Error::invalid(format!(
            "patch dimension {} does not match atom dimension {}",
            patches.dim(),
            dictionary.dim()
        )));
    }
    let coder = OmpCoder::new(dictionary);
    let x = patches.matrix();
    let results = parallel::map_indices(x.ncols(), |i| coder.encode(x.column(i).as_slice(), max_atoms, tol));
    let mut report = EncodeReport {
        degenerate_columns: Vec::new(),
        residual_sq: 0.0,
    };
    let mut columns = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        if r.degenerate {
            report.degenerate_columns.push(i);
        }
        report.residual_sq += r.residual_sq;
        columns.push(r.column);
    }
    Ok((SparseCode::new(dictionary.len(), columns)?, report))
}

/// Negates atom `i` together with coefficient row `i` whenever row sum `i` is
/// strictly negative. `D * A` is unchanged.
pub fn sign_fix(dictionary: &Dictionary, code: &SparseCode) -> (Dictionary, SparseCode) {
    let sums = code.row_sums();
    let flip: Vec<bool> = sums.iter().map(|&s| s < 0.0).collect();
    if !flip.iter().any(|&f| f) {
        return (dictionary.clone(), code.clone());
    }
    let mut atoms = dictionary.atoms().clone();
    for (k, _) in flip.iter().enumerate().filter(|(_, f)| **f) {
        atoms.column_mut(k).neg_mut();
    }
    let columns = code
        .columns()
        .iter()
        .map(|col| SparseColumn {
            indices: col.indices.clone(),
            values: col
                .iter()
                .map(|(k, v)| if flip[k] { -v } else { v })
                .collect(),
        })
        .collect();
    (
        Dictionary::new(atoms).expect("negation keeps atoms finite"),
        SparseCode {
            atoms: code.atoms,
            columns,
        },
    )
}

/// Normalizes row sums onto the simplex: `prob = (raw + floor) / sum(raw + floor)`.
pub fn distribution(code: &SparseCode, floor: f64) -> Result<AtomDistribution> {
    distribution_from_raw(code.row_sums(), floor)
}

pub fn distribution_from_raw(raw: DVector<f64>, floor: f64) -> Result<AtomDistribution> {
    if !(floor >= 0.0) {
        return Err(Error::invalid("floor must be non-negative"));
    }
    if raw.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("row sums must be finite and non-negative; run sign_fix first"));
    }
    let shifted = raw.map(|v| v + floor);
    let total: f64 = shifted.sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    let prob = shifted / total;
    Ok(AtomDistribution { raw, prob })
}
