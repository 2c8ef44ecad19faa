//! Synthesis of the transferred image.
//!
//! Content patches are coded on the content dictionary, decoded on its
//! barycentric image under the plan, overlap-averaged, and then refined by
//! solving `(I + ρL) y = raw + ρ L x` per channel, where `L = ∇ᵀ∇` is the
//! 4-neighbour grid Laplacian (forward differences, replicated border).

use nalgebra::{DMatrix, DVector};

use crate::coding;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::parallel;
use crate::patches;
use crate::pipeline::TransferModel;

/// Barycentric images of the source atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct SwappedDictionary {
    pub atoms: Dictionary,
    /// `Σ_j T[i, j]` per source atom.
    pub source_plan_rows: DVector<f64>,
}

/// `d̂_i = Σ_j T[i,j] y_j / Σ_j T[i,j]`; rows without mass keep the source
/// atom.
pub fn barycentric_map(plan: &DMatrix<f64>, target: &Dictionary, source: &Dictionary) -> Result<SwappedDictionary> {
    if plan.ncols() != target.len() || plan.nrows() != source.len() {
        return Err(Error::invalid("plan shape does not match the dictionaries"));
    }
    if target.dim() != source.dim() {
        return Err(Error::invalid("dictionaries have different atom dimensions"));
    }
    if plan.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::invalid("plan entries must be finite and non-negative"));
    }
    let source_plan_rows = plan.column_sum();
    if source_plan_rows.iter().all(|&m| m == 0.0) {
        return Err(Error::invalid("plan carries no mass"));
    }
    // Normalizing the weights first keeps single-entry rows exact.
    let mut weights = plan.clone();
    for (i, mut row) in weights.row_iter_mut().enumerate() {
        if source_plan_rows[i] > 0.0 {
            row.unscale_mut(source_plan_rows[i]);
        }
    }
    let mut atoms = target.atoms() * weights.transpose();
    for i in 0..plan.nrows() {
        if source_plan_rows[i] == 0.0 {
            atoms.set_column(i, &source.atoms().column(i));
        }
    }
    Ok(SwappedDictionary {
        atoms: Dictionary::new(atoms)?,
        source_plan_rows,
    })
}

/// Dense-grid coding parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCoding {
    pub patch_size: usize,
    pub stride: usize,
    pub omp_tol: f64,
    pub omp_max_atoms: usize,
}

/// Codes the content's dense-grid patches on `source`, decodes them on
/// `decode_with`, and overlap-averages without clamping.
pub fn reconstruct_unclamped(
    decode_with: &Dictionary,
    source: &Dictionary,
    content: &Image,
    grid: GridCoding,
) -> Result<Vec<f64>> {
    if decode_with.len() != source.len() || decode_with.dim() != source.dim() {
        return Err(Error::invalid("decode dictionary does not match the coding dictionary"));
    }
    let set = patches::dense_grid(content, grid.patch_size, grid.stride)?;
    let (code, _) = coding::encode_all(source, &set, grid.omp_max_atoms, grid.omp_tol)?;
    let decoded = set.with_matrix(code.decode(decode_with.atoms()))?;
    patches::overlap_average(&decoded, content.width(), content.height())
}

/// Transferred image before refinement.
pub fn reconstruct_raw(swapped: &SwappedDictionary, content: &Image, grid: GridCoding, source: &Dictionary) -> Result<Image> {
    let data = reconstruct_unclamped(&swapped.atoms, source, content, grid)?;
    Image::from_clamped(content.width(), content.height(), content.channels(), data)
}

/// The content's own sparse approximation on `dictionary`.
pub fn sparse_approximation(dictionary: &Dictionary, content: &Image, grid: GridCoding) -> Result<Image> {
    let data = reconstruct_unclamped(dictionary, dictionary, content, grid)?;
    Image::from_clamped(content.width(), content.height(), content.channels(), data)
}

/// Applies the grid Laplacian `∇ᵀ∇` with replicated borders.
pub fn laplacian(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let v = plane[p];
            let mut acc = 0.0;
            if x > 0 {
                acc += v - plane[p - 1];
            }
            if x + 1 < width {
                acc += v - plane[p + 1];
            }
            if y > 0 {
                acc += v - plane[p - width];
            }
            if y + 1 < height {
                acc += v - plane[p + width];
            }
            out[p] = acc;
        }
    }
    out
}

/// Forward-difference gradients `(gx, gy)`, zero on the far borders.
pub fn gradient(plane: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if x + 1 < width {
                gx[p] = plane[p + 1] - plane[p];
            }
            if y + 1 < height {
                gy[p] = plane[p + width] - plane[p];
            }
        }
    }
    (gx, gy)
}

/// Outcome of the refinement solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub image: Image,
    /// Unclamped per-channel solutions.
    pub solution: Vec<Vec<f64>>,
    /// False when some channel hit the iteration cap.
    pub converged: bool,
    /// Largest iteration count over channels.
    pub iterations: usize,
    /// Largest relative residual `||rhs - A y|| / ||rhs||` over channels.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(I + ρL) y`.
fn apply_system(y: &[f64], rho: f64, width: usize, height: usize) -> Vec<f64> {
    let ly = laplacian(y, width, height);
    y.iter().zip(&ly).map(|(v, l)| v + rho * l).collect()
}

fn normal_rhs(raw: &[f64], content: &[f64], rho: f64, width: usize, height: usize) -> Vec<f64> {
    let lx = laplacian(content, width, height);
    raw.iter().zip(&lx).map(|(r, l)| r + rho * l).collect()
}

/// `||rhs - (I + ρL) y|| / ||rhs||` for one channel.
pub fn normal_equation_residual(y: &[f64], raw: &[f64], content: &[f64], rho: f64, width: usize, height: usize) -> f64 {
    let rhs = normal_rhs(raw, content, rho, width, height);
    let ay = apply_system(y, rho, width, height);
    let r: f64 = rhs.iter().zip(&ay).map(|(b, a)| (b - a) * (b - a)).sum::<f64>().sqrt();
    let n = dot(&rhs, &rhs).sqrt();
    if n == 0.0 {
        r
    } else {
        r / n
    }
}

/// `||y - raw||² + ρ ||∇y - ∇x||²` for one channel.
pub fn refine_objective(y: &[f64], raw: &[f64], content: &[f64], rho: f64, width: usize, height: usize) -> f64 {
    let fit: f64 = y.iter().zip(raw).map(|(a, b)| (a - b) * (a - b)).sum();
    let (yx, yy) = gradient(y, width, height);
    let (cx, cy) = gradient(content, width, height);
    let grad: f64 = yx
        .iter()
        .zip(&cx)
        .chain(yy.iter().zip(&cy))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    fit + rho * grad
}

struct CgOutcome {
    y: Vec<f64>,
    iterations: usize,
    relative_residual: f64,
    converged: bool,
}

fn conjugate_gradient(raw: &[f64], content: &[f64], rho: f64, width: usize, height: usize, tol: f64, max_iters: usize) -> CgOutcome {
    let b = normal_rhs(raw, content, rho, width, height);
    let b_norm = dot(&b, &b).sqrt();
    let mut y = raw.to_vec();
    if b_norm == 0.0 {
        return CgOutcome {
            y: vec![0.0; raw.len()],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let ay = apply_system(&y, rho, width, height);
    let mut r: Vec<f64> = b.iter().zip(&ay).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut best = (rr.sqrt() / b_norm, y.clone());
    let mut iterations = 0;
    while rr.sqrt() > tol * b_norm && iterations < max_iters {
        let ap = apply_system(&p, rho, width, height);
        let alpha = rr / dot(&p, &ap);
        for i in 0..y.len() {
            y[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        iterations += 1;
        if rr.sqrt() / b_norm < best.0 {
            best = (rr.sqrt() / b_norm, y.clone());
        }
    }
    // The recursive residual drifts from the true one; report the true value.
    let true_res = normal_equation_residual(&y, raw, content, rho, width, height);
    let converged = true_res <= tol;
    let (y, relative_residual) = if converged || true_res <= best.0 {
        (y, true_res)
    } else {
        let res = normal_equation_residual(&best.1, raw, content, rho, width, height);
        (best.1, res)
    };
    CgOutcome {
        y,
        iterations,
        relative_residual,
        converged,
    }
}

/// Gradient-regularized refinement of `raw` toward the content's gradients.
/// `rho == 0` returns `raw` unchanged.
pub fn gradient_refine(raw: &Image, content: &Image, rho: f64, cg_tol: f64, cg_max_iters: usize) -> Result<Refined> {
    if !raw.same_shape(content) {
        return Err(Error::invalid("raw and content images differ in shape"));
    }
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::invalid(format!("rho must be non-negative, got {rho}")));
    }
    if rho == 0.0 {
        return Ok(Refined {
            image: raw.clone(),
            solution: raw.planes(),
            converged: true,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let (w, h) = (raw.width(), raw.height());
    let raw_planes = raw.planes();
    let content_planes = content.planes();
    let outcomes = parallel::map_indices(raw.channels(), |c| {
        conjugate_gradient(&raw_planes[c], &content_planes[c], rho, w, h, cg_tol, cg_max_iters)
    });
    let converged = outcomes.iter().all(|o| o.converged);
    let iterations = outcomes.iter().map(|o| o.iterations).max().unwrap_or(0);
    let relative_residual = outcomes.iter().map(|o| o.relative_residual).fold(0.0, f64::max);
    let solution: Vec<Vec<f64>> = outcomes.into_iter().map(|o| o.y).collect();
    Ok(Refined {
        image: Image::from_planes(w, h, &solution)?,
        solution,
        converged,
        iterations,
        relative_residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Content styled after the reference.
    Forward,
    /// Reference styled after the content.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOptions {
    pub stride: usize,
    pub rho: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            stride: 4,
            rho: 0.01,
            cg_tol: 1e-8,
            cg_max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutput {
    pub image: Image,
    /// Overlap-averaged reconstruction before refinement.
    pub raw: Image,
    /// `None` when refinement was skipped (`rho == 0`).
    pub refine: Option<Refined>,
}

impl TransferModel {
    /// Coding and decoding dictionaries for `direction`.
    pub fn swap(&self, direction: Direction) -> Result<(SwappedDictionary, &Dictionary)> {
        match direction {
            Direction::Forward => Ok((barycentric_map(&self.plan.entries, &self.dy, &self.dx)?, &self.dx)),
            Direction::Reverse => Ok((barycentric_map(&self.plan.entries.transpose(), &self.dx, &self.dy)?, &self.dy)),
        }
    }

    pub fn grid_coding(&self, stride: usize) -> GridCoding {
        GridCoding {
            patch_size: self.config.patch_size,
            stride,
            omp_tol: self.config.omp_tol,
            omp_max_atoms: self.config.omp_max_atoms,
        }
    }
}

/// Transfers `content` with a trained model.
pub fn transfer(model: &TransferModel, content: &Image, direction: Direction, opts: &TransferOptions) -> Result<TransferOutput> {
    if content.channels() != model.channels {
        return Err(Error::invalid(format!(
            "input has {} channels but the model was trained on {}",
            content.channels(),
            model.channels
        )));
    }
    let (swapped, source) = model.swap(direction)?;
    let raw = reconstruct_raw(&swapped, content, model.grid_coding(opts.stride), source)?;
    if opts.rho == 0.0 {
        return Ok(TransferOutput {
            image: raw.clone(),
            raw,
            refine: None,
        });
    }
    let refined = gradient_refine(&raw, content, opts.rho, opts.cg_tol, opts.cg_max_iters)?;
    Ok(TransferOutput {
        image: refined.image.clone(),
        raw,
        refine: Some(refined),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn dict(cols: &[&[f64]]) -> Dictionary {
        let d = cols[0].len();
        let flat: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        Dictionary::new(DMatrix::from_column_slice(d, cols.len(), &flat)).unwrap()
    }

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut r = crate::rng::stream(seed, 0);
        Image::new(w, h, c, (0..w * h * c).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn diagonal_plan_reproduces_target() {
        let y = dict(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5]]);
        let x = dict(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let plan = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.5, 0.3]));
        let s = barycentric_map(&plan, &y, &x).unwrap();
        assert_eq!(s.atoms, y);
    }

    #[test]
    fn independent_plan_gives_weighted_mean() {
        let y = dict(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let x = dict(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let a = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let b = DVector::from_vec(vec![0.25, 0.75]);
        let s = barycentric_map(&(&a * b.transpose()), &y, &x).unwrap();
        for i in 0..3 {
            assert_relative_eq!(s.atoms.atoms()[(0, i)], 0.25 * 1.0 + 0.75 * 3.0, epsilon = 1e-15);
            assert_relative_eq!(s.atoms.atoms()[(1, i)], 0.25 * 2.0 + -0.75, epsilon = 1e-15);
        }
    }

    #[test]
    fn weighted_mean_arithmetic_and_zero_mass_fallback() {
        let y = dict(&[&[0.0, 0.0], &[4.0, 0.0]]);
        let x = dict(&[&[9.0, 9.0], &[7.0, 7.0]]);
        let plan = DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 0.0, 0.0]);
        let s = barycentric_map(&plan, &y, &x).unwrap();
        assert_eq!(s.atoms.atoms().column(0).as_slice(), &[3.0, 0.0]);
        assert_eq!(s.atoms.atoms().column(1).as_slice(), &[7.0, 7.0]);
        assert!(barycentric_map(&DMatrix::zeros(2, 2), &y, &x).is_err());
    }

    #[test]
    fn barycenters_stay_in_the_target_hull() {
        let mut r = crate::rng::stream(3, 3);
        let y = Dictionary::new(DMatrix::from_fn(5, 6, |_, _| r.gen_range(-2.0..2.0))).unwrap();
        let x = Dictionary::new(DMatrix::zeros(5, 4)).unwrap();
        let plan = DMatrix::from_fn(4, 6, |_, _| r.gen_range(0.0..1.0));
        let s = barycentric_map(&plan, &y, &x).unwrap();
        for row in 0..5 {
            let lo = y.atoms().row(row).min();
            let hi = y.atoms().row(row).max();
            for v in s.atoms.atoms().row(row).iter() {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_rho_is_bit_exact() {
        let raw = random_image(9, 7, 3, 1);
        let content = random_image(9, 7, 3, 2);
        let out = gradient_refine(&raw, &content, 0.0, 1e-8, 10).unwrap();
        assert_eq!(out.image, raw);
    }

    #[test]
    fn laplacian_is_gradient_adjoint() {
        // <∇u, ∇v> == <u, L v>
        let (w, h) = (7, 5);
        let mut r = crate::rng::stream(4, 4);
        let u: Vec<f64> = (0..w * h).map(|_| r.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..w * h).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (ux, uy) = gradient(&u, w, h);
        let (vx, vy) = gradient(&v, w, h);
        let lhs = dot(&ux, &vx) + dot(&uy, &vy);
        let rhs = dot(&u, &laplacian(&v, w, h));
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        assert!(laplacian(&vec![0.7; w * h], w, h).iter().all(|&l| l.abs() < 1e-15));
    }

    #[test]
    fn refinement_solves_normal_equations_and_lowers_energy() {
        let raw = random_image(20, 16, 3, 5);
        let content = random_image(20, 16, 3, 6);
        let out = gradient_refine(&raw, &content, 0.5, 1e-10, 2000).unwrap();
        assert!(out.converged);
        for c in 0..3 {
            let (rp, cp) = (&raw.planes()[c], &content.planes()[c]);
            let res = normal_equation_residual(&out.solution[c], rp, cp, 0.5, 20, 16);
            assert!(res <= 1e-10);
            let e_out = refine_objective(&out.solution[c], rp, cp, 0.5, 20, 16);
            let e_raw = refine_objective(rp, rp, cp, 0.5, 20, 16);
            assert!(e_out < e_raw);
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let raw = random_image(30, 30, 1, 7);
        let content = random_image(30, 30, 1, 8);
        let out = gradient_refine(&raw, &content, 100.0, 1e-14, 3).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
    }
}
