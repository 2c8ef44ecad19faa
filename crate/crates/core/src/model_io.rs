//! Binary container for [`TransferModel`].
//!
//! Layout, all integers `u64` and all reals `f64`, little-endian:
//!
//! ```text
//! magic "SOTMODEL" | version u32 | config | channels
//! | Dx | Dy | A | B | a.raw a.prob | b.raw b.prob
//! | plan: T, row marginal, col marginal, solver u8, iterations, error
//! | C | history count, records
//! ```
//!
//! Matrices are `rows, cols` followed by column-major entries; vectors are a
//! length followed by entries; sparse codes are `atoms, columns`, then per
//! column `nnz`, the indices and the values.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::coding::{AtomDistribution, SparseCode, SparseColumn};
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::pipeline::{FitConfig, LossRecord, TransferModel};
use crate::transport::{CostMatrix, Solver, TransportPlan};

pub const MAGIC: &[u8; 8] = b"SOTMODEL";
pub const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        m.iter().for_each(|&v| self.f64(v));
    }
    fn vector(&mut self, v: &DVector<f64>) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn code(&mut self, c: &SparseCode) {
        self.usize(c.atoms());
        self.usize(c.len());
        for col in c.columns() {
            self.usize(col.nnz());
            col.indices.iter().for_each(|&k| self.usize(k));
            col.values.iter().for_each(|&v| self.f64(v));
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("unexpected end of file (needed {n} more bytes)"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count that must fit in the remaining bytes at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if unit > 0 && v > remaining / unit as u64 {
            self.pos = at;
            return self.fail(format!("count {v} exceeds the remaining file size"));
        }
        Ok(v as usize)
    }
    fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).or_else(|_| {
            self.pos = at;
            self.fail("value does not fit in usize")
        })
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.count(0)?;
        let at = self.pos;
        let cols = self.count(0)?;
        let Some(total) = rows.checked_mul(cols).filter(|&t| t <= (self.bytes.len() - self.pos) / 8) else {
            self.pos = at;
            return self.fail(format!("matrix {rows}x{cols} exceeds the remaining file size"));
        };
        let data = (0..total).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(rows, cols, data))
    }
    fn vector(&mut self) -> Result<DVector<f64>> {
        let n = self.count(8)?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(data))
    }
    fn code(&mut self) -> Result<SparseCode> {
        let atoms = self.usize()?;
        let at = self.pos;
        let n = self.count(8)?;
        let mut columns = Vec::with_capacity(n);
        for _ in 0..n {
            let nnz = self.count(16)?;
            let indices = (0..nnz).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let values = (0..nnz).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            columns.push(SparseColumn { indices, values });
        }
        SparseCode::new(atoms, columns).or_else(|e| {
            self.pos = at;
            self.fail(format!("invalid sparse code: {e}"))
        })
    }
}

fn write_config(w: &mut Writer, c: &FitConfig) {
    w.usize(c.patch_size);
    w.usize(c.sample_count);
    w.usize(c.dict_size);
    w.usize(c.dict_size_reference.unwrap_or(0));
    w.f64(c.omp_tol);
    w.usize(c.omp_max_atoms);
    w.f64(c.lambda);
    w.f64(c.tau);
    w.f64(c.gamma);
    w.f64(c.eta);
    w.usize(c.sinkhorn_iters);
    w.f64(c.sinkhorn_tol);
    w.usize(c.outer_iters);
    w.f64(c.rel_loss_stop);
    w.u64(c.seed);
    w.u8(c.exact_ot as u8);
    w.usize(c.exact_cap);
    w.f64(c.floor);
}

fn read_config(r: &mut Reader) -> Result<FitConfig> {
    Ok(FitConfig {
        patch_size: r.usize()?,
        sample_count: r.usize()?,
        dict_size: r.usize()?,
        dict_size_reference: Some(r.usize()?).filter(|&v| v != 0),
        omp_tol: r.f64()?,
        omp_max_atoms: r.usize()?,
        lambda: r.f64()?,
        tau: r.f64()?,
        gamma: r.f64()?,
        eta: r.f64()?,
        sinkhorn_iters: r.usize()?,
        sinkhorn_tol: r.f64()?,
        outer_iters: r.usize()?,
        rel_loss_stop: r.f64()?,
        seed: r.u64()?,
        exact_ot: r.u8()? != 0,
        exact_cap: r.usize()?,
        floor: r.f64()?,
    })
}

fn solver_tag(s: Solver) -> u8 {
    match s {
        Solver::Exact => 0,
        Solver::Sinkhorn => 1,
        Solver::SinkhornLog => 2,
    }
}

pub fn to_bytes(model: &TransferModel) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    write_config(&mut w, &model.config);
    w.usize(model.channels);
    w.matrix(model.dx.atoms());
    w.matrix(model.dy.atoms());
    w.code(&model.code_x);
    w.code(&model.code_y);
    for d in [&model.dist_x, &model.dist_y] {
        w.vector(&d.raw);
        w.vector(&d.prob);
    }
    let p = &model.plan;
    w.matrix(&p.entries);
    w.vector(&p.row_marginal);
    w.vector(&p.col_marginal);
    w.u8(solver_tag(p.solver));
    w.usize(p.iterations);
    w.f64(p.marginal_error);
    w.matrix(model.cost.entries());
    w.usize(model.history.len());
    for rec in &model.history {
        w.usize(rec.iteration);
        rec.components().iter().for_each(|&v| w.f64(v));
    }
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<TransferModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        r.pos = 0;
        return r.fail("not a model file (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let config = read_config(&mut r)?;
    let channels = r.usize()?;
    let dict = |r: &mut Reader| -> Result<Dictionary> {
        let at = r.pos;
        let m = r.matrix()?;
        Dictionary::new(m).or_else(|e| {
            r.pos = at;
            r.fail(format!("invalid dictionary: {e}"))
        })
    };
    let dx = dict(&mut r)?;
    let dy = dict(&mut r)?;
    let code_x = r.code()?;
    let code_y = r.code()?;
    let dist_x = AtomDistribution {
        raw: r.vector()?,
        prob: r.vector()?,
    };
    let dist_y = AtomDistribution {
        raw: r.vector()?,
        prob: r.vector()?,
    };
    let entries = r.matrix()?;
    let row_marginal = r.vector()?;
    let col_marginal = r.vector()?;
    let solver = match r.u8()? {
        0 => Solver::Exact,
        1 => Solver::Sinkhorn,
        2 => Solver::SinkhornLog,
        other => {
            r.pos -= 1;
            return r.fail(format!("unknown solver tag {other}"));
        }
    };
    let iterations = r.usize()?;
    let marginal_error = r.f64()?;
    let at = r.pos;
    let cost = CostMatrix::new(r.matrix()?).or_else(|e| {
        r.pos = at;
        r.fail(format!("invalid cost matrix: {e}"))
    })?;
    let n = r.count(48)?;
    let mut history = Vec::with_capacity(n);
    for _ in 0..n {
        history.push(LossRecord {
            iteration: r.usize()?,
            e_sp_x: r.f64()?,
            e_sp_y: r.f64()?,
            e_ot_a: r.f64()?,
            e_ot_b: r.f64()?,
            e_c: r.f64()?,
        });
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after model");
    }
    let model = TransferModel {
        config,
        channels,
        dx,
        dy,
        code_x,
        code_y,
        dist_x,
        dist_y,
        plan: TransportPlan {
            entries,
            row_marginal,
            col_marginal,
            solver,
            iterations,
            marginal_error,
            error_trace: Vec::new(),
        },
        cost,
        history,
    };
    model.check_consistency().or_else(|e| r.fail(e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &TransferModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TransferModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::pipeline::fit;

    fn tiny_model() -> TransferModel {
        let mk = |phase: f64| {
            let data = (0..16 * 16)
                .flat_map(|i| {
                    let v = 0.5 + 0.4 * ((i % 16) as f64 / 2.0 + phase).sin();
                    [v, 1.0 - v, 0.5]
                })
                .collect();
            Image::new(16, 16, 3, data).unwrap()
        };
        let cfg = FitConfig {
            patch_size: 4,
            sample_count: 80,
            dict_size: 8,
            omp_max_atoms: 2,
            outer_iters: 2,
            ..FitConfig::default()
        };
        fit(&mk(0.0), &mk(1.0), &cfg).unwrap()
    }

    fn strip_trace(mut m: TransferModel) -> TransferModel {
        m.plan.error_trace.clear();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = tiny_model();
        let bytes = to_bytes(&model);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, strip_trace(model));
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = to_bytes(&tiny_model());
        for cut in [0, 5, 12, 100, bytes.len() / 2, bytes.len() - 1] {
            match from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = to_bytes(&tiny_model());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 7, expected: VERSION })
        ));
    }

    #[test]
    fn trailing_bytes_and_bad_magic_are_rejected() {
        let mut bytes = to_bytes(&tiny_model());
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::Parse { .. })));
        assert!(matches!(from_bytes(b"NOTAMODEL---"), Err(Error::Parse { offset: 0, .. })));
    }
}
