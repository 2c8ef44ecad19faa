//! Patch extraction, vectorization and overlap-averaged reassembly.
//!
//! A patch of side `p` over `c` channels is vectorized channel-blockwise: all
//! of channel 0 in row-major order, then channel 1, then channel 2. The patch
//! dimension is therefore `p * p * c`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

/// Top-left corner of a patch, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub x: usize,
    pub y: usize,
}

/// Vectorized patches, one per column, with their grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    matrix: DMatrix<f64>,
    positions: Vec<Position>,
    patch_size: usize,
    channels: usize,
}

impl PatchSet {
    /// Assembles a patch set from an existing matrix. Positions are only
    /// checked for count; callers reassembling must supply in-bounds corners.
    pub fn from_parts(
        matrix: DMatrix<f64>,
        positions: Vec<Position>,
        patch_size: usize,
        channels: usize,
    ) -> Result<Self> {
        if matrix.nrows() != patch_dim(patch_size, channels) {
            return Err(Error::invalid(format!(
                "patch matrix has {} rows, expected {}",
                matrix.nrows(),
                patch_dim(patch_size, channels)
            )));
        }
        if matrix.ncols() != positions.len() || positions.is_empty() {
            return Err(Error::invalid("patch matrix columns must match positions and be non-empty"));
        }
        Ok(Self {
            matrix,
            positions,
            patch_size,
            channels,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Patch dimension `d`.
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }

    /// Same positions, new patch contents (e.g. decoded patches).
    pub fn with_matrix(&self, matrix: DMatrix<f64>) -> Result<Self> {
        Self::from_parts(matrix, self.positions.clone(), self.patch_size, self.channels)
    }
}

pub fn patch_dim(patch_size: usize, channels: usize) -> usize {
    patch_size * patch_size * channels
}

/// Copies the block at `pos` into `out` in channel-blockwise order.
fn vectorize_into(image: &Image, pos: Position, p: usize, out: &mut [f64]) {
    let c = image.channels();
    for ch in 0..c {
        for r in 0..p {
            for col in 0..p {
                out[ch * p * p + r * p + col] = image.get(pos.x + col, pos.y + r, ch);
            }
        }
    }
}

/// Vectorizes the patch at `pos`.
pub fn vectorize(image: &Image, pos: Position, patch_size: usize) -> DVector<f64> {
    let mut v = DVector::zeros(patch_dim(patch_size, image.channels()));
    vectorize_into(image, pos, patch_size, v.as_mut_slice());
    v
}

fn extract(image: &Image, positions: Vec<Position>, patch_size: usize) -> Result<PatchSet> {
    let d = patch_dim(patch_size, image.channels());
    let mut matrix = DMatrix::zeros(d, positions.len());
    for (k, pos) in positions.iter().enumerate() {
        vectorize_into(image, *pos, patch_size, matrix.column_mut(k).as_mut_slice());
    }
    PatchSet::from_parts(matrix, positions, patch_size, image.channels())
}

fn check_patch_size(image: &Image, patch_size: usize) -> Result<()> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if patch_size > image.width().min(image.height()) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} exceeds image size {}x{}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Draws `count` patches with top-left corners uniform over all valid corners,
/// with replacement.
pub fn sample_random(image: &Image, patch_size: usize, count: usize, seed: u64) -> Result<PatchSet> {
    check_patch_size(image, patch_size)?;
    if count == 0 {
        return Err(Error::invalid("patch count must be at least 1"));
    }
    let max_x = image.width() - patch_size;
    let max_y = image.height() - patch_size;
    let mut rng = rng::stream(seed, 0);
    let positions = (0..count)
        .map(|_| Position {
            x: rng.gen_range(0..=max_x),
            y: rng.gen_range(0..=max_y),
        })
        .collect();
    extract(image, positions, patch_size)
}

/// Stride-spaced corners along one axis, with the last corner clamped to
/// `dim - patch` so the far edge is covered.
pub fn grid_corners(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut corners: Vec<usize> = (0..=last).step_by(stride).collect();
    if *corners.last().expect("0 is always a corner") != last {
        corners.push(last);
    }
    corners
}

/// Overlapping patches on a regular grid covering every pixel.
pub fn dense_grid(image: &Image, patch_size: usize, stride: usize) -> Result<PatchSet> {
    check_patch_size(image, patch_size)?;
    if stride < 1 || stride > patch_size {
        return Err(Error::invalid(format!(
            "stride must lie in [1, {patch_size}], got {stride}"
        )));
    }
    let xs = grid_corners(image.width(), patch_size, stride);
    let ys = grid_corners(image.height(), patch_size, stride);
    let positions = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Position { x, y }))
        .collect();
    extract(image, positions, patch_size)
}

/// Overlap-averages patches back into a `width x height` image. Each pixel is
/// the mean of every patch value covering it; clamping happens only at the end.
pub fn reassemble(patches: &PatchSet, width: usize, height: usize) -> Result<Image> {
    let sums = overlap_average(patches, width, height)?;
    Image::from_clamped(width, height, patches.channels(), sums)
}

/// Unclamped overlap average, row-major and channel-interleaved.
pub fn overlap_average(patches: &PatchSet, width: usize, height: usize) -> Result<Vec<f64>> {
    let p = patches.patch_size();
    let c = patches.channels();
    let mut sums = vec![0.0; width * height * c];
    let mut counts = vec![0u32; width * height];
    for (k, pos) in patches.positions().iter().enumerate() {
        if pos.x + p > width || pos.y + p > height {
            return Err(Error::invalid(format!(
                "patch at ({}, {}) does not fit in {width}x{height}",
                pos.x, pos.y
            )));
        }
        let col = patches.matrix().column(k);
        for r in 0..p {
            for cc in 0..p {
                let pix = (pos.y + r) * width + pos.x + cc;
                counts[pix] += 1;
                for ch in 0..c {
                    sums[pix * c + ch] += col[ch * p * p + r * p + cc];
                }
            }
        }
    }
    if let Some(pix) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) is not covered by any patch",
            pix % width,
            pix / width
        )));
    }
    for (pix, &n) in counts.iter().enumerate() {
        for ch in 0..c {
            sums[pix * c + ch] /= n as f64;
        }
    }
    Ok(sums)
}
