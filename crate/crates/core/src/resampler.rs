//! Exact 1-D degradation and restoration-grid operators.
//!
//! A low-resolution (through-plane-like) pixel `i` covers the physical
//! interval `[i * spacing, i * spacing + tgt_pixel]`, where
//! `spacing = tgt_pixel - overlap`. The first interval starts at the leading
//! edge of the source signal, and only fully covered intervals are emitted.
//! The downscale operator averages a continuous reconstruction of the source
//! signal over that interval, which is the limit of averaging densely placed
//! interpolation points inside the pixel. The upscale operator linearly
//! interpolates between low-resolution pixel centers and evaluates at the
//! source pixel centers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::image::{shape_str, Image};

/// Slivers narrower than this fraction of a source pixel are dropped.
const SLIVER: f64 = 1e-12;

/// Extension rule outside the sampled extent of a signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    /// Repeat the value of the nearest sample.
    #[default]
    ClampEdge,
}

/// Continuous model of a sampled signal used when integrating over a
/// low-resolution pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reconstruction {
    /// Each source pixel is a box of constant value over its footprint.
    /// Integer-ratio profiles reduce to strided box kernels.
    #[default]
    Box,
    /// Piecewise-linear interpolation between source pixel centers.
    Linear,
}

/// Geometry of a 1-D degradation: high-resolution pixel size, low-resolution
/// pixel size and the overlap between neighbouring low-resolution pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct ResamplingProfile {
    src_pixel: f64,
    tgt_pixel: f64,
    overlap: f64,
    boundary: Boundary,
    reconstruction: Reconstruction,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct RawProfile {
    src_pixel: f64,
    tgt_pixel: f64,
    overlap: f64,
    #[serde(default)]
    boundary: Boundary,
    #[serde(default)]
    reconstruction: Reconstruction,
}

impl TryFrom<RawProfile> for ResamplingProfile {
    type Error = Error;

    fn try_from(raw: RawProfile) -> Result<Self> {
        Ok(ResamplingProfile::new(raw.src_pixel, raw.tgt_pixel, raw.overlap)?
            .with_boundary(raw.boundary)
            .with_reconstruction(raw.reconstruction))
    }
}

impl From<ResamplingProfile> for RawProfile {
    fn from(p: ResamplingProfile) -> Self {
        RawProfile {
            src_pixel: p.src_pixel,
            tgt_pixel: p.tgt_pixel,
            overlap: p.overlap,
            boundary: p.boundary,
            reconstruction: p.reconstruction,
        }
    }
}

impl ResamplingProfile {
    pub fn new(src_pixel: f64, tgt_pixel: f64, overlap: f64) -> Result<Self> {
        if !(src_pixel.is_finite() && tgt_pixel.is_finite() && overlap.is_finite()) {
            return Err(Error::InvalidProfile("non-finite geometry".into()));
        }
        if src_pixel <= 0.0 || tgt_pixel <= 0.0 {
            return Err(Error::InvalidProfile(format!(
                "pixel sizes must be positive (src {src_pixel}, tgt {tgt_pixel})"
            )));
        }
        if overlap < 0.0 || overlap >= tgt_pixel {
            return Err(Error::InvalidProfile(format!(
                "overlap {overlap} must lie in [0, {tgt_pixel})"
            )));
        }
        if tgt_pixel < src_pixel {
            return Err(Error::InvalidProfile(format!(
                "target pixel {tgt_pixel} is finer than source pixel {src_pixel}"
            )));
        }
        Ok(ResamplingProfile {
            src_pixel,
            tgt_pixel,
            overlap,
            boundary: Boundary::ClampEdge,
            reconstruction: Reconstruction::Box,
        })
    }

    /// The profile whose operators are the identity on a grid of `pixel`.
    pub fn identity(pixel: f64) -> Result<Self> {
        Self::new(pixel, pixel, 0.0)
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_reconstruction(mut self, reconstruction: Reconstruction) -> Self {
        self.reconstruction = reconstruction;
        self
    }

    pub fn src_pixel(&self) -> f64 {
        self.src_pixel
    }

    pub fn tgt_pixel(&self) -> f64 {
        self.tgt_pixel
    }

    pub fn overlap(&self) -> f64 {
        self.overlap
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn reconstruction(&self) -> Reconstruction {
        self.reconstruction
    }

    /// Center-to-center distance of low-resolution pixels.
    pub fn spacing(&self) -> f64 {
        self.tgt_pixel - self.overlap
    }

    /// Number of fully covered low-resolution pixels over `n_src` source pixels.
    pub fn lr_count(&self, n_src: usize) -> Result<usize> {
        let extent = n_src as f64 * self.src_pixel;
        let slack = 1e-9 * self.src_pixel;
        if extent + slack < self.tgt_pixel {
            return Err(Error::ExtentTooSmall {
                extent,
                tgt_pixel: self.tgt_pixel,
            });
        }
        let steps = ((extent - self.tgt_pixel) / self.spacing() + 1e-9).floor().max(0.0);
        Ok(steps as usize + 1)
    }

    /// Center of low-resolution pixel `i`.
    pub fn lr_center(&self, i: usize) -> f64 {
        i as f64 * self.spacing() + self.tgt_pixel / 2.0
    }
}

/// Free-function form of [`ResamplingProfile::spacing`].
pub fn spacing(profile: &ResamplingProfile) -> f64 {
    profile.spacing()
}

/// One output sample: weights over a contiguous run of source indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub start: usize,
    pub weights: Vec<f64>,
}

impl MatrixRow {
    pub fn end(&self) -> usize {
        self.start + self.weights.len()
    }

    /// Dense copy of the row over `n_in` source samples.
    pub fn dense(&self, n_in: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_in];
        out[self.start..self.end()].copy_from_slice(&self.weights);
        out
    }
}

/// Sparse row-stochastic matrix realizing a 1-D linear resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleMatrix {
    n_in: usize,
    rows: Vec<MatrixRow>,
}

impl ResampleMatrix {
    /// Builds a matrix from contiguous rows; weights are normalized to sum to one.
    fn from_rows(n_in: usize, rows: Vec<MatrixRow>) -> Self {
        let rows = rows
            .into_iter()
            .map(|mut row| {
                let total: f64 = row.weights.iter().sum();
                row.weights.iter_mut().for_each(|w| *w /= total);
                row
            })
            .collect();
        ResampleMatrix { n_in, rows }
    }

    pub fn identity(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| MatrixRow {
                start: i,
                weights: vec![1.0],
            })
            .collect();
        ResampleMatrix { n_in: n, rows }
    }

    /// Strided box kernel of integer width `width` and step `stride`.
    pub fn box_kernel(n_in: usize, width: usize, stride: usize) -> Result<Self> {
        if width == 0 || stride == 0 {
            return Err(Error::InvalidConfig("box kernel width and stride must be >= 1".into()));
        }
        if n_in < width {
            return Err(Error::ExtentTooSmall {
                extent: n_in as f64,
                tgt_pixel: width as f64,
            });
        }
        let n_out = (n_in - width) / stride + 1;
        let rows = (0..n_out)
            .map(|i| MatrixRow {
                start: i * stride,
                weights: vec![1.0 / width as f64; width],
            })
            .collect();
        Ok(ResampleMatrix { n_in, rows })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[MatrixRow] {
        &self.rows
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_out(), self.n_in));
        for (i, row) in self.rows.iter().enumerate() {
            for (k, w) in row.weights.iter().enumerate() {
                out[[i, row.start + k]] = *w;
            }
        }
        out
    }

    pub fn apply_slice(&self, signal: &[f64]) -> Result<Vec<f64>> {
        if signal.len() != self.n_in {
            return Err(dims_mismatch(self.n_in, signal.len()));
        }
        Ok(self
            .rows
            .iter()
            .map(|row| {
                row.weights
                    .iter()
                    .zip(&signal[row.start..row.end()])
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect())
    }

    pub fn compose(&self, inner: &ResampleMatrix) -> Result<ResampleMatrix> {
        if inner.n_out() != self.n_in {
            return Err(dims_mismatch(self.n_in, inner.n_out()));
        }
        let rows = self
            .rows
            .iter()
            .map(|outer| {
                let parts = outer.start..outer.end();
                let lo = parts.clone().map(|k| inner.rows[k].start).min().unwrap_or(0);
                let hi = parts.clone().map(|k| inner.rows[k].end()).max().unwrap_or(0);
                let mut weights = vec![0.0; hi - lo];
                for (k, w) in parts.zip(&outer.weights) {
                    let r = &inner.rows[k];
                    for (j, v) in r.weights.iter().enumerate() {
                        weights[r.start + j - lo] += w * v;
                    }
                }
                MatrixRow { start: lo, weights }
            })
            .collect();
        Ok(ResampleMatrix {
            n_in: inner.n_in,
            rows,
        })
    }
}

/// Degradation operator from `n_src` source pixels onto the low-resolution grid.
pub fn build_downscale(profile: &ResamplingProfile, n_src: usize) -> Result<ResampleMatrix> {
    if n_src < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 source samples, got {n_src}")));
    }
    let n_out = profile.lr_count(n_src)?;
    let rows = (0..n_out)
        .map(|i| {
            let a = i as f64 * profile.spacing();
            let b = a + profile.tgt_pixel;
            match profile.reconstruction {
                Reconstruction::Box => box_row(profile.src_pixel, n_src, a, b),
                Reconstruction::Linear => linear_row(profile.src_pixel, n_src, a, b),
            }
        })
        .collect();
    Ok(ResampleMatrix::from_rows(n_src, rows))
}

/// Area of overlap between `[a, b]` and each source pixel footprint.
fn box_row(s: f64, n: usize, a: f64, b: f64) -> MatrixRow {
    let first = ((a / s).floor().max(0.0) as usize).min(n - 1);
    let last = (((b / s).ceil() as usize).max(1) - 1).min(n - 1);
    let mut start = first;
    let mut weights = Vec::with_capacity(last + 1 - first);
    for k in first..=last {
        let lo = a.max(k as f64 * s);
        let hi = b.min((k + 1) as f64 * s);
        let len = hi - lo;
        if len <= SLIVER * s {
            if weights.is_empty() {
                start = k + 1;
            }
            continue;
        }
        weights.push(len);
    }
    MatrixRow { start, weights }
}

/// Exact integral over `[a, b]` of the clamped piecewise-linear interpolant
/// with knots at source pixel centers.
fn linear_row(s: f64, n: usize, a: f64, b: f64) -> MatrixRow {
    let knot = |k: usize| (k as f64 + 0.5) * s;
    let mut dense = vec![0.0; n];
    // Flat extension left of the first knot and right of the last.
    dense[0] += (b.min(knot(0)) - a).max(0.0);
    dense[n - 1] += (b - a.max(knot(n - 1))).max(0.0);
    for k in 0..n - 1 {
        let (c0, c1) = (knot(k), knot(k + 1));
        let lo = a.max(c0);
        let hi = b.min(c1);
        if hi <= lo {
            continue;
        }
        let (ul, uh) = (lo - c0, hi - c0);
        let upper = (uh * uh - ul * ul) / (2.0 * s);
        dense[k + 1] += upper;
        dense[k] += (hi - lo) - upper;
    }
    trim_row(dense, s)
}

fn trim_row(dense: Vec<f64>, scale: f64) -> MatrixRow {
    let keep = |w: &f64| *w > SLIVER * scale;
    let start = dense.iter().position(keep).unwrap_or(0);
    let end = dense.iter().rposition(keep).map_or(start, |e| e + 1);
    MatrixRow {
        start,
        weights: dense[start..end].to_vec(),
    }
}

/// Restoration-grid operator: linear interpolation from `n_lr` low-resolution
/// pixel centers onto `n_out` source pixel centers, clamped at both ends.
pub fn build_upscale(profile: &ResamplingProfile, n_lr: usize, n_out: usize) -> Result<ResampleMatrix> {
    if n_lr < 2 || n_out < 2 {
        return Err(Error::InvalidConfig(format!(
            "upscale needs at least 2 samples on each side (n_lr {n_lr}, n_out {n_out})"
        )));
    }
    let d = profile.spacing();
    let first = profile.lr_center(0);
    let last = profile.lr_center(n_lr - 1);
    let rows = (0..n_out)
        .map(|j| {
            let t = (j as f64 + 0.5) * profile.src_pixel;
            if t <= first {
                return MatrixRow { start: 0, weights: vec![1.0] };
            }
            if t >= last {
                return MatrixRow { start: n_lr - 1, weights: vec![1.0] };
            }
            let i = (((t - first) / d).floor() as usize).min(n_lr - 2);
            let frac = ((t - profile.lr_center(i)) / d).clamp(0.0, 1.0);
            let mut dense = vec![0.0; n_lr];
            dense[i] = 1.0 - frac;
            dense[i + 1] = frac;
            trim_row(dense, 1.0)
        })
        .collect();
    Ok(ResampleMatrix::from_rows(n_lr, rows))
}

/// Transforms every column of `image` independently.
pub fn apply_vertical(matrix: &ResampleMatrix, image: &Image) -> Result<Image> {
    if image.nrows() != matrix.n_in {
        return Err(dims_mismatch(
            format!("{} rows", matrix.n_in),
            shape_str(image),
        ));
    }
    let cols = image.ncols();
    let mut out = Image::zeros((matrix.n_out(), cols));
    let mut acc = vec![0.0f64; cols];
    for (i, row) in matrix.rows.iter().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, w) in row.weights.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(image.row(row.start + k)) {
                *a += w * *v as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// Transforms every row of `image` independently.
pub fn apply_horizontal(matrix: &ResampleMatrix, image: &Image) -> Result<Image> {
    if image.ncols() != matrix.n_in {
        return Err(dims_mismatch(
            format!("{} columns", matrix.n_in),
            shape_str(image),
        ));
    }
    let mut out = Image::zeros((image.nrows(), matrix.n_out()));
    for (src, mut dst) in image.rows().into_iter().zip(out.rows_mut()) {
        for (o, row) in dst.iter_mut().zip(&matrix.rows) {
            let acc: f64 = row
                .weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[row.start + k] as f64)
                .sum();
            *o = acc as f32;
        }
    }
    Ok(out)
}

/// Resolution and overlap simulated by a 1-D box convolution of integer
/// width applied with an integer stride on a grid of `src_pixel`.
pub fn conv_stride_equivalence(filter_width: usize, stride: usize, src_pixel: f64) -> (f64, f64) {
    let resolution = filter_width as f64 * src_pixel;
    let overlap = (filter_width as f64 - stride as f64).max(0.0) * src_pixel;
    (resolution, overlap)
}
