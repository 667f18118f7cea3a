//! Comparison degradations: the strided box-convolution model used by
//! convolution-based self-supervised methods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resampler::{apply_vertical, build_downscale, build_upscale, conv_stride_equivalence, ResampleMatrix, ResamplingProfile};
use crate::volume::{Orientation, Volume};

/// Integer box kernel applied with an integer stride on the source grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxDegradation {
    pub filter_width: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxEquivalence {
    pub filter_width: usize,
    pub stride: usize,
    pub resolution: f64,
    pub overlap: f64,
    /// Largest weight difference between interior rows of the box kernel
    /// and the interpolation-based operator for the equivalent geometry.
    pub max_interior_deviation: f64,
}

impl BoxDegradation {
    pub fn new(filter_width: usize, stride: usize) -> Result<Self> {
        if filter_width == 0 || stride == 0 {
            return Err(Error::InvalidConfig("filter width and stride must be >= 1".into()));
        }
        if stride > filter_width {
            return Err(Error::InvalidConfig(format!(
                "stride {stride} exceeds filter width {filter_width}; the kernel would skip samples"
            )));
        }
        Ok(BoxDegradation { filter_width, stride })
    }

    pub fn matrix(&self, n_src: usize) -> Result<ResampleMatrix> {
        ResampleMatrix::box_kernel(n_src, self.filter_width, self.stride)
    }

    /// Geometry simulated by this kernel on a grid of `src_pixel`.
    pub fn equivalent_profile(&self, src_pixel: f64) -> Result<ResamplingProfile> {
        let (resolution, overlap) = conv_stride_equivalence(self.filter_width, self.stride, src_pixel);
        ResamplingProfile::new(src_pixel, resolution, overlap)
    }

    pub fn equivalence(&self, src_pixel: f64, n_src: usize) -> Result<BoxEquivalence> {
        let profile = self.equivalent_profile(src_pixel)?;
        let conv = self.matrix(n_src)?.to_dense();
        let interp = build_downscale(&profile, n_src)?.to_dense();
        let rows = conv.nrows().min(interp.nrows());
        let mut worst = 0.0f64;
        for i in 1..rows.saturating_sub(1) {
            for (a, b) in conv.row(i).iter().zip(interp.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
        if conv.nrows() != interp.nrows() {
            worst = f64::INFINITY;
        }
        Ok(BoxEquivalence {
            filter_width: self.filter_width,
            stride: self.stride,
            resolution: profile.tgt_pixel(),
            overlap: profile.overlap(),
            max_interior_deviation: worst,
        })
    }
}

/// Replaces every axial slice of `hr` by its vertically box-degraded and
/// linearly restored version, i.e. the training inputs such a method sees.
pub fn box_degrade_axial(hr: &Volume, kernel: BoxDegradation) -> Result<Volume> {
    let rows = hr.slice_dims(Orientation::Axial).0;
    let down = kernel.matrix(rows)?;
    let profile = kernel.equivalent_profile(hr.geometry().voxel_xy)?;
    let up = build_upscale(&profile, down.n_out(), rows)?;
    let mut out = hr.clone();
    for z in 0..hr.axis_len(Orientation::Axial) {
        let a = hr.extract_slice(Orientation::Axial, z)?;
        let degraded = apply_vertical(&up, &apply_vertical(&down, &a)?)?;
        out.insert_slice(Orientation::Axial, z, &degraded)?;
    }
    Ok(out)
}
