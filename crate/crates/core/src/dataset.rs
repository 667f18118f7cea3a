//! Self-supervised training pairs built from axial slices.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, Image};
use crate::resampler::{apply_horizontal, apply_vertical, build_downscale, build_upscale, ResamplingProfile};
use crate::volume::{rotate90, Orientation, Volume};

/// Direction in which a pair's input was degraded before any rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Vertical,
    Horizontal,
}

/// A degraded input and its pristine target. Horizontal pairs are stored
/// rotated so the degraded axis is vertical.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: Image,
    pub target: Image,
    pub provenance: Provenance,
    pub slice: usize,
}

fn degrade_restore_vertical(a: &Image, p: &ResamplingProfile) -> Result<Image> {
    let down = build_downscale(p, a.nrows())?;
    let up = build_upscale(p, down.n_out(), a.nrows())?;
    apply_vertical(&up, &apply_vertical(&down, a)?)
}

pub fn make_pair_vertical(a: &Image, p: &ResamplingProfile) -> Result<TrainingPair> {
    Ok(TrainingPair {
        input: degrade_restore_vertical(a, p)?,
        target: a.clone(),
        provenance: Provenance::Vertical,
        slice: 0,
    })
}

pub fn make_pair_horizontal(a: &Image, p: &ResamplingProfile) -> Result<TrainingPair> {
    let down = build_downscale(p, a.ncols())?;
    let up = build_upscale(p, down.n_out(), a.ncols())?;
    let degraded = apply_horizontal(&up, &apply_horizontal(&down, a)?)?;
    Ok(TrainingPair {
        input: rotate90(&degraded),
        target: rotate90(a),
        provenance: Provenance::Horizontal,
        slice: 0,
    })
}

/// Checks that `p` describes the through-plane geometry of `v`.
pub fn check_profile(v: &Volume, p: &ResamplingProfile) -> Result<()> {
    let g = v.geometry();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    if close(p.src_pixel(), g.voxel_xy) && close(p.tgt_pixel(), g.voxel_z) && close(p.overlap(), g.overlap()) {
        Ok(())
    } else {
        Err(Error::GeometryMismatch(format!(
            "profile (src {}, tgt {}, overlap {}) does not match volume (xy {}, z {}, overlap {})",
            p.src_pixel(),
            p.tgt_pixel(),
            p.overlap(),
            g.voxel_xy,
            g.voxel_z,
            g.overlap()
        )))
    }
}

/// Builds the `2 * Z` pairs of `v` using the profile implied by its geometry.
pub fn build_dataset(v: &Volume, p: &ResamplingProfile) -> Result<Vec<TrainingPair>> {
    check_profile(v, p)?;
    build_dataset_unchecked(v, p)
}

/// As [`build_dataset`], but with a profile that may deliberately differ
/// from the volume geometry (mismatch experiments).
pub fn build_dataset_unchecked(v: &Volume, p: &ResamplingProfile) -> Result<Vec<TrainingPair>> {
    let per_slice: Vec<Result<[TrainingPair; 2]>> = (0..v.axis_len(Orientation::Axial))
        .into_par_iter()
        .map(|z| {
            let a = v.extract_slice(Orientation::Axial, z)?;
            let mut ver = make_pair_vertical(&a, p)?;
            let mut hor = make_pair_horizontal(&a, p)?;
            ver.slice = z;
            hor.slice = z;
            Ok([ver, hor])
        })
        .collect();
    let mut pairs = Vec::with_capacity(per_slice.len() * 2);
    for item in per_slice {
        pairs.extend(item?);
    }
    Ok(pairs)
}

/// Writes each pair as `pair_<n>_<input|target>` images into `dir`.
pub fn dump_pairs(pairs: &[TrainingPair], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (n, pair) in pairs.iter().enumerate() {
        let tag = match pair.provenance {
            Provenance::Vertical => "ver",
            Provenance::Horizontal => "hor",
        };
        let stem = format!("pair_{n:04}_z{:04}_{tag}", pair.slice);
        save_image(&pair.input, dir.join(format!("{stem}_input")))?;
        save_image(&pair.target, dir.join(format!("{stem}_target")))?;
    }
    Ok(())
}
