//! Inference on upscaled coronal and sagittal slices and reassembly into an
//! isotropic volume.

use ndarray::{Array3, ShapeBuilder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::ModelState;
use crate::resampler::{apply_vertical, build_upscale, ResamplingProfile};
use crate::volume::{Geometry, Orientation, Volume};

/// Anything that maps an upscaled slice to an enhanced slice of equal size.
pub trait SliceModel: Sync {
    fn apply(&self, img: &Image) -> Result<Image>;
}

impl SliceModel for ModelState {
    fn apply(&self, img: &Image) -> Result<Image> {
        self.forward(img)
    }
}

/// Returns the upscaled slice unchanged: plain linear interpolation.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassThrough;

impl SliceModel for PassThrough {
    fn apply(&self, img: &Image) -> Result<Image> {
        Ok(img.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combine {
    CoronalOnly,
    SagittalOnly,
    #[default]
    Average,
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coronal" | "coronalonly" | "coronal-only" => Ok(Combine::CoronalOnly),
            "sagittal" | "sagittalonly" | "sagittal-only" => Ok(Combine::SagittalOnly),
            "average" | "avg" => Ok(Combine::Average),
            _ => Err(Error::InvalidConfig(format!("unknown combine mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    pub combine: Combine,
    /// Overrides the z extent of the output; derived from geometry if unset.
    pub target_rows: Option<usize>,
}

/// Rows needed to sample the physical z extent at the in-plane pixel size.
pub fn target_rows(geometry: Geometry, n_slices: usize) -> usize {
    let extent = (n_slices - 1) as f64 * geometry.z_spacing + geometry.voxel_z;
    (extent / geometry.voxel_xy).round() as usize
}

pub fn enhance_slice(
    img_lr: &Image,
    p: &ResamplingProfile,
    model: &impl SliceModel,
    target_rows: usize,
) -> Result<Image> {
    let up = build_upscale(p, img_lr.nrows(), target_rows)?;
    let upscaled = apply_vertical(&up, img_lr)?;
    model.apply(&upscaled)
}

fn enhance_orientation(
    v: &Volume,
    o: Orientation,
    p: &ResamplingProfile,
    model: &impl SliceModel,
    rows: usize,
) -> Result<Vec<Image>> {
    (0..v.axis_len(o))
        .into_par_iter()
        .map(|i| enhance_slice(&v.extract_slice(o, i)?, p, model, rows))
        .collect()
}

/// Places enhanced slices of orientation `o` into an `X×Y×rows` volume.
fn assemble(shape: (usize, usize, usize), o: Orientation, slices: &[Image], g: Geometry) -> Result<Volume> {
    let mut out = Volume::new(Array3::zeros(shape.f()), g)?;
    for (i, img) in slices.iter().enumerate() {
        out.insert_slice(o, i, img)?;
    }
    Ok(out)
}

pub fn enhance_volume(v: &Volume, model: &impl SliceModel, cfg: &EnhanceConfig) -> Result<Volume> {
    let g = v.geometry();
    let p = g.profile()?;
    let (x, y, z) = v.shape();
    let rows = cfg.target_rows.unwrap_or_else(|| target_rows(g, z));
    if rows < 2 {
        return Err(Error::InvalidConfig(format!("target rows {rows} < 2")));
    }
    let out_geometry = Geometry::isotropic(g.voxel_xy);
    let shape = (x, y, rows);

    let coronal = || -> Result<Volume> {
        let slices = enhance_orientation(v, Orientation::Coronal, &p, model, rows)?;
        assemble(shape, Orientation::Coronal, &slices, out_geometry)
    };
    let sagittal = || -> Result<Volume> {
        let slices = enhance_orientation(v, Orientation::Sagittal, &p, model, rows)?;
        assemble(shape, Orientation::Sagittal, &slices, out_geometry)
    };
    match cfg.combine {
        Combine::CoronalOnly => coronal(),
        Combine::SagittalOnly => sagittal(),
        Combine::Average => {
            let a = coronal()?;
            let b = sagittal()?;
            let mean = (a.data() + b.data()) * 0.5;
            Volume::new(mean, out_geometry)
        }
    }
}
