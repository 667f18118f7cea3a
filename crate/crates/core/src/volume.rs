//! 3-D volumes with voxel geometry, orthogonal slicing and file I/O.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, ArrayView2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::image::{shape_str, Image};
use crate::resampler::ResamplingProfile;

/// Viewing plane of a slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    /// `I(:, :, z)`, an X×Y image.
    Axial,
    /// `I(:, y, :)`, stored as Z×X with z vertical.
    Coronal,
    /// `I(x, :, :)`, stored as Z×Y with z vertical.
    Sagittal,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
            Orientation::Sagittal => "sagittal",
        };
        f.write_str(name)
    }
}

/// Voxel geometry in millimetres. `voxel_z` is the slice thickness and
/// `z_spacing` the center-to-center slice distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub voxel_xy: f64,
    pub voxel_z: f64,
    pub z_spacing: f64,
}

impl Geometry {
    pub fn isotropic(voxel: f64) -> Self {
        Geometry {
            voxel_xy: voxel,
            voxel_z: voxel,
            z_spacing: voxel,
        }
    }

    pub fn overlap(&self) -> f64 {
        self.voxel_z - self.z_spacing
    }

    pub fn validate(&self) -> Result<()> {
        let Geometry {
            voxel_xy,
            voxel_z,
            z_spacing,
        } = *self;
        if !(voxel_xy.is_finite() && voxel_z.is_finite() && z_spacing.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel geometry".into()));
        }
        if voxel_xy <= 0.0 || voxel_z <= 0.0 {
            return Err(Error::InvalidVolume(format!(
                "voxel sizes must be positive (xy {voxel_xy}, z {voxel_z})"
            )));
        }
        if z_spacing <= 0.0 || z_spacing > voxel_z {
            return Err(Error::InvalidVolume(format!(
                "z spacing {z_spacing} must lie in (0, {voxel_z}]"
            )));
        }
        Ok(())
    }

    /// Through-plane degradation profile implied by this geometry.
    pub fn profile(&self) -> Result<ResamplingProfile> {
        ResamplingProfile::new(self.voxel_xy, self.voxel_z, self.overlap())
    }
}

/// A 3-D scalar field indexed `[x, y, z]` with x varying fastest in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    geometry: Geometry,
}

impl Volume {
    pub fn new(data: Array3<f32>, geometry: Geometry) -> Result<Self> {
        let (x, y, z) = data.dim();
        if x < 2 || y < 2 || z < 2 {
            return Err(Error::InvalidVolume(format!("shape {x}x{y}x{z} has an axis < 2")));
        }
        geometry.validate()?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel values".into()));
        }
        // Normalize to x-fastest storage.
        let data = if data.is_standard_layout() || !data.t().is_standard_layout() {
            let mut f = Array3::zeros((x, y, z).f());
            f.assign(&data);
            f
        } else {
            data
        };
        Ok(Volume { data, geometry })
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        geometry: Geometry,
        f: impl FnMut((usize, usize, usize)) -> f32,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn(shape.f(), f), geometry)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// `(X, Y, Z)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn axis_len(&self, o: Orientation) -> usize {
        let (x, y, z) = self.shape();
        match o {
            Orientation::Axial => z,
            Orientation::Coronal => y,
            Orientation::Sagittal => x,
        }
    }

    /// `(rows, cols)` of slices along `o`.
    pub fn slice_dims(&self, o: Orientation) -> (usize, usize) {
        let (x, y, z) = self.shape();
        match o {
            Orientation::Axial => (x, y),
            Orientation::Coronal => (z, x),
            Orientation::Sagittal => (z, y),
        }
    }

    /// Physical z extent covered by the slices.
    pub fn z_extent(&self) -> f64 {
        let g = self.geometry;
        (self.shape().2 - 1) as f64 * g.z_spacing + g.voxel_z
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    fn plane(&self, o: Orientation, index: usize) -> Result<ArrayView2<'_, f32>> {
        let len = self.axis_len(o);
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        Ok(match o {
            Orientation::Axial => self.data.slice(s![.., .., index]),
            Orientation::Coronal => self.data.slice(s![.., index, ..]).reversed_axes(),
            Orientation::Sagittal => self.data.slice(s![index, .., ..]).reversed_axes(),
        })
    }

    pub fn extract_slice(&self, o: Orientation, index: usize) -> Result<Image> {
        let view = self.plane(o, index)?;
        let mut img = Image::zeros(view.dim());
        img.assign(&view);
        Ok(img)
    }

    pub fn insert_slice(&mut self, o: Orientation, index: usize, img: &Image) -> Result<()> {
        let len = self.axis_len(o);
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let dims = self.slice_dims(o);
        if img.dim() != dims {
            return Err(dims_mismatch(format!("{}x{}", dims.0, dims.1), shape_str(img)));
        }
        if !img.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("inserted slice"));
        }
        match o {
            Orientation::Axial => self.data.slice_mut(s![.., .., index]).assign(img),
            Orientation::Coronal => self.data.slice_mut(s![.., index, ..]).assign(&img.t()),
            Orientation::Sagittal => self.data.slice_mut(s![index, .., ..]).assign(&img.t()),
        }
        Ok(())
    }

    /// Keeps the first `z` slices; the geometry is unchanged.
    pub fn truncate_z(&self, z: usize) -> Result<Volume> {
        let len = self.shape().2;
        if z < 2 || z > len {
            return Err(Error::IndexOutOfRange { index: z, len });
        }
        Volume::new(self.data.slice(s![.., .., ..z]).to_owned(), self.geometry)
    }

    pub fn slices(&self, o: Orientation) -> impl Iterator<Item = Image> + '_ {
        (0..self.axis_len(o)).map(move |i| self.extract_slice(o, i).expect("index in range"))
    }
}

/// Rotates an image 90° counterclockwise: the horizontal axis becomes the
/// vertical axis and the output dimensions are swapped.
pub fn rotate90(img: &Image) -> Image {
    let (rows, cols) = img.dim();
    Image::from_shape_fn((cols, rows), |(r, c)| img[[c, cols - 1 - r]])
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    shape: [usize; 3],
    voxel_xy_mm: f64,
    voxel_z_mm: f64,
    z_spacing_mm: f64,
    dtype: String,
    order: String,
}

/// `<stem>.json` and `<stem>.raw` for a path given as the stem or either file.
pub(crate) fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, raw_path) = sidecar_paths(path.as_ref());
    if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (x, y, z) = v.shape();
    let g = v.geometry;
    let header = VolumeHeader {
        shape: [x, y, z],
        voxel_xy_mm: g.voxel_xy,
        voxel_z_mm: g.voxel_z,
        z_spacing_mm: g.z_spacing,
        dtype: "f32".into(),
        order: "x-fastest".into(),
    };
    std::fs::write(&json_path, serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(x * y * z * 4);
    for zi in 0..z {
        for yi in 0..y {
            for xi in 0..x {
                bytes.extend_from_slice(&v.data[[xi, yi, zi]].to_le_bytes());
            }
        }
    }
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (json_path, raw_path) = sidecar_paths(path.as_ref());
    let malformed = |path: &Path, reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| malformed(&json_path, e.to_string()))?;
    if header.dtype != "f32" {
        return Err(malformed(&json_path, format!("unsupported dtype {}", header.dtype)));
    }
    if header.order != "x-fastest" {
        return Err(malformed(&json_path, format!("unsupported order {}", header.order)));
    }
    let geometry = Geometry {
        voxel_xy: header.voxel_xy_mm,
        voxel_z: header.voxel_z_mm,
        z_spacing: header.z_spacing_mm,
    };
    geometry.validate()?;
    let [x, y, z] = header.shape;
    let expected = x
        .checked_mul(y)
        .and_then(|n| n.checked_mul(z))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed(&json_path, "shape overflows".into()))?;
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != expected {
        return Err(malformed(
            &raw_path,
            format!("expected {expected} payload bytes, found {}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = Array3::from_shape_vec((x, y, z).f(), values)
        .map_err(|e| malformed(&raw_path, e.to_string()))?;
    Volume::new(data, geometry)
}
