//! 2-D scalar images and their on-disk form.

use std::path::Path;

use ndarray::{Array2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::sidecar_paths;

/// A 2-D scalar field indexed `[row, col]`.
pub type Image = Array2<f32>;

#[derive(Debug, Serialize, Deserialize)]
struct ImageHeader {
    /// `[rows, cols]`
    shape: [usize; 2],
    dtype: String,
    order: String,
}

/// Writes `<stem>.json` + `<stem>.raw`; the payload is little-endian f32
/// with the row index varying fastest.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, raw_path) = sidecar_paths(path.as_ref());
    let header = ImageHeader {
        shape: [img.nrows(), img.ncols()],
        dtype: "f32".into(),
        order: "row-fastest".into(),
    };
    let json = serde_json::to_string_pretty(&header)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(img.len() * 4);
    for c in 0..img.ncols() {
        for r in 0..img.nrows() {
            bytes.extend_from_slice(&img[[r, c]].to_le_bytes());
        }
    }
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let (json_path, raw_path) = sidecar_paths(path.as_ref());
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: ImageHeader = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32" || header.order != "row-fastest" {
        return Err(Error::Malformed {
            path: json_path,
            reason: format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        });
    }
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let [rows, cols] = header.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Malformed {
            path: raw_path,
            reason: format!("expected {} bytes, found {}", rows * cols * 4, bytes.len()),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let img = Array2::from_shape_vec((rows, cols).f(), values).map_err(|e| Error::Malformed {
        path: raw_path,
        reason: e.to_string(),
    })?;
    ensure_finite(&img, "image payload")?;
    Ok(img)
}

pub(crate) fn shape_str(img: &Image) -> String {
    format!("{}x{}", img.nrows(), img.ncols())
}

pub(crate) fn ensure_finite(img: &Image, what: &'static str) -> Result<()> {
    if img.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
