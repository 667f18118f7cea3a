//! PSNR and SSIM on coronal and sagittal views with central cropping.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::image::{shape_str, Image};
use crate::volume::{Orientation, Volume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DEFAULT_MARGIN_FRAC: f64 = 0.15;
pub const MAX_MARGIN_FRAC: f64 = 0.45;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(dims_mismatch(shape_str(a), shape_str(b)));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if data_range > 0.0 && data_range.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("data range {data_range} must be positive")))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / err).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable Gaussian filter keeping only fully supported windows.
fn filter_valid(img: &Array2<f64>, w: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let (or, oc) = (rows + 1 - SSIM_WINDOW, cols + 1 - SSIM_WINDOW);
    let horiz: Array2<f64> = Array2::from_shape_fn((rows, oc), |(r, c)| {
        w.iter().enumerate().map(|(k, wk)| wk * img[[r, c + k]]).sum::<f64>()
    });
    Array2::from_shape_fn((or, oc), |(r, c)| {
        w.iter().enumerate().map(|(k, wk)| wk * horiz[[r + k, c]]).sum()
    })
}

/// Mean structural similarity over all 11×11 Gaussian windows (σ = 1.5).
pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    check_dims(a, b)?;
    check_range(data_range)?;
    if a.nrows() < SSIM_WINDOW || a.ncols() < SSIM_WINDOW {
        return Err(dims_mismatch(
            format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            shape_str(a),
        ));
    }
    let w = gaussian_window();
    let x = a.mapv(|v| v as f64);
    let y = b.mapv(|v| v as f64);
    let mu_x = filter_valid(&x, &w);
    let mu_y = filter_valid(&y, &w);
    let xx = filter_valid(&(&x * &x), &w);
    let yy = filter_valid(&(&y * &y), &w);
    let xy = filter_valid(&(&x * &y), &w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x.as_slice().unwrap()[i], mu_y.as_slice().unwrap()[i]);
        let var_x = xx.as_slice().unwrap()[i] - mx * mx;
        let var_y = yy.as_slice().unwrap()[i] - my * my;
        let cov = xy.as_slice().unwrap()[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

/// Removes `margin_frac` of the rows and of the columns from each side.
pub fn central_crop(img: &Image, margin_frac: f64) -> Result<Image> {
    if !(0.0..=MAX_MARGIN_FRAC).contains(&margin_frac) {
        return Err(Error::InvalidConfig(format!(
            "margin fraction {margin_frac} outside [0, {MAX_MARGIN_FRAC}]"
        )));
    }
    let (rows, cols) = img.dim();
    let mr = (rows as f64 * margin_frac).floor() as usize;
    let mc = (cols as f64 * margin_frac).floor() as usize;
    let out = img.slice(s![mr..rows - mr, mc..cols - mc]).to_owned();
    if out.nrows() < SSIM_WINDOW || out.ncols() < SSIM_WINDOW {
        return Err(dims_mismatch(
            format!("crop of at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            shape_str(&out),
        ));
    }
    Ok(out)
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr {t:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    /// Mean per-slice PSNR in dB; `"inf"` in JSON when every slice matches.
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub slices: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub coronal: ViewMetrics,
    pub sagittal: ViewMetrics,
    pub margin_frac: f64,
    pub data_range: f64,
}

impl MetricReport {
    /// Mean of the coronal and sagittal PSNR.
    pub fn mean_psnr(&self) -> f64 {
        (self.coronal.psnr + self.sagittal.psnr) / 2.0
    }

    pub fn mean_ssim(&self) -> f64 {
        (self.coronal.ssim + self.sagittal.ssim) / 2.0
    }
}

fn view_metrics(
    reference: &Volume,
    test: &Volume,
    o: Orientation,
    margin_frac: f64,
    data_range: f64,
) -> Result<ViewMetrics> {
    let n = reference.axis_len(o);
    let (mut p, mut q) = (0.0, 0.0);
    for i in 0..n {
        let a = central_crop(&reference.extract_slice(o, i)?, margin_frac)?;
        let b = central_crop(&test.extract_slice(o, i)?, margin_frac)?;
        p += psnr(&a, &b, data_range)?;
        q += ssim(&a, &b, data_range)?;
    }
    Ok(ViewMetrics {
        psnr: p / n as f64,
        ssim: q / n as f64,
        slices: n,
    })
}

/// Coronal and sagittal metrics with `data_range` taken from the reference
/// (max − min, or 1 for a constant reference).
pub fn report(reference: &Volume, test: &Volume, margin_frac: f64) -> Result<MetricReport> {
    let (lo, hi) = reference.min_max();
    let range = (hi - lo) as f64;
    report_with_range(reference, test, margin_frac, if range > 0.0 { range } else { 1.0 })
}

pub fn report_with_range(
    reference: &Volume,
    test: &Volume,
    margin_frac: f64,
    data_range: f64,
) -> Result<MetricReport> {
    if reference.shape() != test.shape() {
        return Err(Error::GeometryMismatch(format!(
            "reference shape {:?} vs test shape {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    if reference.geometry() != test.geometry() {
        return Err(Error::GeometryMismatch(format!(
            "reference geometry {:?} vs test geometry {:?}",
            reference.geometry(),
            test.geometry()
        )));
    }
    Ok(MetricReport {
        coronal: view_metrics(reference, test, Orientation::Coronal, margin_frac, data_range)?,
        sagittal: view_metrics(reference, test, Orientation::Sagittal, margin_frac, data_range)?,
        margin_frac,
        data_range,
    })
}
