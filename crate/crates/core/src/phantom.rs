//! Synthetic ellipsoid phantoms and their through-plane degradation.

use ndarray::{Array3, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resampler::{build_downscale, ResamplingProfile};
use crate::volume::{Geometry, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// `[X, Y, Z]` of the high-resolution volume.
    pub dims: [usize; 3],
    pub seed: u64,
    pub n_ellipsoids: usize,
    /// Amplitude of a smooth multi-frequency texture added everywhere.
    pub texture: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            seed: 0,
            n_ellipsoids: 30,
            texture: 0.0,
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
    /// Rows are the ellipsoid's principal directions.
    rotation: [[f64; 3]; 3],
    intensity: f64,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Uniform random unit quaternion.
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let min_dim = *dims.iter().min().unwrap() as f64;
        let center = std::array::from_fn(|i| rng.random_range(0.15..0.85) * dims[i] as f64);
        let semi_axes = std::array::from_fn(|_| rng.random_range(0.05..0.3) * min_dim + 1.0);
        Ellipsoid {
            center,
            semi_axes,
            rotation: random_rotation(rng),
            intensity: rng.random_range(0.1..1.0),
        }
    }

    /// Coverage in [0, 1] at a voxel center: 1 inside, 0 outside, linear
    /// over one voxel around the surface along the ray from the center.
    fn coverage(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut rho2 = 0.0;
        let mut len2 = 0.0;
        for (axis, row) in self.rotation.iter().enumerate() {
            let u = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
            rho2 += (u / self.semi_axes[axis]).powi(2);
            len2 += u * u;
        }
        let rho = rho2.sqrt();
        if rho == 0.0 {
            return 1.0;
        }
        let dist = len2.sqrt() * (1.0 - 1.0 / rho);
        (0.5 - dist).clamp(0.0, 1.0)
    }

    fn bounds(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        let reach = self.semi_axes.iter().cloned().fold(0.0, f64::max) + 1.0;
        std::array::from_fn(|i| {
            let lo = (self.center[i] - reach - 0.5).floor().max(0.0) as usize;
            let hi = ((self.center[i] + reach + 0.5).ceil() as usize).min(dims[i]);
            (lo, hi)
        })
    }
}

/// Isotropic unit-voxel phantom of blended ellipsoids, values in [0, 1].
pub fn generate(spec: &PhantomSpec) -> Result<Volume> {
    let dims = spec.dims;
    if dims.iter().any(|d| *d < 2) {
        return Err(Error::InvalidConfig(format!("phantom dims {dims:?} must all be >= 2")));
    }
    if !(spec.texture >= 0.0 && spec.texture.is_finite()) {
        return Err(Error::InvalidConfig("texture amplitude must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes: Vec<Ellipsoid> = (0..spec.n_ellipsoids).map(|_| Ellipsoid::random(&mut rng, dims)).collect();
    let waves: Vec<([f64; 3], f64)> = (0..4)
        .map(|_| {
            let k = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let mut data = Array3::<f32>::zeros((dims[0], dims[1], dims[2]).f());
    for e in &shapes {
        let [(x0, x1), (y0, y1), (z0, z1)] = e.bounds(dims);
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    let w = e.coverage([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]);
                    if w > 0.0 {
                        let v = &mut data[[x, y, z]];
                        *v = (*v as f64 * (1.0 - w) + e.intensity * w) as f32;
                    }
                }
            }
        }
    }
    if spec.texture > 0.0 {
        let norm = spec.texture / waves.len() as f64;
        for ((x, y, z), v) in data.indexed_iter_mut() {
            let t: f64 = waves
                .iter()
                .map(|(k, phase)| (k[0] * x as f64 + k[1] * y as f64 + k[2] * z as f64 + phase).sin())
                .sum();
            *v += (t * norm) as f32;
        }
    }
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Volume::new(data, Geometry::isotropic(1.0))
}

/// Degrades an isotropic volume along z to slices of thickness `tgt_pixel`
/// overlapping by `overlap`.
pub fn degrade_z(v: &Volume, tgt_pixel: f64, overlap: f64) -> Result<Volume> {
    let g = v.geometry();
    if g.voxel_z != g.voxel_xy || g.z_spacing != g.voxel_z {
        return Err(Error::GeometryMismatch(format!("degrade_z expects an isotropic volume, got {g:?}")));
    }
    let p = ResamplingProfile::new(g.voxel_xy, tgt_pixel, overlap)?;
    degrade_z_with(v, &p)
}

/// Applies the profile's downscale operator to every (x, y) column.
pub fn degrade_z_with(v: &Volume, p: &ResamplingProfile) -> Result<Volume> {
    let (x, y, z) = v.shape();
    let m = build_downscale(p, z)?;
    let columns: Vec<Vec<f64>> = (0..x * y)
        .into_par_iter()
        .map(|i| {
            let (xi, yi) = (i % x, i / x);
            let col: Vec<f64> = (0..z).map(|k| v.data()[[xi, yi, k]] as f64).collect();
            m.apply_slice(&col).expect("column length")
        })
        .collect();
    let data = Array3::from_shape_fn((x, y, m.n_out()).f(), |(xi, yi, k)| columns[yi * x + xi][k] as f32);
    let geometry = Geometry {
        voxel_xy: v.geometry().voxel_xy,
        voxel_z: p.tgt_pixel(),
        z_spacing: p.spacing(),
    };
    Volume::new(data, geometry)
}
