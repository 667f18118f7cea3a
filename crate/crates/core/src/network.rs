//! Mixed-scale dense network: single-channel 3×3 dilated convolution
//! layers, each seeing the input and every earlier feature map, followed
//! by a 1×1 convolution over all maps.
//!
//! Parameters live in one flat vector:
//!
//! ```text
//! layer j : (1 + j) kernels of 3×3, then one bias
//! final   : (1 + depth) weights, then one bias
//! ```
//!
//! Gradients and ADAM moments share that layout.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::AddAssign;
use std::path::Path;

use ndarray::Array2;
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::image::Image;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
pub const DILATION_CYCLE: usize = 10;
pub const MAX_DEPTH: usize = 100;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Floating-point type the network can run in.
pub trait Real: Float + FromPrimitive + AddAssign + Sum + Send + Sync + Debug + 'static {}
impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub depth: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { depth: 20 }
    }
}

impl NetworkConfig {
    pub fn new(depth: usize) -> Result<Self> {
        let cfg = NetworkConfig { depth };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "network depth {} outside 1..={MAX_DEPTH}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        layer % DILATION_CYCLE + 1
    }

    fn layer_len(layer: usize) -> usize {
        (1 + layer) * TAPS + 1
    }

    pub fn layer_offset(&self, layer: usize) -> usize {
        (0..layer).map(Self::layer_len).sum()
    }

    pub fn final_offset(&self) -> usize {
        self.layer_offset(self.depth)
    }

    pub fn n_params(&self) -> usize {
        self.final_offset() + self.depth + 2
    }

    /// Indices of every bias in the flat parameter vector.
    pub fn bias_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.depth)
            .map(|j| self.layer_offset(j) + (1 + j) * TAPS)
            .collect();
        out.push(self.n_params() - 1);
        out
    }
}

/// Network weights in precision `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<T>,
}

/// Per-parameter gradient in the flat parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<T>);

/// Reflect index `i` into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// For each of the three taps, the source index of every output index.
fn tap_maps(n: usize, dilation: usize) -> [Vec<usize>; KERNEL] {
    std::array::from_fn(|k| {
        let offset = (k as isize - 1) * dilation as isize;
        (0..n).map(|i| reflect(i as isize + offset, n)).collect()
    })
}

/// Column taps: the reflected source index of every output column plus the
/// range `lo..hi` where the source is simply `i + shift`.
struct ColTap {
    map: Vec<usize>,
    lo: usize,
    hi: usize,
    shift: isize,
}

impl ColTap {
    fn all(n: usize, dilation: usize) -> [ColTap; KERNEL] {
        let maps = tap_maps(n, dilation);
        std::array::from_fn(|k| {
            let shift = (k as isize - 1) * dilation as isize;
            let lo = ((-shift).max(0) as usize).min(n);
            let hi = ((n as isize - shift).clamp(0, n as isize) as usize).max(lo);
            ColTap { map: maps[k].clone(), lo, hi, shift }
        })
    }

    fn edges(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.lo).chain(self.hi..self.map.len())
    }

    /// Source range matching the interior `lo..hi`.
    fn src(&self) -> std::ops::Range<usize> {
        if self.hi == self.lo {
            return 0..0;
        }
        let start = (self.lo as isize + self.shift) as usize;
        start..start + (self.hi - self.lo)
    }
}

struct Activations<T> {
    rows: usize,
    cols: usize,
    /// Input followed by every hidden feature map, each `rows * cols`.
    maps: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T: Real> Network<T> {
    pub fn from_params(config: NetworkConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(dims_mismatch(config.n_params(), params.len()));
        }
        Ok(Network { config, params })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        Self::from_params(config, vec![T::zero(); config.n_params()])
    }

    pub fn config(&self) -> NetworkConfig {
        self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    fn run(&self, img: &Array2<T>, mut pre_sink: Option<&mut Vec<Vec<T>>>) -> Result<Activations<T>> {
        if !img.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        let (rows, cols) = img.dim();
        if rows == 0 || cols == 0 {
            return Err(dims_mismatch("non-empty image", format!("{rows}x{cols}")));
        }
        let n = rows * cols;
        let depth = self.config.depth;
        let mut maps: Vec<Vec<T>> = Vec::with_capacity(depth + 1);
        maps.push(img.iter().copied().collect());

        for layer in 0..depth {
            let d = self.config.dilation(layer);
            let (rmap, cmap) = (tap_maps(rows, d), ColTap::all(cols, d));
            let base = self.config.layer_offset(layer);
            let bias = self.params[base + (1 + layer) * TAPS];
            let mut pre = vec![bias; n];
            for (c, src) in maps.iter().enumerate() {
                let kernel = &self.params[base + c * TAPS..base + (c + 1) * TAPS];
                for (ky, rm) in rmap.iter().enumerate() {
                    for r in 0..rows {
                        let src_row = &src[rm[r] * cols..(rm[r] + 1) * cols];
                        let dst = &mut pre[r * cols..(r + 1) * cols];
                        for (kx, ct) in cmap.iter().enumerate() {
                            let w = kernel[ky * KERNEL + kx];
                            for i in ct.edges() {
                                dst[i] += w * src_row[ct.map[i]];
                            }
                            for (o, &v) in dst[ct.lo..ct.hi].iter_mut().zip(&src_row[ct.src()]) {
                                *o += w * v;
                            }
                        }
                    }
                }
            }
            if let Some(sink) = pre_sink.as_deref_mut() {
                sink.push(pre.clone());
            }
            pre.iter_mut().for_each(|v| *v = v.max(T::zero()));
            maps.push(pre);
        }

        let head = &self.params[self.config.final_offset()..];
        let mut output = vec![head[depth + 1]; n];
        for (w, map) in head.iter().zip(&maps) {
            for (o, v) in output.iter_mut().zip(map) {
                *o += *w * *v;
            }
        }
        Ok(Activations {
            rows,
            cols,
            maps,
            output,
        })
    }

    pub fn forward(&self, img: &Array2<T>) -> Result<Array2<T>> {
        let acts = self.run(img, None)?;
        Ok(Array2::from_shape_vec((acts.rows, acts.cols), acts.output).expect("shape"))
    }

    /// Hidden-layer values before the ReLU, one map per layer.
    pub fn preactivations(&self, img: &Array2<T>) -> Result<Vec<Array2<T>>> {
        let mut pre = Vec::with_capacity(self.config.depth);
        self.run(img, Some(&mut pre))?;
        let dim = img.dim();
        Ok(pre
            .into_iter()
            .map(|m| Array2::from_shape_vec(dim, m).expect("shape"))
            .collect())
    }

    /// Loss and exact gradient of the mean squared error of
    /// `forward(img)` against `target`.
    pub fn backward(&self, img: &Array2<T>, target: &Array2<T>) -> Result<(T, Gradients<T>)> {
        if img.dim() != target.dim() {
            return Err(dims_mismatch(
                format!("{:?}", img.dim()),
                format!("{:?}", target.dim()),
            ));
        }
        let acts = self.run(img, None)?;
        let Activations {
            rows,
            cols,
            maps,
            output,
        } = acts;
        let n = rows * cols;
        let depth = self.config.depth;
        let scale = T::from_f64(2.0 / n as f64).unwrap();

        let mut sq = 0.0f64;
        let g_out: Vec<T> = output
            .iter()
            .zip(target.iter())
            .map(|(o, t)| {
                let diff = *o - *t;
                let df = diff.to_f64().unwrap();
                sq += df * df;
                diff * scale
            })
            .collect();
        let loss = sq / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }

        let mut grads = vec![T::zero(); self.params.len()];
        let fo = self.config.final_offset();
        let head = &self.params[fo..];
        grads[fo + depth + 1] = g_out.iter().copied().sum();
        // Gradients w.r.t. each hidden map; the input needs none.
        let mut g_maps: Vec<Vec<T>> = vec![Vec::new(); depth + 1];
        for c in 0..=depth {
            grads[fo + c] = g_out.iter().zip(&maps[c]).map(|(g, v)| *g * *v).sum();
            if c > 0 {
                g_maps[c] = g_out.iter().map(|g| *g * head[c]).collect();
            }
        }

        for layer in (0..depth).rev() {
            let mut g_pre = std::mem::take(&mut g_maps[layer + 1]);
            for (g, v) in g_pre.iter_mut().zip(&maps[layer + 1]) {
                if *v <= T::zero() {
                    *g = T::zero();
                }
            }
            let d = self.config.dilation(layer);
            let (rmap, cmap) = (tap_maps(rows, d), ColTap::all(cols, d));
            let base = self.config.layer_offset(layer);
            grads[base + (1 + layer) * TAPS] = g_pre.iter().copied().sum();
            for c in 0..=layer {
                let kernel = &self.params[base + c * TAPS..base + (c + 1) * TAPS];
                let src = &maps[c];
                let mut g_kernel = [T::zero(); TAPS];
                let g_src = &mut g_maps[c];
                let propagate = c > 0;
                for (ky, rm) in rmap.iter().enumerate() {
                    for r in 0..rows {
                        let sr = rm[r];
                        let gp = &g_pre[r * cols..(r + 1) * cols];
                        for (kx, ct) in cmap.iter().enumerate() {
                            let tap = ky * KERNEL + kx;
                            let src_row = &src[sr * cols..(sr + 1) * cols];
                            let mut acc = T::zero();
                            for i in ct.edges() {
                                acc += gp[i] * src_row[ct.map[i]];
                            }
                            for (g, v) in gp[ct.lo..ct.hi].iter().zip(&src_row[ct.src()]) {
                                acc += *g * *v;
                            }
                            g_kernel[tap] += acc;
                            if propagate {
                                let w = kernel[tap];
                                let dst = &mut g_src[sr * cols..(sr + 1) * cols];
                                for i in ct.edges() {
                                    dst[ct.map[i]] += w * gp[i];
                                }
                                for (o, g) in dst[ct.src()].iter_mut().zip(&gp[ct.lo..ct.hi]) {
                                    *o += w * *g;
                                }
                            }
                        }
                    }
                }
                grads[base + c * TAPS..base + (c + 1) * TAPS].copy_from_slice(&g_kernel);
            }
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let loss = T::from_f64(loss).unwrap();
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((loss, Gradients(grads)))
    }
}

/// Mean of squared differences.
pub fn loss_l2(pred: &Image, target: &Image) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(dims_mismatch(
            format!("{:?}", target.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = *p as f64 - *t as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Trainable state: f32 weights, ADAM moments and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub net: Network<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    /// He-style initialization: hidden kernels ~ N(0, 2/fan_in), output
    /// weights ~ N(0, 1/fan_in), biases and moments zero.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; config.n_params()];
        for layer in 0..config.depth {
            let base = config.layer_offset(layer);
            let fan_in = ((1 + layer) * TAPS) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for p in &mut params[base..base + (1 + layer) * TAPS] {
                *p = normal.sample(&mut rng) as f32;
            }
        }
        let fo = config.final_offset();
        let normal = Normal::new(0.0, (1.0 / (config.depth + 1) as f64).sqrt()).expect("valid std");
        for p in &mut params[fo..fo + config.depth + 1] {
            *p = normal.sample(&mut rng) as f32;
        }
        Ok(Self::from_network(Network::from_params(config, params)?, seed))
    }

    pub fn from_network(net: Network<f32>, seed: u64) -> Self {
        let n = net.params.len();
        ModelState {
            net,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
            seed,
        }
    }

    pub fn config(&self) -> NetworkConfig {
        self.net.config
    }

    pub fn forward(&self, img: &Image) -> Result<Image> {
        self.net.forward(img)
    }

    pub fn backward(&self, img: &Image, target: &Image) -> Result<(f32, Gradients<f32>)> {
        self.net.backward(img, target)
    }

    /// Bias-corrected ADAM update with the standard constants.
    pub fn adam_step(&mut self, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        if grads.0.len() != self.net.params.len() {
            return Err(dims_mismatch(self.net.params.len(), grads.0.len()));
        }
        if !grads.0.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let mut params = self.net.params.clone();
        let mut m = self.adam_m.clone();
        let mut v = self.adam_v.clone();
        for i in 0..params.len() {
            let g = grads.0[i] as f64;
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            params[i] = (params[i] as f64 - update) as f32;
            m[i] = mi as f32;
            v[i] = vi as f32;
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("parameter update"));
        }
        self.net.params = params;
        self.adam_m = m;
        self.adam_v = v;
        self.step += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.net.params
            .iter()
            .chain(&self.adam_m)
            .chain(&self.adam_v)
            .all(|v| v.is_finite())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TPLNCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    step: u64,
    seed: u64,
    n_params: usize,
    dtype: String,
}

/// Writes `magic | u32 header length | JSON header | weights | m | v`,
/// all numbers little-endian.
pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        config: state.config(),
        step: state.step,
        seed: state.seed,
        n_params: state.net.params.len(),
        dtype: "f32".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + header.n_params * 12);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for block in [&state.net.params, &state.adam_m, &state.adam_v] {
        for v in block.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(malformed("missing checkpoint magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| malformed("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| malformed(e.to_string()))?;
    header.config.validate()?;
    if header.dtype != "f32" || header.n_params != header.config.n_params() {
        return Err(malformed("header does not match network layout".into()));
    }
    let payload = &bytes[12 + len..];
    if payload.len() != header.n_params * 12 {
        return Err(malformed(format!(
            "expected {} payload bytes, found {}",
            header.n_params * 12,
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut take = || -> Vec<f32> { floats.by_ref().take(header.n_params).collect() };
    let params = take();
    let adam_m = take();
    let adam_v = take();
    let state = ModelState {
        net: Network::from_params(header.config, params)?,
        adam_m,
        adam_v,
        step: header.step,
        seed: header.seed,
    };
    if !state.is_finite() {
        return Err(Error::NonFinite("checkpoint payload"));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image<T: Real>(rows: usize, cols: usize, seed: u64) -> Array2<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.random::<f64>()).unwrap())
    }

    #[test]
    fn layout_counts() {
        let cfg = NetworkConfig::new(3).unwrap();
        // 10 + 19 + 28 hidden, 4 + 1 output
        assert_eq!(cfg.n_params(), 62);
        assert_eq!(cfg.bias_indices(), vec![9, 28, 56, 61]);
        assert_eq!((0..12).map(|j| cfg.dilation(j)).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 1, 2]);
        assert!(NetworkConfig::new(0).is_err());
        assert!(NetworkConfig::new(101).is_err());
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(13, 5), 3);
        assert_eq!(reflect(7, 1), 0);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = NetworkConfig::default();
        let a = ModelState::init(cfg, 7).unwrap();
        let b = ModelState::init(cfg, 7).unwrap();
        let c = ModelState::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.net.params, c.net.params);
        assert!(cfg.bias_indices().iter().all(|&i| a.net.params[i] == 0.0));
        assert!(a.adam_m.iter().chain(&a.adam_v).all(|v| *v == 0.0));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::<f32>::zeros(NetworkConfig::default()).unwrap();
        let out = net.forward(&random_image(9, 11, 1)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let state = ModelState::init(NetworkConfig::default(), 3).unwrap();
        for (r, c) in [(17, 23), (1, 1), (4, 30), (64, 5)] {
            assert_eq!(state.forward(&random_image(r, c, 2)).unwrap().dim(), (r, c));
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let state = ModelState::init(NetworkConfig::new(2).unwrap(), 3).unwrap();
        let mut img = random_image::<f32>(6, 6, 1);
        img[[2, 2]] = f32::NAN;
        assert!(matches!(state.forward(&img), Err(Error::NonFinite(_))));
    }

    #[test]
    fn interior_is_translation_equivariant() {
        let state = ModelState::init(NetworkConfig::new(3).unwrap(), 11).unwrap();
        let big = random_image::<f32>(40, 40, 5);
        let a = big.slice(ndarray::s![0..39, 0..39]).to_owned();
        let b = big.slice(ndarray::s![1..40, 1..40]).to_owned();
        let fa = state.forward(&a).unwrap();
        let fb = state.forward(&b).unwrap();
        // Receptive radius 1 + 2 + 3 = 6.
        for r in 7..31 {
            for c in 7..31 {
                assert!((fa[[r + 1, c + 1]] - fb[[r, c]]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn loss_l2_examples() {
        let a = random_image::<f32>(5, 7, 1);
        assert_eq!(loss_l2(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 2.0);
        assert!((loss_l2(&b, &a).unwrap() - 4.0).abs() < 1e-5);
        let c = random_image::<f32>(5, 7, 2);
        let mut oracle = 0.0f64;
        for r in 0..5 {
            for k in 0..7 {
                let d = a[[r, k]] as f64 - c[[r, k]] as f64;
                oracle += d * d;
            }
        }
        assert!((loss_l2(&a, &c).unwrap() - oracle / 35.0).abs() < 1e-12);
        assert!(loss_l2(&a, &random_image(7, 5, 1)).is_err());
    }

    #[test]
    fn zero_net_on_zero_target_has_zero_gradient() {
        let net = Network::<f64>::zeros(NetworkConfig::new(4).unwrap()).unwrap();
        let (loss, g) = net.backward(&random_image(8, 8, 1), &Array2::zeros((8, 8))).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.0.iter().all(|v| *v == 0.0));
    }

    fn relu_pattern(net: &Network<f64>, img: &Array2<f64>) -> Vec<bool> {
        net.preactivations(img).unwrap().iter().flat_map(|m| m.iter().map(|v| *v > 0.0).collect::<Vec<_>>()).collect()
    }

    /// A draw where no ReLU changes state anywhere in the +-eps stencil of
    /// any parameter, so central differences are exact up to O(eps^2).
    fn smooth_draw(cfg: NetworkConfig, seed: u64, eps: f64) -> (Network<f64>, Array2<f64>, Array2<f64>) {
        for attempt in 0..1000u64 {
            let s = seed * 1000 + attempt;
            let mut net: Network<f64> = ModelState::init(cfg, s).unwrap().net.cast();
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xABCD);
            // Nonzero biases exercise the bias path.
            for i in cfg.bias_indices() {
                net.params_mut()[i] = rng.random::<f64>() * 0.2 - 0.1;
            }
            let img = random_image::<f64>(8, 8, s + 100);
            let target = random_image::<f64>(8, 8, s + 200);
            let base = relu_pattern(&net, &img);
            let stable = (0..cfg.n_params()).all(|i| {
                [eps, -eps].iter().all(|d| {
                    let mut moved = net.clone();
                    moved.params_mut()[i] += d;
                    relu_pattern(&moved, &img) == base
                })
            });
            if stable {
                return (net, img, target);
            }
        }
        panic!("no kink-free draw for seed {seed}");
    }

    /// Central-difference check of every parameter.
    fn check_gradients(seed: u64) {
        let cfg = NetworkConfig::new(3).unwrap();
        let eps = 1e-3;
        let (net, img, target) = smooth_draw(cfg, seed, eps);
        let (_, grads) = net.backward(&img, &target).unwrap();
        let loss_at = |net: &Network<f64>| {
            let out = net.forward(&img).unwrap();
            out.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0
        };
        for i in 0..cfg.n_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += eps;
            let mut minus = net.clone();
            minus.params_mut()[i] -= eps;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let analytic = grads.0[i];
            let scale = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= 1e-4 * scale + 1e-10,
                "param {i}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2, 3] {
            check_gradients(seed);
        }
    }

    #[test]
    fn gradient_uses_mean_semantics() {
        let state = ModelState::init(NetworkConfig::new(2).unwrap(), 4).unwrap();
        let img = random_image::<f32>(10, 10, 1);
        let target = random_image::<f32>(10, 10, 2);
        let (l1, g1) = state.backward(&img, &target).unwrap();
        // The same sample tiled twice has the same mean loss and gradient
        // when the tiles do not interact across the seam; use a 1x1-only net.
        let mut flat = state.net.clone();
        let cfg = flat.config();
        for layer in 0..cfg.depth {
            let base = cfg.layer_offset(layer);
            for p in &mut flat.params_mut()[base..base + (1 + layer) * TAPS] {
                *p = 0.0;
            }
        }
        let (lf, gf) = flat.backward(&img, &target).unwrap();
        let tiled_img = ndarray::concatenate![ndarray::Axis(0), img, img];
        let tiled_target = ndarray::concatenate![ndarray::Axis(0), target, target];
        let (lt, gt) = flat.backward(&tiled_img, &tiled_target).unwrap();
        assert!((lf - lt).abs() < 1e-6);
        for (a, b) in gf.0.iter().zip(&gt.0) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
        assert!(l1 > 0.0 && g1.0.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn adam_zero_gradient_only_counts_step() {
        let mut state = ModelState::init(NetworkConfig::new(2).unwrap(), 1).unwrap();
        let before = state.net.clone();
        state.adam_step(&Gradients(vec![0.0; before.params.len()]), 1e-3).unwrap();
        assert_eq!(state.net, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_constant_gradient_update_tends_to_lr() {
        // Single-parameter closed form: with constant g the bias-corrected
        // ratio m_hat / sqrt(v_hat) is exactly sign(g) at every step.
        let cfg = NetworkConfig::new(1).unwrap();
        let mut state = ModelState::from_network(Network::zeros(cfg).unwrap(), 0);
        let n = cfg.n_params();
        let mut g = vec![0.0f32; n];
        g[n - 1] = 0.37;
        let lr = 1e-2;
        let mut prev = 0.0f64;
        for _ in 0..200 {
            state.adam_step(&Gradients(g.clone()), lr).unwrap();
            let now = state.net.params()[n - 1] as f64;
            let step = prev - now;
            assert!((step - lr).abs() < 1e-5, "step {step}");
            prev = now;
        }
        assert!((prev + 200.0 * lr).abs() < 1e-4);
    }

    #[test]
    fn identical_states_stay_identical() {
        let mut a = ModelState::init(NetworkConfig::new(3).unwrap(), 5).unwrap();
        let mut b = a.clone();
        let img = random_image::<f32>(12, 12, 1);
        for _ in 0..3 {
            let (_, ga) = a.backward(&img, &img).unwrap();
            let (_, gb) = b.backward(&img, &img).unwrap();
            a.adam_step(&ga, 1e-3).unwrap();
            b.adam_step(&gb, 1e-3).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut state = ModelState::init(NetworkConfig::new(1).unwrap(), 1).unwrap();
        let mut g = vec![0.0f32; state.net.params().len()];
        g[0] = f32::INFINITY;
        assert!(state.adam_step(&Gradients(g), 1e-3).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = ModelState::init(NetworkConfig::new(4).unwrap(), 9).unwrap();
        let img = random_image::<f32>(10, 10, 3);
        let (_, g) = state.backward(&img, &img.mapv(|v| v * 0.5)).unwrap();
        state.adam_step(&g, 1e-3).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.seed, 9);
        let bits = |s: &ModelState| -> Vec<u32> {
            s.net.params().iter().chain(&s.adam_m).chain(&s.adam_v).map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&back), bits(&state));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Malformed { .. })));
    }
}
