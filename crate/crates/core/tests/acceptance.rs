//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thruplane::dataset::build_dataset;
use thruplane::harness::{self, run_baseline_interp, run_mismatch_sweep, run_pipeline, run_simulate, RunConfig};
use thruplane::metrics::{psnr, report, ssim};
use thruplane::network::{load_checkpoint, save_checkpoint, ModelState, Network, NetworkConfig};
use thruplane::phantom::PhantomSpec;
use thruplane::resampler::{build_downscale, build_upscale, conv_stride_equivalence, ResamplingProfile};
use thruplane::trainer::{evaluate_epoch, LrSchedule, TrainConfig};
use thruplane::volume::{load_volume, save_volume, Geometry, Volume};
use thruplane::Image;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Mean of the box-reconstructed signal over each slab, by midpoint sampling.
fn sampled_downscale(p: &ResamplingProfile, signal: &[f64], n_out: usize, k: usize) -> Vec<f64> {
    let (s, t, d) = (p.src_pixel(), p.tgt_pixel(), p.spacing());
    (0..n_out)
        .map(|i| {
            let start = i as f64 * d;
            let h = t / k as f64;
            let sum: f64 = (0..k)
                .map(|j| {
                    let x = start + (j as f64 + 0.5) * h;
                    signal[((x / s) as usize).min(signal.len() - 1)]
                })
                .sum();
            sum / k as f64
        })
        .collect()
}

fn criterion_resampler_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut worst_row = 0.0f64;
    for _ in 0..200 {
        let src = rng.random_range(0.3..2.0);
        let tgt = src * rng.random_range(1.0..8.0);
        let overlap = tgt * rng.random_range(0.0..0.95);
        let n = rng.random_range(16..160);
        let p = ResamplingProfile::new(src, tgt, overlap).map_err(fail)?;
        if p.lr_count(n).is_err() {
            continue;
        }
        let signal: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let m = build_downscale(&p, n).map_err(fail)?;
        let out = m.apply_slice(&signal).map_err(fail)?;
        let oracle = sampled_downscale(&p, &signal, m.n_out(), 100_000);
        for (a, b) in out.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let up = build_upscale(&p, m.n_out().max(2), n).map_err(fail)?;
        for row in m.rows().iter().chain(up.rows()) {
            worst_row = worst_row.max((row.weights.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(
        worst <= 1e-4 && worst_row <= 1e-9,
        format!("max |matrix - oracle| = {worst:.2e}, max |row sum - 1| = {worst_row:.2e}"),
    )
}

fn criterion_conv_equivalence() -> Outcome {
    let n = 64;
    let p = ResamplingProfile::new(1.0, 5.0, 2.0).map_err(fail)?;
    let m = build_downscale(&p, n).map_err(fail)?;
    let dense = m.to_dense();
    let mut worst = 0.0f64;
    for i in 1..m.n_out() - 1 {
        for j in 0..n {
            // Width-5 stride-3 box: taps 3i .. 3i+4 weigh 1/5 each.
            let expected = if (3 * i..3 * i + 5).contains(&j) { 0.2 } else { 0.0 };
            worst = worst.max((dense[[i, j]] - expected).abs());
        }
    }
    let a = conv_stride_equivalence(5, 3, 1.0);
    let b = conv_stride_equivalence(4, 3, 0.74);
    check(
        worst <= 1e-9 && a == (5.0, 2.0) && b == (2.96, 0.74),
        format!("max interior deviation {worst:.2e}; (5,3,1) -> {a:?}; (4,3,0.74) -> {b:?}"),
    )
}

fn random_f64(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
}

fn relu_pattern(net: &Network<f64>, img: &Array2<f64>) -> Result<Vec<bool>, String> {
    Ok(net.preactivations(img).map_err(fail)?.iter().flat_map(|m| m.iter().map(|v| *v > 0.0).collect::<Vec<_>>()).collect())
}

fn criterion_gradient_check() -> Outcome {
    let cfg = NetworkConfig::new(3).map_err(fail)?;
    let eps = 1e-3;
    let mut worst = 0.0f64;
    let mut used = Vec::new();
    for seed in 0..3u64 {
        // Central differences are a valid reference only when no ReLU
        // switches inside the stencil; draw until that holds.
        let mut found = None;
        for attempt in 0..1000u64 {
            let s = seed * 1000 + attempt;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut net: Network<f64> = ModelState::init(cfg, s).map_err(fail)?.net.cast();
            for i in cfg.bias_indices() {
                net.params_mut()[i] = rng.random_range(-0.1..0.1);
            }
            let img = random_f64(8, 8, &mut rng);
            let target = random_f64(8, 8, &mut rng);
            let base = relu_pattern(&net, &img)?;
            let mut stable = true;
            'outer: for i in 0..cfg.n_params() {
                for delta in [eps, -eps] {
                    let mut moved = net.clone();
                    moved.params_mut()[i] += delta;
                    if relu_pattern(&moved, &img)? != base {
                        stable = false;
                        break 'outer;
                    }
                }
            }
            if stable {
                found = Some((s, net, img, target));
                break;
            }
        }
        let (s, net, img, target) = found.ok_or("no kink-free draw")?;
        used.push(s);
        let (_, grads) = net.backward(&img, &target).map_err(fail)?;
        let loss = |n: &Network<f64>| -> Result<f64, String> {
            let out = n.forward(&img).map_err(fail)?;
            Ok(out.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / out.len() as f64)
        };
        for i in 0..cfg.n_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += eps;
            let mut minus = net.clone();
            minus.params_mut()[i] -= eps;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * eps);
            let analytic = grads.0[i];
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over {} params x 3 draws {used:?}", cfg.n_params()))
}

fn criterion_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let normal = rand_distr::Normal::new(0.0, 0.1).unwrap();
    let levels: Vec<f32> = (0..24).map(|z| 0.2 + 0.6 * z as f32 / 24.0).collect();
    let v = Volume::from_fn((24, 24, 24), Geometry::isotropic(1.0), |(_, _, z)| {
        levels[z] + rand_distr::Distribution::<f64>::sample(&normal, &mut rng) as f32
    })
    .map_err(fail)?;
    let cfg = RunConfig {
        network: NetworkConfig::new(4).map_err(fail)?,
        train: TrainConfig { epochs: 200, patch: 0, seed: 3, checkpoint_every: 0, ..Default::default() },
        ..Default::default()
    };
    let out = run_pipeline(&v, &cfg, None, |_, _| Ok(())).map_err(fail)?;
    let pairs = build_dataset(&v, &v.geometry().profile().map_err(fail)?).map_err(fail)?;
    let identical = pairs.iter().all(|p| p.input == p.target);
    let loss = evaluate_epoch(&out.state, &pairs).map_err(fail)?;
    let values: Vec<f64> = pairs.iter().flat_map(|p| p.target.iter().map(|x| *x as f64)).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let variance = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / values.len() as f64;
    let m = report(&v, &out.enhanced, 0.15).map_err(fail)?;
    check(
        identical && loss < 1e-4 * variance && m.mean_psnr() > 40.0,
        format!(
            "loss {loss:.2e} vs 1e-4 * variance {:.2e}; enhanced vs input PSNR {:.2} dB",
            1e-4 * variance,
            m.mean_psnr()
        ),
    )
}

fn phantom_config() -> RunConfig {
    let mut cfg = RunConfig {
        phantom: PhantomSpec { dims: [64, 64, 64], ..Default::default() },
        resolution: 5.0,
        overlap: 2.5,
        network: NetworkConfig::new(20).unwrap(),
        ..Default::default()
    };
    cfg.train.epochs = 50;
    cfg.train.lr = 4e-3;
    cfg.train.schedule = LrSchedule::Cosine;
    cfg.set_seed(0);
    cfg
}

fn criterion_phantom() -> Outcome {
    let cfg = phantom_config();
    let (hr, lr) = run_simulate(&cfg).map_err(fail)?;
    let base = harness::evaluate_volumes(&hr, &run_baseline_interp(&lr, &cfg).map_err(fail)?, cfg.margin_frac)
        .map_err(fail)?;
    let out = run_pipeline(&lr, &cfg, None, |_, _| Ok(())).map_err(fail)?;
    let ours = harness::evaluate_volumes(&hr, &out.enhanced, cfg.margin_frac).map_err(fail)?;
    let gain = ours.mean_psnr() - base.mean_psnr();
    check(
        gain >= 1.0,
        format!(
            "enhanced {:.2} dB (cor {:.2}, sag {:.2}) vs interpolation {:.2} dB: gain {gain:+.2} dB",
            ours.mean_psnr(),
            ours.coronal.psnr,
            ours.sagittal.psnr,
            base.mean_psnr()
        ),
    )
}

fn sweep_config() -> RunConfig {
    let mut cfg = phantom_config();
    cfg.network = NetworkConfig::new(12).unwrap();
    cfg.train.epochs = 100;
    cfg
}

fn criterion_mismatch() -> Outcome {
    let cfg = sweep_config();
    let (hr, _) = run_simulate(&cfg).map_err(fail)?;
    let sweep = run_mismatch_sweep(&hr, &cfg).map_err(fail)?;
    let center = sweep.cell(0.0, 0.0).ok_or("missing (0,0) cell")?.mean_psnr;
    let best = sweep.best().ok_or("empty sweep")?;
    let grid: Vec<String> = sweep
        .cells
        .iter()
        .map(|c| format!("({:+},{:+}) {:.2}", c.delta_resolution, c.delta_overlap, c.mean_psnr))
        .collect();
    check(
        best.delta_resolution == 0.0 && best.delta_overlap == 0.0 && sweep.cells.len() == 9,
        format!("(0,0) {center:.2} dB; grid: {}", grid.join(", ")),
    )
}

fn files_equal(a: &Path, b: &Path) -> Result<bool, String> {
    Ok(std::fs::read(a).map_err(fail)? == std::fs::read(b).map_err(fail)?)
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let mut cfg = RunConfig {
        phantom: PhantomSpec { dims: [40, 40, 40], n_ellipsoids: 12, ..Default::default() },
        network: NetworkConfig::new(6).map_err(fail)?,
        ..Default::default()
    };
    cfg.train.epochs = 4;
    cfg.train.patch = 32;
    cfg.train.checkpoint_every = 2;
    cfg.set_seed(17);
    harness::cmd_simulate(&cfg, dir.path()).map_err(fail)?;
    let lr = dir.path().join("lr");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    harness::cmd_pipeline(&lr, &cfg, &a).map_err(fail)?;
    harness::cmd_pipeline(&lr, &cfg, &b).map_err(fail)?;
    let files = [
        "model.ckpt",
        "enhanced.raw",
        "enhanced.json",
        "loss_history.csv",
        "checkpoints/epoch_0002.ckpt",
        "checkpoints/epoch_0004.ckpt",
    ];
    let mut differing = Vec::new();
    for f in files {
        if !files_equal(&a.join(f), &b.join(f))? {
            differing.push(f);
        }
    }
    check(differing.is_empty(), format!("compared {} artifacts; differing: {differing:?}", files.len()))
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Image::from_shape_fn((32, 32), |_| rng.random::<f32>());
    let b = Image::from_shape_fn((32, 32), |_| rng.random::<f32>());
    let flat = Image::from_elem((32, 32), 0.5f32);
    let shifted = flat.mapv(|v| v + 0.1);
    let id_psnr = psnr(&a, &a, 1.0).map_err(fail)?;
    let id_ssim = ssim(&a, &a, 1.0).map_err(fail)?;
    let offset = psnr(&flat, &shifted, 1.0).map_err(fail)?;
    // Oracle: 10 log10(1 / mse) with the f32-rounded offset.
    let d = (0.5f32 + 0.1) as f64 - 0.5;
    let expected = 10.0 * (1.0 / (d * d)).log10();
    let sym = (ssim(&a, &b, 1.0).map_err(fail)? - ssim(&b, &a, 1.0).map_err(fail)?).abs();
    check(
        id_psnr == f64::INFINITY && id_ssim == 1.0 && (offset - 20.0).abs() < 1e-5 && (offset - expected).abs() < 1e-9 && sym <= 1e-12,
        format!("identical: {id_psnr} dB / SSIM {id_ssim}; offset 0.1: {offset:.6} dB; SSIM asymmetry {sym:.1e}"),
    )
}

fn criterion_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Geometry { voxel_xy: 0.74, voxel_z: 3.0, z_spacing: 2.0 };
    let v = Volume::from_fn((9, 7, 5), g, |_| rng.random::<f32>() * 2.0 - 0.5).map_err(fail)?;
    let path = dir.path().join("vol");
    save_volume(&v, &path).map_err(fail)?;
    let back = load_volume(&path).map_err(fail)?;
    let bits_equal = v.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let volume_ok = bits_equal && back.geometry() == g && back.shape() == v.shape();

    let mut state = ModelState::init(NetworkConfig::new(5).map_err(fail)?, 3).map_err(fail)?;
    let img = Image::from_shape_fn((16, 16), |_| rng.random::<f32>());
    let (_, grads) = state.backward(&img, &img.mapv(|x| x * 0.5)).map_err(fail)?;
    state.adam_step(&grads, 1e-3).map_err(fail)?;
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&state, &ckpt).map_err(fail)?;
    let loaded = load_checkpoint(&ckpt).map_err(fail)?;
    let ckpt2 = dir.path().join("again.ckpt");
    save_checkpoint(&loaded, &ckpt2).map_err(fail)?;
    let checkpoint_ok = loaded == state && files_equal(&ckpt, &ckpt2)?;

    // Violating metadata: spacing larger than thickness leaves gaps.
    let header_path = dir.path().join("vol.json");
    let mut header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&header_path).map_err(fail)?).map_err(fail)?;
    header["z_spacing_mm"] = serde_json::json!(3.5);
    std::fs::write(&header_path, header.to_string()).map_err(fail)?;
    let rejected_file = load_volume(&path).is_err();
    let bad = Geometry { voxel_xy: 0.74, voxel_z: 3.0, z_spacing: 3.5 };
    let rejected_new = Volume::from_fn((4, 4, 4), bad, |_| 0.0).is_err();
    check(
        volume_ok && checkpoint_ok && rejected_file && rejected_new,
        format!(
            "volume bit-exact {volume_ok}; checkpoint bit-exact {checkpoint_ok}; z_spacing > voxel_z rejected on load {rejected_file}, on construction {rejected_new}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 resampler oracle", criterion_resampler_oracle),
        ("2 convolution equivalence", criterion_conv_equivalence),
        ("3 gradient check", criterion_gradient_check),
        ("4 identity sanity", criterion_identity),
        ("5 phantom enhancement", criterion_phantom),
        ("6 mismatch sweep", criterion_mismatch),
        ("7 determinism", criterion_determinism),
        ("8 metrics", criterion_metrics),
        ("9 file round trips", criterion_round_trips),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{name}] {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{name}] {detail} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
