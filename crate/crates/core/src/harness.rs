//! Experiment orchestration: simulation, training/enhancement pipeline,
//! baselines, the degradation-mismatch sweep and evaluation.
//!
//! Every `cmd_*` function writes its artifacts into an output directory and
//! appends one [`RunManifest`] line to `manifest.jsonl` there. The `run_*`
//! functions are the in-memory counterparts.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{box_degrade_axial, BoxDegradation};
use crate::dataset::{build_dataset, build_dataset_unchecked, dump_pairs};
use crate::enhancer::{enhance_volume, EnhanceConfig, PassThrough};
use crate::error::{Error, Result};
use crate::metrics::{report, MetricReport, DEFAULT_MARGIN_FRAC};
use crate::network::{load_checkpoint, save_checkpoint, ModelState, NetworkConfig};
use crate::phantom::{degrade_z, generate, PhantomSpec};
use crate::resampler::ResamplingProfile;
use crate::trainer::{train, TrainConfig, TrainError};
use crate::volume::{load_volume, save_volume, Volume};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// `(Δresolution, Δoverlap)` offsets from the true geometry, in mm.
    pub deviations: Vec<(f64, f64)>,
    /// Train grid cells concurrently.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let steps = [-0.25, 0.0, 0.25];
        SweepConfig {
            deviations: steps.iter().flat_map(|r| steps.iter().map(move |o| (*r, *o))).collect(),
            parallel: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoreConfig {
    pub filter_width: usize,
    pub stride: usize,
}

impl Default for SmoreConfig {
    fn default() -> Self {
        SmoreConfig { filter_width: 5, stride: 3 }
    }
}

/// Everything a run needs; read from a JSON file and overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    /// Through-plane slice thickness to simulate, mm.
    pub resolution: f64,
    /// Overlap between simulated slices, mm.
    pub overlap: f64,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub enhance: EnhanceConfig,
    pub margin_frac: f64,
    pub sweep: SweepConfig,
    pub smore: SmoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomSpec::default(),
            resolution: 5.0,
            overlap: 2.5,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            enhance: EnhanceConfig::default(),
            margin_frac: DEFAULT_MARGIN_FRAC,
            sweep: SweepConfig::default(),
            smore: SmoreConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        Ok(())
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("phantom".to_string(), self.phantom.seed),
            ("train".to_string(), self.train.seed),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seeds: BTreeMap<String, u64>,
    pub duration_secs: f64,
}

pub fn digest_file(path: impl AsRef<Path>) -> Result<FileDigest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// The `.json` and `.raw` files of a volume stem.
fn volume_files(stem: &Path) -> Vec<PathBuf> {
    let (json, raw) = crate::volume::sidecar_paths(stem);
    vec![json, raw]
}

struct ManifestBuilder {
    command: &'static str,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    fn new(command: &'static str, config: &impl Serialize, seeds: BTreeMap<String, u64>) -> Result<Self> {
        Ok(ManifestBuilder {
            command,
            config: serde_json::to_value(config)?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    fn input(&mut self, files: impl IntoIterator<Item = PathBuf>) {
        self.inputs.extend(files);
    }

    fn output(&mut self, files: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(files);
    }

    fn finish(self, out_dir: &Path) -> Result<RunManifest> {
        let digest_all = |files: &[PathBuf]| files.iter().map(digest_file).collect::<Result<Vec<_>>>();
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            inputs: digest_all(&self.inputs)?,
            outputs: digest_all(&self.outputs)?,
            seeds: self.seeds,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = out_dir.join(MANIFEST_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(&manifest)?;
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn read_manifests(out_dir: impl AsRef<Path>) -> Result<Vec<RunManifest>> {
    let path = out_dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Trims the reference to the test volume's z extent when the test grid is
/// a leading subset of it (enhanced grids drop partially covered slices).
pub fn align_reference(reference: &Volume, test: &Volume) -> Result<Volume> {
    let (rx, ry, rz) = reference.shape();
    let (tx, ty, tz) = test.shape();
    if reference.geometry() != test.geometry() {
        return Err(Error::GeometryMismatch(format!(
            "reference geometry {:?} vs test geometry {:?}",
            reference.geometry(),
            test.geometry()
        )));
    }
    if (rx, ry) != (tx, ty) || tz > rz {
        return Err(Error::GeometryMismatch(format!(
            "reference shape {:?} cannot be aligned to test shape {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    if tz == rz {
        Ok(reference.clone())
    } else {
        reference.truncate_z(tz)
    }
}

/// Metrics of `test` against `reference` after z alignment.
pub fn evaluate_volumes(reference: &Volume, test: &Volume, margin_frac: f64) -> Result<MetricReport> {
    report(&align_reference(reference, test)?, test, margin_frac)
}

// ---------------------------------------------------------------------------
// In-memory runners

/// High-resolution phantom and its degraded counterpart.
pub fn run_simulate(cfg: &RunConfig) -> Result<(Volume, Volume)> {
    let hr = generate(&cfg.phantom)?;
    let lr = degrade_z(&hr, cfg.resolution, cfg.overlap)?;
    Ok((hr, lr))
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub state: ModelState,
    pub loss_history: Vec<f64>,
    pub enhanced: Volume,
}

/// Builds the dataset, trains, and enhances `lr`. `training_profile`
/// replaces the geometry-derived profile for training only.
pub fn run_pipeline(
    lr: &Volume,
    cfg: &RunConfig,
    training_profile: Option<ResamplingProfile>,
    on_checkpoint: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<PipelineOutput, TrainError> {
    cfg.validate()?;
    let pairs = match training_profile {
        Some(p) => build_dataset_unchecked(lr, &p)?,
        None => build_dataset(lr, &lr.geometry().profile()?)?,
    };
    let outcome = train(&pairs, cfg.network, &cfg.train, on_checkpoint)?;
    let enhanced = enhance_volume(lr, &outcome.state, &cfg.enhance)?;
    Ok(PipelineOutput {
        state: outcome.state,
        loss_history: outcome.loss_history,
        enhanced,
    })
}

/// Linear-interpolation baseline on the same output grid as the pipeline.
pub fn run_baseline_interp(lr: &Volume, cfg: &RunConfig) -> Result<Volume> {
    enhance_volume(lr, &PassThrough, &cfg.enhance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub delta_resolution: f64,
    pub delta_overlap: f64,
    pub resolution: f64,
    pub overlap: f64,
    pub coronal_psnr: f64,
    pub sagittal_psnr: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub true_resolution: f64,
    pub true_overlap: f64,
    pub baseline_psnr: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, d_res: f64, d_overlap: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| (c.delta_resolution - d_res).abs() < 1e-12 && (c.delta_overlap - d_overlap).abs() < 1e-12)
    }

    pub fn best(&self) -> Option<&SweepCell> {
        self.cells
            .iter()
            .max_by(|a, b| a.mean_psnr.total_cmp(&b.mean_psnr))
    }
}

/// Degrades `hr` once with the true geometry and trains one model per
/// deviation from scratch, scoring each enhanced volume against `hr`.
pub fn run_mismatch_sweep(hr: &Volume, cfg: &RunConfig) -> Result<SweepReport> {
    let lr = degrade_z(hr, cfg.resolution, cfg.overlap)?;
    let xy = lr.geometry().voxel_xy;
    let profiles = cfg
        .sweep
        .deviations
        .iter()
        .map(|&(dr, dov)| Ok(((dr, dov), ResamplingProfile::new(xy, cfg.resolution + dr, cfg.overlap + dov)?)))
        .collect::<Result<Vec<_>>>()?;

    let run_cell = |&((dr, dov), p): &((f64, f64), ResamplingProfile)| -> Result<SweepCell> {
        // The exact cell uses the geometry-checked path.
        let exact = dr == 0.0 && dov == 0.0;
        let out = run_pipeline(&lr, cfg, if exact { None } else { Some(p) }, |_, _| Ok(()))?;
        let m = evaluate_volumes(hr, &out.enhanced, cfg.margin_frac)?;
        Ok(SweepCell {
            delta_resolution: dr,
            delta_overlap: dov,
            resolution: p.tgt_pixel(),
            overlap: p.overlap(),
            coronal_psnr: m.coronal.psnr,
            sagittal_psnr: m.sagittal.psnr,
            mean_psnr: m.mean_psnr(),
            mean_ssim: m.mean_ssim(),
        })
    };
    let cells: Vec<SweepCell> = if cfg.sweep.parallel {
        profiles.par_iter().map(run_cell).collect::<Result<_>>()?
    } else {
        profiles.iter().map(run_cell).collect::<Result<_>>()?
    };
    let baseline = evaluate_volumes(hr, &run_baseline_interp(&lr, cfg)?, cfg.margin_frac)?;
    Ok(SweepReport {
        true_resolution: cfg.resolution,
        true_overlap: cfg.overlap,
        baseline_psnr: baseline.mean_psnr(),
        cells,
    })
}

// ---------------------------------------------------------------------------
// File-level commands

pub fn cmd_simulate(cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let out_dir = out_dir.as_ref();
    ensure_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("simulate", cfg, cfg.seeds())?;
    let (hr, lr) = run_simulate(cfg)?;
    let (hr_path, lr_path) = (out_dir.join("hr"), out_dir.join("lr"));
    save_volume(&hr, &hr_path)?;
    save_volume(&lr, &lr_path)?;
    manifest.output(volume_files(&hr_path));
    manifest.output(volume_files(&lr_path));
    manifest.finish(out_dir)
}

pub fn cmd_build_dataset(lr_path: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let (lr_path, out_dir) = (lr_path.as_ref(), out_dir.as_ref());
    ensure_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("build-dataset", &serde_json::json!({}), BTreeMap::new())?;
    manifest.input(volume_files(lr_path));
    let lr = load_volume(lr_path)?;
    let pairs = build_dataset(&lr, &lr.geometry().profile()?)?;
    dump_pairs(&pairs, out_dir.join("pairs"))?;
    manifest.finish(out_dir)
}

fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss\n");
    for (i, loss) in history.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, loss));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn checkpoint_writer(dir: PathBuf) -> impl FnMut(usize, &ModelState) -> Result<()> {
    move |epoch, state| save_checkpoint(state, dir.join(format!("epoch_{epoch:04}.ckpt")))
}

/// Saves the last good state on divergence before surfacing the error.
fn handle_train_error(err: TrainError, out_dir: &Path) -> Error {
    if let TrainError::Diverged(d) = &err {
        let _ = save_checkpoint(&d.last_good, out_dir.join("model_last_good.ckpt"));
        let _ = write_loss_history(&out_dir.join("loss_history.csv"), &d.loss_history);
    }
    err.into()
}

/// Trains on `lr` and writes the final checkpoint and loss history.
pub fn cmd_train(lr_path: impl AsRef<Path>, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let (lr_path, out_dir) = (lr_path.as_ref(), out_dir.as_ref());
    ensure_dir(&out_dir.join("checkpoints"))?;
    cfg.validate()?;
    let mut manifest = ManifestBuilder::new("train", cfg, cfg.seeds())?;
    manifest.input(volume_files(lr_path));
    let lr = load_volume(lr_path)?;
    let pairs = build_dataset(&lr, &lr.geometry().profile()?)?;
    write_json(&out_dir.join("run_config.json"), cfg)?;
    let outcome = train(&pairs, cfg.network, &cfg.train, checkpoint_writer(out_dir.join("checkpoints")))
        .map_err(|e| handle_train_error(e, out_dir))?;
    let model = out_dir.join("model.ckpt");
    save_checkpoint(&outcome.state, &model)?;
    write_loss_history(&out_dir.join("loss_history.csv"), &outcome.loss_history)?;
    manifest.output([model, out_dir.join("loss_history.csv")]);
    manifest.finish(out_dir)
}

/// Enhances `lr` with a saved model.
pub fn cmd_enhance(
    lr_path: impl AsRef<Path>,
    model_path: impl AsRef<Path>,
    cfg: &RunConfig,
    out_dir: impl AsRef<Path>,
) -> Result<RunManifest> {
    let (lr_path, model_path, out_dir) = (lr_path.as_ref(), model_path.as_ref(), out_dir.as_ref());
    ensure_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("enhance", &cfg.enhance, BTreeMap::new())?;
    manifest.input(volume_files(lr_path));
    manifest.input([model_path.to_path_buf()]);
    let lr = load_volume(lr_path)?;
    let state = load_checkpoint(model_path)?;
    let enhanced = enhance_volume(&lr, &state, &cfg.enhance)?;
    let path = out_dir.join("enhanced");
    save_volume(&enhanced, &path)?;
    manifest.output(volume_files(&path));
    manifest.finish(out_dir)
}

/// Dataset → training → enhancement in one run.
pub fn cmd_pipeline(lr_path: impl AsRef<Path>, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let (lr_path, out_dir) = (lr_path.as_ref(), out_dir.as_ref());
    ensure_dir(&out_dir.join("checkpoints"))?;
    let mut manifest = ManifestBuilder::new("pipeline", cfg, cfg.seeds())?;
    manifest.input(volume_files(lr_path));
    let lr = load_volume(lr_path)?;
    write_json(&out_dir.join("run_config.json"), cfg)?;
    let out = run_pipeline(&lr, cfg, None, checkpoint_writer(out_dir.join("checkpoints")))
        .map_err(|e| handle_train_error(e, out_dir))?;
    let model = out_dir.join("model.ckpt");
    save_checkpoint(&out.state, &model)?;
    let history = out_dir.join("loss_history.csv");
    write_loss_history(&history, &out.loss_history)?;
    let enhanced = out_dir.join("enhanced");
    save_volume(&out.enhanced, &enhanced)?;
    manifest.output([model, history]);
    manifest.output(volume_files(&enhanced));
    manifest.finish(out_dir)
}

pub fn cmd_baseline_interp(lr_path: impl AsRef<Path>, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let (lr_path, out_dir) = (lr_path.as_ref(), out_dir.as_ref());
    ensure_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("baseline-interp", &cfg.enhance, BTreeMap::new())?;
    manifest.input(volume_files(lr_path));
    let lr = load_volume(lr_path)?;
    let out = run_baseline_interp(&lr, cfg)?;
    let path = out_dir.join("interp");
    save_volume(&out, &path)?;
    manifest.output(volume_files(&path));
    manifest.finish(out_dir)
}

/// Box-kernel degradation of the axial slices plus its equivalent geometry.
pub fn cmd_baseline_smore_degrade(
    hr_path: impl AsRef<Path>,
    filter_width: usize,
    stride: usize,
    out_dir: impl AsRef<Path>,
) -> Result<RunManifest> {
    let (hr_path, out_dir) = (hr_path.as_ref(), out_dir.as_ref());
    ensure_dir(out_dir)?;
    let kernel = BoxDegradation::new(filter_width, stride)?;
    let hr = load_volume(hr_path)?;
    let rows = hr.slice_dims(crate::volume::Orientation::Axial).0;
    let equivalence = kernel.equivalence(hr.geometry().voxel_xy, rows)?;
    let mut manifest = ManifestBuilder::new(
        "baseline-smore-degrade",
        &serde_json::json!({ "kernel": kernel, "equivalent": &equivalence }),
        BTreeMap::new(),
    )?;
    manifest.input(volume_files(hr_path));
    let degraded = box_degrade_axial(&hr, kernel)?;
    let path = out_dir.join("smore_inputs");
    save_volume(&degraded, &path)?;
    let eq_path = out_dir.join("smore_equivalence.json");
    write_json(&eq_path, &equivalence)?;
    manifest.output(volume_files(&path));
    manifest.output([eq_path]);
    manifest.finish(out_dir)
}

pub fn cmd_mismatch_sweep(hr_path: impl AsRef<Path>, cfg: &RunConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    let (hr_path, out_dir) = (hr_path.as_ref(), out_dir.as_ref());
    ensure_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("mismatch-sweep", cfg, cfg.seeds())?;
    manifest.input(volume_files(hr_path));
    let hr = load_volume(hr_path)?;
    let sweep = run_mismatch_sweep(&hr, cfg)?;
    let json = out_dir.join("sweep.json");
    write_json(&json, &sweep)?;
    let csv = out_dir.join("sweep.csv");
    let mut text = String::from("delta_resolution,delta_overlap,resolution,overlap,coronal_psnr,sagittal_psnr,mean_psnr,mean_ssim\n");
    for c in &sweep.cells {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.delta_resolution, c.delta_overlap, c.resolution, c.overlap, c.coronal_psnr, c.sagittal_psnr, c.mean_psnr, c.mean_ssim
        ));
    }
    std::fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    manifest.output([json, csv]);
    manifest.finish(out_dir)
}

pub fn cmd_evaluate(
    reference_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
    margin_frac: f64,
    out_dir: impl AsRef<Path>,
) -> Result<(MetricReport, RunManifest)> {
    let (reference_path, test_path, out_dir) = (reference_path.as_ref(), test_path.as_ref(), out_dir.as_ref());
    ensure_dir(out_dir)?;
    let mut manifest = ManifestBuilder::new("evaluate", &serde_json::json!({ "margin_frac": margin_frac }), BTreeMap::new())?;
    manifest.input(volume_files(reference_path));
    manifest.input(volume_files(test_path));
    let reference = load_volume(reference_path)?;
    let test = load_volume(test_path)?;
    let metrics = evaluate_volumes(&reference, &test, margin_frac)?;
    let path = out_dir.join("metrics.json");
    write_json(
        &path,
        &serde_json::json!({
            "report": metrics,
            "config": { "margin_frac": margin_frac },
            "reference": reference_path.display().to_string(),
            "test": test_path.display().to_string(),
        }),
    )?;
    manifest.output([path]);
    Ok((metrics, manifest.finish(out_dir)?))
}
