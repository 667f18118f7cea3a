use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thruplane::enhancer::Combine;
use thruplane::harness::{self, RunConfig};
use thruplane::network::NetworkConfig;
use thruplane::trainer::LrSchedule;
use thruplane::Error;

/// Through-plane super-resolution of anisotropic volumes.
#[derive(Parser)]
#[command(name = "thruplane", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom and its degraded counterpart (hr, lr).
    Simulate {
        #[arg(long)]
        output: PathBuf,
        /// Phantom size as X,Y,Z.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the training pairs of a volume as images.
    BuildDataset {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a network on a low-resolution volume.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Enhance a volume with a trained checkpoint.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and enhance in one run.
    Pipeline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Linear interpolation on the enhanced grid.
    BaselineInterp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Box-kernel degradation of axial slices and its equivalent geometry.
    BaselineSmore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        stride: usize,
    },
    /// Train with deviated geometries around the true one and score each.
    Sweep {
        /// High-resolution reference volume.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// PSNR/SSIM of a volume against a reference.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        margin_frac: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Slice thickness in mm.
    #[arg(long)]
    resolution: Option<f64>,
    /// Slice overlap in mm.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    schedule: Option<LrSchedule>,
    /// Patch side; 0 trains on full slices.
    #[arg(long)]
    patch: Option<usize>,
    /// average, coronal or sagittal.
    #[arg(long)]
    combine: Option<Combine>,
    #[arg(long)]
    margin_frac: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(v) = self.resolution {
            cfg.resolution = v;
        }
        if let Some(v) = self.overlap {
            cfg.overlap = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.depth {
            cfg.network = NetworkConfig::new(v)?;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.schedule {
            cfg.train.schedule = v;
        }
        if let Some(v) = self.patch {
            cfg.train.patch = v;
        }
        if let Some(v) = self.combine {
            cfg.enhance.combine = v;
        }
        if let Some(v) = self.margin_frac {
            cfg.margin_frac = v;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    let manifest = match cli.command {
        Command::Simulate { output, dims, run } => {
            let mut cfg = run.resolve()?;
            if let Some(d) = dims {
                cfg.phantom.dims = d
                    .try_into()
                    .map_err(|d: Vec<usize>| Error::InvalidConfig(format!("--dims needs X,Y,Z, got {d:?}")))?;
            }
            harness::cmd_simulate(&cfg, output)?
        }
        Command::BuildDataset { input, output } => harness::cmd_build_dataset(input, output)?,
        Command::Train { input, output, run } => harness::cmd_train(input, &run.resolve()?, output)?,
        Command::Enhance { input, checkpoint, output, run } => {
            harness::cmd_enhance(input, checkpoint, &run.resolve()?, output)?
        }
        Command::Pipeline { input, output, run } => harness::cmd_pipeline(input, &run.resolve()?, output)?,
        Command::BaselineInterp { input, output, run } => {
            harness::cmd_baseline_interp(input, &run.resolve()?, output)?
        }
        Command::BaselineSmore { input, output, width, stride } => {
            harness::cmd_baseline_smore_degrade(input, width, stride, output)?
        }
        Command::Sweep { input, output, run } => harness::cmd_mismatch_sweep(input, &run.resolve()?, output)?,
        Command::Evaluate { reference, test, output, margin_frac, config } => {
            let cfg = match config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            let margin = margin_frac.unwrap_or(cfg.margin_frac);
            let (report, _) = harness::cmd_evaluate(reference, test, margin, output)?;
            return Ok(serde_json::to_value(report)?);
        }
    };
    Ok(serde_json::to_value(manifest)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": e.kind() }));
            ExitCode::FAILURE
        }
    }
}
