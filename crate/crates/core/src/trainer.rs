//! Epoch loop over the training pairs with seeded shuffling and patching.

use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingPair;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{loss_l2, ModelState, NetworkConfig};

pub const MIN_PATCH: usize = 32;

/// Step-size schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over all steps.
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::InvalidConfig(format!("unknown schedule {s:?}"))),
        }
    }
}

impl LrSchedule {
    pub fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Square patch side; 0 trains on full slices. A patch larger than a
    /// slice dimension is cut to that dimension.
    pub patch: usize,
    /// Steps per epoch; `None` means one pass over the dataset.
    pub pairs_per_epoch: Option<usize>,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Emit a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            patch: 96,
            pairs_per_epoch: None,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.patch != 0 && self.patch < MIN_PATCH {
            return Err(Error::InvalidConfig(format!(
                "patch must be 0 or >= {MIN_PATCH}, got {}",
                self.patch
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::InvalidConfig("pairs_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Mean training loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Training stopped because a loss, gradient or update became non-finite.
#[derive(Debug)]
pub struct Diverged {
    pub epoch: usize,
    pub last_good: Box<ModelState>,
    pub loss_history: Vec<f64>,
    pub cause: Error,
}

#[derive(Debug)]
pub enum TrainError {
    Invalid(Error),
    Diverged(Diverged),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Diverged(d) => write!(f, "training diverged in epoch {}: {}", d.epoch + 1, d.cause),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid(e) => e,
            TrainError::Diverged(d) => d.cause,
        }
    }
}

/// Same window of `input` and `target`.
fn crop_pair(pair: &TrainingPair, patch: usize, rng: &mut ChaCha8Rng) -> (Image, Image) {
    let (rows, cols) = pair.input.dim();
    if patch == 0 || (patch >= rows && patch >= cols) {
        return (pair.input.clone(), pair.target.clone());
    }
    let (ph, pw) = (patch.min(rows), patch.min(cols));
    let r0 = rng.random_range(0..=rows - ph);
    let c0 = rng.random_range(0..=cols - pw);
    let window = s![r0..r0 + ph, c0..c0 + pw];
    (pair.input.slice(window).to_owned(), pair.target.slice(window).to_owned())
}

/// Runs `cfg.epochs` epochs of single-sample ADAM steps from a fresh
/// initialization. `on_checkpoint` is called with the epoch number and state
/// every `cfg.checkpoint_every` epochs and after the final epoch.
pub fn train(
    pairs: &[TrainingPair],
    net_cfg: NetworkConfig,
    cfg: &TrainConfig,
    on_checkpoint: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<TrainOutcome, TrainError> {
    let state = ModelState::init(net_cfg, cfg.seed)?;
    train_from(state, pairs, cfg, on_checkpoint)
}

pub fn train_from(
    mut state: ModelState,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no training pairs".into()).into());
    }
    if let Some(bad) = pairs.iter().find(|p| p.input.dim() != p.target.dim()) {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", bad.target.dim()),
            actual: format!("{:?}", bad.input.dim()),
        }
        .into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_0DE5);
    let steps = cfg.pairs_per_epoch.unwrap_or(pairs.len());
    let mut order: Vec<usize> = Vec::with_capacity(steps);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = state.clone();
    let total_steps = cfg.epochs * steps;
    let mut step_no = 0;

    for epoch in 0..cfg.epochs {
        order.clear();
        while order.len() < steps {
            let mut pass: Vec<usize> = (0..pairs.len()).collect();
            pass.shuffle(&mut rng);
            order.extend(pass.into_iter().take(steps - order.len()));
        }
        let mut total = 0.0f64;
        for &idx in &order {
            let (input, target) = crop_pair(&pairs[idx], cfg.patch, &mut rng);
            let lr = cfg.schedule.rate(cfg.lr, step_no, total_steps);
            step_no += 1;
            let step = state
                .backward(&input, &target)
                .and_then(|(loss, grads)| state.adam_step(&grads, lr).map(|_| loss));
            match step {
                Ok(loss) => total += loss as f64,
                Err(cause) => {
                    return Err(TrainError::Diverged(Diverged {
                        epoch,
                        last_good: Box::new(last_good),
                        loss_history: history,
                        cause,
                    }))
                }
            }
        }
        history.push(total / steps as f64);
        last_good = state.clone();
        let done = epoch + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.epochs {
            on_checkpoint(done, &state)?;
        }
    }
    Ok(TrainOutcome {
        state,
        loss_history: history,
    })
}

/// Mean full-slice loss over `pairs` without updating the model.
pub fn evaluate_epoch(state: &ModelState, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        total += loss_l2(&state.forward(&pair.input)?, &pair.target)?;
    }
    Ok(total / pairs.len() as f64)
}
