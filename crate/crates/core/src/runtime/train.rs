use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use super::data::Dataset;
use super::net::Network;
use crate::container::{Checkpoint, DType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    FreshRandom { seed: u64 },
    FromCheckpoint { path: PathBuf },
}

/// Which batches the running statistics average over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsWindow {
    /// Every batch of the last epoch.
    #[default]
    Epoch,
    /// Every batch of the whole call.
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Seeds the shuffling order.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: Init,
    /// Dtype of float tensors in the returned checkpoint.
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub stats_window: StatsWindow,
}

fn default_dtype() -> DType {
    DType::F32
}

impl TrainConfig {
    pub fn new(seed: u64, init: Init) -> Self {
        TrainConfig {
            seed,
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            init,
            dtype: DType::F32,
            stats_window: StatsWindow::Epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Validation("batch size must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        Ok(())
    }
}

/// Trains from the configured initialization.
pub fn train(arch: &ArchSpec, data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let start = match &cfg.init {
        Init::FreshRandom { seed } => arch.init_checkpoint(*seed, DType::F64)?,
        Init::FromCheckpoint { path } => Checkpoint::load(path)?,
    };
    train_from(arch, data, cfg, &start)
}

/// Trains starting from `start`, ignoring `cfg.init`.
///
/// Mini-batch SGD with momentum on mean softmax cross-entropy; the partial
/// last batch of each epoch is dropped. Running statistics restart at zero
/// and average the batches of `cfg.stats_window` with equal weight.
pub fn train_from(arch: &ArchSpec, data: &Dataset, cfg: &TrainConfig, start: &Checkpoint) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.dims() != arch.input_dim() || data.classes != arch.output_dim() {
        return Err(Error::Validation(format!(
            "dataset is {} dims / {} classes, architecture is {} / {}",
            data.dims(),
            data.classes,
            arch.input_dim(),
            arch.output_dim()
        )));
    }
    if data.len() < cfg.batch_size {
        return Err(Error::Validation(format!(
            "dataset of {} samples is smaller than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut net = Network::from_checkpoint(arch, start)?;
    net.reset_running_stats();
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        if cfg.stats_window == StatsWindow::Epoch {
            net.reset_running_stats();
        }
        for (batch, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let b = data.select(idx);
            let (loss, grads, stats) = net.loss_and_grads(&b.features, &b.labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch, loss });
            }
            net.track(&stats);
            for ((p, g), v) in net.params_mut().into_iter().zip(&grads).zip(&mut velocity) {
                for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                    *p -= cfg.lr * *v;
                }
            }
        }
    }
    net.to_checkpoint(cfg.dtype)
}
