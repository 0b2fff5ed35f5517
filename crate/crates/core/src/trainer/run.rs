//! The training loop, its data source and where its outputs go.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;

use super::{checkpoint, train_step, StepMetrics, TrainConfig, TrainState};
use crate::augment::train_transform;
use crate::error::{CapiError, Result};
use crate::network::NetworkConfig;
use crate::rng::substream;
use crate::schedule::Schedule;

/// Random-access image source.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image `index`, channel-normalized, at its stored resolution.
    fn image(&self, index: usize) -> Result<Array3<f64>>;
}

/// The augmented batch for `step`: indices from the `data` substream,
/// crops and flips from the `augment` substream.
pub fn sample_batch(
    dataset: &dyn Dataset,
    cfg: &TrainConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<Array3<f64>>> {
    if dataset.is_empty() {
        return Err(CapiError::Config("dataset is empty".into()));
    }
    let mut pick = substream(seed, "data", step);
    let mut aug = substream(seed, "augment", step);
    (0..cfg.batch_size)
        .map(|_| {
            let img = dataset.image(pick.random_range(0..dataset.len()))?;
            train_transform(&img, cfg.image_size, cfg.crop_scale, cfg.hflip, &mut aug)
        })
        .collect()
}

/// Receives per-step metrics and periodic checkpoints.
pub trait TrainSink {
    fn record(&mut self, metrics: &StepMetrics) -> Result<()>;
    fn checkpoint(
        &mut self,
        state: &TrainState,
        net: &NetworkConfig,
        cfg: &TrainConfig,
    ) -> Result<()>;
}

/// Keeps everything in memory; checkpoints are stored as archive bytes.
#[derive(Default)]
pub struct MemorySink {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<(u64, Vec<u8>)>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, metrics: &StepMetrics) -> Result<()> {
        self.metrics.push(metrics.clone());
        Ok(())
    }

    fn checkpoint(
        &mut self,
        state: &TrainState,
        net: &NetworkConfig,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.checkpoints
            .push((state.step, checkpoint::to_bytes(state, net, cfg)?));
        Ok(())
    }
}

/// Appends metrics to `metrics.jsonl` and writes
/// `checkpoint_<step>.safetensors` files into a run directory.
pub struct DirectorySink {
    dir: PathBuf,
    metrics: File,
}

impl DirectorySink {
    pub const METRICS: &'static str = "metrics.jsonl";

    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let metrics = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(Self::METRICS))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
        dir.join(format!("checkpoint_{step:08}.safetensors"))
    }
}

impl TrainSink for DirectorySink {
    fn record(&mut self, metrics: &StepMetrics) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(metrics)?)?;
        self.metrics.flush()?;
        Ok(())
    }

    fn checkpoint(
        &mut self,
        state: &TrainState,
        net: &NetworkConfig,
        cfg: &TrainConfig,
    ) -> Result<()> {
        let path = Self::checkpoint_path(&self.dir, state.step);
        checkpoint::save(&path, state, net, cfg)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}

/// Trains from `state.step` to the end of the schedule. A checkpoint is
/// written every `checkpoint_every` steps (0 disables) and after the last.
pub fn pretrain(
    state: TrainState,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    schedule: &Schedule,
    dataset: &dyn Dataset,
    sink: &mut dyn TrainSink,
    checkpoint_every: u64,
) -> Result<TrainState> {
    let total = schedule.total_steps as u64;
    pretrain_until(
        state,
        net,
        cfg,
        schedule,
        dataset,
        sink,
        checkpoint_every,
        total,
    )
}

/// [`pretrain`] that stops once `state.step` reaches `stop` (at most the
/// schedule length) and checkpoints there.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_until(
    mut state: TrainState,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    schedule: &Schedule,
    dataset: &dyn Dataset,
    sink: &mut dyn TrainSink,
    checkpoint_every: u64,
    stop: u64,
) -> Result<TrainState> {
    schedule.validate()?;
    cfg.validate(net)?;
    if dataset.is_empty() {
        return Err(CapiError::Config("dataset is empty".into()));
    }
    let total = (schedule.total_steps as u64).min(stop);
    if state.step > total {
        return Err(CapiError::StepOutOfRange {
            step: state.step as usize,
            total: schedule.total_steps,
        });
    }
    while state.step < total {
        let batch = sample_batch(dataset, cfg, state.seed, state.step)?;
        let metrics = match train_step(&mut state, &batch, net, cfg, schedule) {
            Ok(m) => m,
            Err(e) => {
                log::error!("aborting: {e}");
                return Err(e);
            }
        };
        sink.record(&metrics)?;
        if state.step == total || (checkpoint_every > 0 && state.step.is_multiple_of(checkpoint_every)) {
            sink.checkpoint(&state, net, cfg)?;
        }
        if state.step.is_multiple_of(100) {
            log::info!(
                "step {} mim {:.4} cluster {:.4} lr {:.2e} mi {:.4}",
                metrics.step,
                metrics.mim_loss,
                metrics.cluster_loss,
                metrics.lr,
                metrics.position_mi
            );
        }
    }
    Ok(state)
}
