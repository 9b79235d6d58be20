//! Training loop, loss, optimizer, schedule, metrics and the scan benchmark.

mod bench;
mod loss;
mod metrics;
mod optim;

pub use bench::{bench_scan, bench_scan_with, loglog_slope, BenchOptions, BenchRow, BenchTable, DEFAULT_LENGTHS};
pub use loss::{loss_total, FeatureExtractor, STAGE_CHANNELS};
pub use metrics::{psnr, ssim, ssim_with, SsimConfig, PSNR_CAP};
pub use optim::{adamw_step, multistep_lr, AdamConfig, AdamW, Moments};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{dim_err, Error, Result};
use crate::model::Model;
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub pixel_weight: f64,
    /// Zero disables the feature term.
    pub feature_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 2,
            epochs: 50,
            milestones: vec![30, 40],
            decay: 0.5,
            pixel_weight: 1.0,
            feature_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Usage(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Usage(format!("milestones must be strictly increasing, got {:?}", self.milestones)));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Usage(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        multistep_lr(epoch, self.lr0, &self.milestones, self.decay)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: f64,
}

/// Stacks clips into `raw [B, T, H, W]` and center targets `[B, 3, H, W]`.
pub fn stack_batch(clips: &[&VideoClip]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = clips.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (t, h, w) = (first.frames(), first.height(), first.width());
    let mut raw = Vec::with_capacity(clips.len() * t * h * w);
    let mut target = Vec::with_capacity(clips.len() * 3 * h * w);
    for c in clips {
        if c.raw.shape() != first.raw.shape() {
            return Err(dim_err!("clips in a batch differ: {:?} vs {:?}", c.raw.shape(), first.raw.shape()));
        }
        raw.extend_from_slice(c.raw.data());
        target.extend_from_slice(c.center_clean().data());
    }
    Ok((Tensor::from_vec(&[clips.len(), t, h, w], raw)?, Tensor::from_vec(&[clips.len(), 3, h, w], target)?))
}

/// Clamps to the displayable `[0, 1]` range, dropping the graph.
pub fn clamp_unit(x: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("same shape")
}

/// Restored center frame `[3, H, W]` of one clip, clamped.
pub fn restore(model: &Model<f32>, clip: &VideoClip) -> Result<Tensor<f32>> {
    let (t, h, w) = (clip.frames(), clip.height(), clip.width());
    let out = model.forward(&clip.raw.detach().reshape(&[1, t, h, w])?)?;
    let out = clamp_unit(&out.detach().reshape(&[3, h, w])?);
    out.ensure_finite("restored frame")?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the bilinear-demosaicked degraded center frame.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub seconds: f64,
}

pub fn evaluate_clip(model: &Model<f32>, clip: &VideoClip) -> Result<ClipMetrics> {
    let started = Instant::now();
    let restored = restore(model, clip)?;
    let seconds = started.elapsed().as_secs_f64();
    let clean = clip.center_clean();
    let baseline = clip.center_baseline()?;
    Ok(ClipMetrics {
        psnr: psnr(&restored, &clean, 1.0)?,
        ssim: ssim(&restored, &clean)?,
        baseline_psnr: psnr(&baseline, &clean, 1.0)?,
        baseline_ssim: ssim(&baseline, &clean)?,
        seconds,
    })
}

/// Owns the model, optimizer state and loss network of one run.
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Index of the epoch in progress.
    pub epoch: usize,
    features: FeatureExtractor<f32>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            optimizer: AdamW::new(config.adam()),
            features: FeatureExtractor::new(config.seed),
            epoch: 0,
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr(self.epoch)
    }

    /// One optimizer step on a batch of clips.
    pub fn train_step(&mut self, clips: &[&VideoClip]) -> Result<StepLog> {
        let (raw, target) = stack_batch(clips)?;
        let pred = self.model.forward(&raw)?;
        let loss = loss_total(&pred, &target, &self.features, self.config.pixel_weight, self.config.feature_weight)?;
        let value = f64::from(loss.item()?);
        if !value.is_finite() {
            return Err(Error::Domain(format!("loss became {value} at step {}", self.step() + 1)));
        }
        loss.backward()?;
        let lr = self.lr();
        self.optimizer.step(self.model.named_params(), lr)?;
        Ok(StepLog {
            step: self.optimizer.step,
            epoch: self.epoch,
            lr,
            loss: value,
            psnr: psnr(&clamp_unit(&pred.detach()), &target, 1.0)?,
        })
    }

    /// Batch order of an epoch: a seeded shuffle of clip indices.
    pub fn epoch_order(&self, clips: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..clips).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Trains one epoch, calling `on_step` after every step, then advances
    /// the epoch counter. Returns the mean loss.
    pub fn run_epoch(&mut self, clips: &[VideoClip], mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::Usage("no clips to train on".into()));
        }
        let mut total = 0.0;
        let batches = self.epoch_order(clips.len());
        for batch in &batches {
            let refs: Vec<&VideoClip> = batch.iter().map(|&i| &clips[i]).collect();
            let log = self.train_step(&refs)?;
            total += log.loss;
            on_step(&log)?;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }
}
