//! The training step and loop.
//!
//! One step: build guidance from the batch, embed the ground-truth masks,
//! draw `t ~ U{1..T}` and Gaussian noise, noise the embedding, let the
//! denoiser predict class logits from the noisy state, and descend on the
//! combined loss between the probabilities of the upsampled logits and the
//! full-resolution masks.
//!
//! All randomness of step `k` comes from streams keyed by `(seed, k)` and the
//! batch order of epoch `e` from `(seed, e)`, so a resumed run replays exactly
//! the steps an uninterrupted run would have taken.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::codec::{embed_masks, stack_masks, BinaryMask};
use crate::conditioner::{InputImage, TaskMode};
use crate::config::{ExperimentConfig, TrainMode};
use crate::datasets::{batch_order, preprocess, ForgerySample, JpegAugment};
use crate::error::{Error, Result};
use crate::model::LocalizationModel;
use crate::objectives::{dice_loss, weighted_ce};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::{q_sample_batch, NoiseSchedule};
use crate::seed::{randn, stream};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

/// `t` drawn uniformly from `1..=total` for every batch element.
pub fn sample_timesteps(rng: &mut impl Rng, total: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=total)).collect()
}

/// Task of step `step` under `mode`; mixed runs alternate, starting with IML.
pub fn step_mode(mode: TrainMode, step: u64) -> TaskMode {
    match mode {
        TrainMode::Iml => TaskMode::Iml,
        TrainMode::Ciml => TaskMode::Ciml,
        TrainMode::Mixed if step % 2 == 0 => TaskMode::Iml,
        TrainMode::Mixed => TaskMode::Ciml,
    }
}

/// Loss terms of one forward pass; `total` carries the graph.
pub struct LossParts {
    pub total: Tensor,
    pub wce: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub mode: TaskMode,
    pub grad_norm: f64,
}

pub struct TrainState {
    pub model: LocalizationModel,
    pub optim: AdamW,
    pub schedule: NoiseSchedule,
    pub config: ExperimentConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: u64,
    /// Exponential moving average of the loss (factor 0.98).
    pub running_loss: Option<f64>,
}

fn adamw_config(cfg: &ExperimentConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.train.learning_rate,
        weight_decay: cfg.train.weight_decay,
        max_grad_norm: (cfg.train.grad_clip > 0.0).then_some(cfg.train.grad_clip),
        ..Default::default()
    }
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let model = LocalizationModel::new(&config.model, config.schedule.steps, dtype, device)?;
        let optim = AdamW::new(model.store().named_vars(), adamw_config(config))?;
        Ok(Self {
            model,
            optim,
            schedule: config.schedule.build()?,
            config: config.clone(),
            step: 0,
            epoch: 0,
            running_loss: None,
        })
    }

    /// Restores weights, moments and counters. Training hyper-parameters come
    /// from `config`; the architecture must match the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &ExperimentConfig, dtype: DType, device: &Device) -> Result<Self> {
        if config.architecture_hash() != ckpt.meta.config.architecture_hash() {
            return Err(Error::Checkpoint(
                "checkpoint architecture does not match the config".into(),
            ));
        }
        let mut state = Self::new(config, dtype, device)?;
        state.model.store().load_from(&ckpt.model)?;
        if let Some(o) = &ckpt.optim {
            state.optim.load_state(o.clone())?;
        }
        state.step = ckpt.meta.step;
        state.epoch = ckpt.meta.epoch;
        state.running_loss = ckpt.meta.running_loss;
        Ok(state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            Some(&self.optim),
            CheckpointMeta {
                config: self.config.clone(),
                step: self.step,
                epoch: self.epoch,
                running_loss: self.running_loss,
            },
        )
    }

    /// Forward pass and loss for given timesteps and noise (no update).
    pub fn compute_loss(
        &self,
        batch: &[&ForgerySample],
        mode: TaskMode,
        timesteps: &[usize],
        eps: &Tensor,
    ) -> Result<LossParts> {
        let model = &self.model;
        let forged: Vec<&InputImage> = batch.iter().map(|s| &s.forged).collect();
        let originals: Option<Vec<&InputImage>> = match mode {
            TaskMode::Iml => None,
            TaskMode::Ciml => Some(
                batch
                    .iter()
                    .map(|s| {
                        s.original.as_ref().ok_or_else(|| {
                            Error::ModeMismatch(format!("sample `{}` has no original for CIML", s.source_id))
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let conditions = model.conditions(mode, &forged, originals.as_deref())?;
        let masks: Vec<BinaryMask> = batch.iter().map(|s| s.gt_mask.clone()).collect();
        let x0 = embed_masks(&masks, model.table(), model.config().latent_stride)?.values;
        let x_t = q_sample_batch(&x0, timesteps, eps, &self.schedule)?;
        let logits = model.denoise(&x_t, timesteps, &conditions)?;
        let (h, w) = (masks[0].height(), masks[0].width());
        let probs = logits.upsampled_prob(h, w)?;
        let gt = stack_masks(&masks, probs.dtype(), probs.device())?;
        let lc = &self.config.loss;
        let wce = weighted_ce(&probs, &gt, lc.mu, lc.eta, lc.clip_eps)?;
        let dice = dice_loss(&probs, &gt, lc.smooth)?;
        let total = (wce.affine(lc.lambda, 0.0)? + dice.affine(1.0 - lc.lambda, 0.0)?)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossParts {
            wce: scalar(&wce)?,
            dice: scalar(&dice)?,
            total,
        })
    }

    /// One optimizer step on a mode-homogeneous batch; `rng` supplies the
    /// timesteps and the noise.
    pub fn train_step(&mut self, batch: &[&ForgerySample], mode: TaskMode, rng: &mut impl Rng) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let model = &self.model;
        let timesteps = sample_timesteps(rng, self.schedule.steps(), batch.len());
        let (h, w) = (model.latent_size(), model.latent_size());
        let eps = randn(
            (batch.len(), model.config().embed_dim, h, w),
            rng,
            model.dtype(),
            model.device(),
        )?;
        let parts = self.compute_loss(batch, mode, &timesteps, &eps)?;
        let loss = parts.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss.is_finite() {
            let mut sources = Vec::new();
            if !parts.wce.is_finite() {
                sources.push("weighted_ce".to_string());
            }
            if !parts.dice.is_finite() {
                sources.push("dice".to_string());
            }
            sources.extend(batch.iter().map(|s| format!("sample:{}", s.source_id)));
            return Err(Error::NonFiniteLoss {
                step: self.step,
                timesteps,
                sources,
            });
        }
        let grads = parts.total.backward()?;
        let grad_norm = self.optim.step(&grads)?;
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            loss,
            lr: self.optim.config().lr,
            mode,
            grad_norm,
        };
        self.step += 1;
        self.running_loss = Some(match self.running_loss {
            Some(r) => 0.98 * r + 0.02 * loss,
            None => loss,
        });
        Ok(record)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.config.train.batch_size) as u64
    }

    /// Step budget of the whole run: `epochs` passes, capped by `max_steps`.
    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        let full = self.steps_per_epoch(dataset_len) * self.config.train.epochs as u64;
        self.config.train.max_steps.map_or(full, |m| m.min(full))
    }

    /// Replays the deterministic schedule for step `self.step`: batch
    /// indices, task and (augmented) samples.
    pub fn next_batch(&self, data: &[ForgerySample]) -> Result<(Vec<ForgerySample>, TaskMode)> {
        let tc = &self.config.train;
        let spe = self.steps_per_epoch(data.len());
        let epoch = self.step / spe;
        let within = (self.step % spe) as usize;
        let order = batch_order(data.len(), tc.batch_size, Some(crate::seed::derive_seed(tc.seed, &[STREAM_SHUFFLE, epoch])))?;
        let jpeg = tc.jpeg_aug.then_some(JpegAugment {
            quality: tc.jpeg_quality,
            original: tc.jpeg_aug_original,
        });
        let size = self.model.config().image_size;
        let batch = order[within]
            .iter()
            .map(|&i| {
                let s = &data[i];
                let untouched = jpeg.is_none() && s.forged.height() == size && s.forged.width() == size;
                if untouched {
                    Ok(s.clone())
                } else {
                    let mut rng = stream(tc.seed, &[STREAM_AUGMENT, self.step, i as u64]);
                    preprocess(s, size, jpeg, &mut rng)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((batch, step_mode(tc.mode, self.step)))
    }

    /// Runs the next scheduled step.
    pub fn advance(&mut self, data: &[ForgerySample]) -> Result<StepRecord> {
        let (batch, mode) = self.next_batch(data)?;
        self.epoch = self.step / self.steps_per_epoch(data.len());
        let refs: Vec<&ForgerySample> = batch.iter().collect();
        let mut rng = stream(self.config.train.seed, &[STREAM_STEP, self.step]);
        let rec = self.train_step(&refs, mode, &mut rng)?;
        self.epoch = self.step / self.steps_per_epoch(data.len());
        Ok(rec)
    }
}

/// Where the loop writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:08}.safetensors"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final.safetensors")
    }
}

/// Trains until the step budget is spent. With a run directory, appends one
/// JSON line per logged step, writes periodic checkpoints and always the
/// final one. `on_step` sees every step record.
pub fn train_loop(
    state: &mut TrainState,
    data: &[ForgerySample],
    run_dir: Option<&RunDir>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let total = state.total_steps(data.len());
    let mut log = match run_dir {
        Some(d) => {
            std::fs::create_dir_all(&d.root).map_err(|e| Error::io(&d.root, e))?;
            let p = d.log_path();
            Some((
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
                p,
            ))
        }
        None => None,
    };
    let tc = state.config.train.clone();
    let mut records = Vec::new();
    while state.step < total {
        let rec = state.advance(data)?;
        if let Some((f, p)) = log.as_mut() {
            if rec.step % tc.log_every == 0 || state.step == total {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
        }
        on_step(&rec);
        records.push(rec);
        if let Some(d) = run_dir {
            if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 {
                state.checkpoint().save(&d.checkpoint_path(state.step))?;
            }
        }
    }
    if let Some(d) = run_dir {
        state.checkpoint().save(&d.final_checkpoint())?;
    }
    Ok(records)
}

/// Convenience: trains a fresh model on in-memory samples.
pub fn train_fresh(
    config: &ExperimentConfig,
    data: &[ForgerySample],
    dtype: DType,
    device: &Device,
    run_dir: Option<&Path>,
) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut state = TrainState::new(config, dtype, device)?;
    let dir = run_dir.map(RunDir::new);
    let records = train_loop(&mut state, data, dir.as_ref(), |_| {})?;
    Ok((state, records))
}
