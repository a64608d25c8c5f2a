//! Inference: deterministic DDIM trajectories from Gaussian noise, the
//! zero-noise ablation, and uncertainty maps from label flips.
//!
//! Each trajectory starts from `x_T ~ N(0, I)` drawn from a per-image seed.
//! At every timestep of the subsequence the denoiser predicts class logits,
//! their probability-weighted class embedding serves as the clean estimate,
//! and a DDIM update moves the state to the previous timestep. The last update
//! targets timestep 0 and so returns the clean estimate itself.

use candle_core::Tensor;

use crate::codec::{logits_to_embedding, threshold_probs, BinaryMask, MaskLogits};
use crate::conditioner::{Conditions, InputImage, TaskMode};
use crate::config::SamplerConfig;
use crate::datasets::ForgerySample;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, EvalReport, ImageScores};
use crate::model::LocalizationModel;
use crate::schedule::{ddim_step, NoiseSchedule, NoisyState, TimestepSubsequence};
use crate::seed::{derive_seed, key_of, randn, stream};

/// One denoiser call of a trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub timestep: usize,
    /// `(1, 2, h, w)` logits on the latent grid.
    pub logits: MaskLogits,
    /// Thresholded full-resolution prediction.
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct SamplingTrajectory {
    pub steps: Vec<TrajectoryStep>,
    pub final_mask: BinaryMask,
    /// Full-resolution manipulated-class probabilities of the last step.
    pub final_probs: Vec<f32>,
}

/// A single-shot prediction (zero-noise ablation).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub mask: BinaryMask,
}

impl SamplingTrajectory {
    pub fn prediction(&self) -> Prediction {
        Prediction {
            probs: self.final_probs.clone(),
            mask: self.final_mask.clone(),
        }
    }
}

/// Per-pixel label-flip frequency along a trajectory, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl UncertaintyMap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// 8-bit heat map, 0 for no flips and 255 for a flip at every step.
    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([(self.get(y as usize, x as usize) * 255.0).round() as u8])
        })
    }
}

/// Flips between consecutive step masks divided by `S - 1`; zeros when `S = 1`.
pub fn uncertainty_map(traj: &SamplingTrajectory) -> UncertaintyMap {
    let (h, w) = (traj.final_mask.height(), traj.final_mask.width());
    let mut counts = vec![0u32; h * w];
    for pair in traj.steps.windows(2) {
        for (c, (a, b)) in counts
            .iter_mut()
            .zip(pair[0].mask.data().iter().zip(pair[1].mask.data()))
        {
            *c += (a != b) as u32;
        }
    }
    let denom = traj.steps.len().saturating_sub(1).max(1) as f32;
    UncertaintyMap {
        height: h,
        width: w,
        values: counts.into_iter().map(|c| c as f32 / denom).collect(),
    }
}

/// Read-only inference over one model.
pub struct Sampler<'a> {
    model: &'a LocalizationModel,
    schedule: &'a NoiseSchedule,
    threshold: f64,
    output: (usize, usize),
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a LocalizationModel, schedule: &'a NoiseSchedule) -> Result<Self> {
        if schedule.steps() != model.total_steps() {
            return Err(Error::Checkpoint(format!(
                "model was built for T={} but the schedule has T={}",
                model.total_steps(),
                schedule.steps()
            )));
        }
        let s = model.config().image_size;
        Ok(Self {
            model,
            schedule,
            threshold: 0.5,
            output: (s, s),
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidRange(format!("threshold {threshold} outside (0, 1)")));
        }
        self.threshold = threshold;
        Ok(self)
    }

    /// Resolution of the returned probabilities and masks.
    pub fn with_output_size(mut self, height: usize, width: usize) -> Self {
        self.output = (height, width);
        self
    }

    fn latent_shape(&self, b: usize) -> (usize, usize, usize, usize) {
        let l = self.model.latent_size();
        (b, self.model.config().embed_dim, l, l)
    }

    fn decode(&self, logits: &MaskLogits) -> Result<(Vec<Vec<f32>>, Vec<BinaryMask>)> {
        let (h, w) = self.output;
        let probs = logits.upsampled_prob(h, w)?.to_dtype(candle_core::DType::F32)?;
        let b = probs.dim(0)?;
        let mut all = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        for i in 0..b {
            let p = probs.get(i)?.flatten_all()?.to_vec1::<f32>()?;
            masks.push(threshold_probs(&p, h, w, self.threshold));
            all.push(p);
        }
        Ok((all, masks))
    }

    /// Trajectories for a batch; image `i` starts from noise keyed by `seeds[i]`.
    pub fn sample_seeded(&self, conditions: &Conditions, steps: usize, seeds: &[u64]) -> Result<Vec<SamplingTrajectory>> {
        let b = conditions.batch_size()?;
        if seeds.len() != b {
            return Err(Error::ShapeMismatch {
                expected: vec![b],
                got: vec![seeds.len()],
            });
        }
        let sub = TimestepSubsequence::uniform(self.schedule.steps(), steps)?;
        let conditions = conditions.detach();
        let (dtype, device) = (self.model.dtype(), self.model.device());
        let (_, d, lh, lw) = self.latent_shape(b);
        let noise = seeds
            .iter()
            .map(|&s| randn((1, d, lh, lw), &mut stream(s, &[]), dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let mut x = NoisyState {
            values: Tensor::cat(&noise, 0)?,
            timestep: self.schedule.steps(),
        };
        let mut per_image: Vec<Vec<TrajectoryStep>> = (0..b).map(|_| Vec::with_capacity(steps)).collect();
        let mut last_probs = Vec::new();
        for (tau, tau_prev) in sub.reverse_pairs() {
            debug_assert_eq!(x.timestep, tau);
            let logits = self.model.denoise(&x.values, &vec![tau; b], &conditions)?;
            let logits = MaskLogits(logits.0.detach());
            let x0_hat = logits_to_embedding(&logits, self.model.table())?.values.detach();
            let next = ddim_step(&x, &x0_hat, tau_prev, self.schedule)?;
            x = NoisyState {
                values: next.values.detach(),
                timestep: next.timestep,
            };
            let (probs, masks) = self.decode(&logits)?;
            for (i, mask) in masks.into_iter().enumerate() {
                per_image[i].push(TrajectoryStep {
                    timestep: tau,
                    logits: MaskLogits(logits.0.narrow(0, i, 1)?),
                    mask,
                });
            }
            last_probs = probs;
        }
        Ok(per_image
            .into_iter()
            .zip(last_probs)
            .map(|(steps, final_probs)| SamplingTrajectory {
                final_mask: steps.last().expect("S >= 1").mask.clone(),
                steps,
                final_probs,
            })
            .collect())
    }

    /// Image `i` of the batch uses the stream keyed by `(seed, i)`.
    pub fn sample(&self, conditions: &Conditions, steps: usize, seed: u64) -> Result<Vec<SamplingTrajectory>> {
        let b = conditions.batch_size()?;
        let seeds: Vec<u64> = (0..b as u64).map(|i| derive_seed(seed, &[i])).collect();
        self.sample_seeded(conditions, steps, &seeds)
    }

    /// The no-diffusion baseline: one denoiser call on an all-zero state at `t = T`.
    pub fn zero_noise(&self, conditions: &Conditions) -> Result<Vec<Prediction>> {
        let (probs, masks) = self.decode(&zero_noise_logits(self.model, conditions)?)?;
        Ok(probs
            .into_iter()
            .zip(masks)
            .map(|(probs, mask)| Prediction { probs, mask })
            .collect())
    }
}

/// Samples a batch with threshold 0.5 at the model's input resolution.
pub fn sample(
    model: &LocalizationModel,
    conditions: &Conditions,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<SamplingTrajectory>> {
    Sampler::new(model, schedule)?.sample(conditions, steps, seed)
}

/// Thresholded zero-noise predictions at the model's input resolution.
pub fn sample_zero_noise(model: &LocalizationModel, conditions: &Conditions) -> Result<Vec<BinaryMask>> {
    let s = model.config().image_size;
    crate::codec::logits_to_masks(&zero_noise_logits(model, conditions)?, 0.5, s, s)
}

/// One denoiser call on an all-zero state at `t = T`.
pub fn zero_noise_logits(model: &LocalizationModel, conditions: &Conditions) -> Result<MaskLogits> {
    let b = conditions.batch_size()?;
    let l = model.latent_size();
    let zeros = Tensor::zeros((b, model.config().embed_dim, l, l), model.dtype(), model.device())?;
    let t = model.total_steps();
    let logits = model.denoise(&zeros, &vec![t; b], &conditions.detach())?;
    Ok(MaskLogits(logits.0.detach()))
}

/// How predictions are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// DDIM with this many steps.
    Steps(usize),
    ZeroNoise,
}

/// Per-image noise seed for evaluation: depends on the image id, not on its
/// position in a batch.
pub fn image_seed(seed: u64, image_id: &str) -> u64 {
    derive_seed(seed, &[key_of(image_id)])
}

/// Guidance for a batch of samples under `mode`.
pub fn batch_conditions(model: &LocalizationModel, batch: &[&ForgerySample], mode: TaskMode) -> Result<Conditions> {
    let forged: Vec<&InputImage> = batch.iter().map(|s| &s.forged).collect();
    let originals = match mode {
        TaskMode::Iml => None,
        TaskMode::Ciml => Some(
            batch
                .iter()
                .map(|s| {
                    s.original
                        .as_ref()
                        .ok_or_else(|| Error::ModeMismatch(format!("sample `{}` has no original", s.source_id)))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    model.conditions(mode, &forged, originals.as_deref())
}

/// Predictions for every sample, batched by `cfg.batch_size`, in input order.
pub fn predict_all(
    model: &LocalizationModel,
    schedule: &NoiseSchedule,
    samples: &[ForgerySample],
    mode: TaskMode,
    variant: Variant,
    cfg: &SamplerConfig,
) -> Result<Vec<Prediction>> {
    let sampler = Sampler::new(model, schedule)?.with_threshold(cfg.threshold)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&ForgerySample> = chunk.iter().collect();
        let conds = batch_conditions(model, &refs, mode)?;
        match variant {
            Variant::ZeroNoise => out.extend(sampler.zero_noise(&conds)?),
            Variant::Steps(s) => {
                let seeds: Vec<u64> = chunk.iter().map(|c| image_seed(cfg.seed, &c.source_id)).collect();
                out.extend(sampler.sample_seeded(&conds, s, &seeds)?.iter().map(|t| t.prediction()));
            }
        }
    }
    Ok(out)
}

/// Samples and scores every image, then aggregates under `dataset`.
pub fn evaluate(
    model: &LocalizationModel,
    schedule: &NoiseSchedule,
    samples: &[ForgerySample],
    mode: TaskMode,
    variant: Variant,
    cfg: &SamplerConfig,
    dataset: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let preds = predict_all(model, schedule, samples, mode, variant, cfg)?;
    let scores = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| ImageScores::compute(dataset, &s.source_id, &p.probs, &s.gt_mask, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(masks: &[&[u8]]) -> SamplingTrajectory {
        let steps: Vec<TrajectoryStep> = masks
            .iter()
            .enumerate()
            .map(|(i, m)| TrajectoryStep {
                timestep: masks.len() - i,
                logits: MaskLogits(Tensor::zeros((1, 2, 1, 1), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap()),
                mask: BinaryMask::new(1, m.len(), m.to_vec()).unwrap(),
            })
            .collect();
        SamplingTrajectory {
            final_mask: steps.last().unwrap().mask.clone(),
            final_probs: vec![],
            steps,
        }
    }

    #[test]
    fn uncertainty_counts_flips() {
        let single = uncertainty_map(&traj(&[&[1, 0, 1]]));
        assert_eq!(single.values, vec![0.0; 3]);
        let u = uncertainty_map(&traj(&[&[0, 0, 1], &[1, 0, 1], &[0, 0, 1], &[1, 0, 0], &[0, 0, 0]]));
        assert_eq!(u.values, vec![1.0, 0.0, 0.25]);
    }
}
