//! Experiment configuration. A single TOML file determines a run together
//! with its seed; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, SigmaMode};

/// Environment variable naming a directory searched for relative config paths.
pub const CONFIG_DIR_ENV: &str = "MASKDIFF_CONFIG_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SizeProfile {
    #[default]
    Tiny,
    Full,
}

/// Which task a run trains: forged-only, forged + original, or alternating batches of both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Iml,
    Ciml,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end, self.sigma_mode)
    }
}

/// Architecture hyper-parameters. Unset optional fields take the profile default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub profile: SizeProfile,
    pub image_size: usize,
    pub embed_dim: usize,
    pub latent_stride: usize,
    pub fpn_channels: Option<usize>,
    pub fusion_channels: Option<usize>,
    pub time_dim: usize,
    /// Per-stage widths (tiny) or the base width of the first stage (full, `[C]`).
    pub encoder_widths: Option<Vec<usize>>,
    pub encoder_depths: Option<Vec<usize>>,
    pub encoder_heads: Option<Vec<usize>>,
    pub window_size: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub decoder_heads: Option<usize>,
    pub decoder_points: Option<usize>,
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            profile: SizeProfile::Tiny,
            image_size: 64,
            embed_dim: 16,
            latent_stride: 4,
            fpn_channels: None,
            fusion_channels: None,
            time_dim: 64,
            encoder_widths: None,
            encoder_depths: None,
            encoder_heads: None,
            window_size: None,
            decoder_layers: None,
            decoder_heads: None,
            decoder_points: None,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            profile: SizeProfile::Full,
            image_size: 512,
            ..Self::default()
        }
    }

    fn pick<T: Clone>(&self, set: &Option<T>, tiny: T, full: T) -> T {
        set.clone().unwrap_or(match self.profile {
            SizeProfile::Tiny => tiny,
            SizeProfile::Full => full,
        })
    }

    pub fn fpn_channels(&self) -> usize {
        self.pick(&self.fpn_channels, 64, 256)
    }

    pub fn fusion_channels(&self) -> usize {
        self.pick(&self.fusion_channels, 32, 128)
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.pick(&self.encoder_widths, vec![16, 32, 48, 64], vec![128])
    }

    pub fn encoder_depths(&self) -> Vec<usize> {
        self.pick(&self.encoder_depths, vec![1, 1, 1, 1], vec![2, 2, 18, 2])
    }

    pub fn encoder_heads(&self) -> Vec<usize> {
        self.pick(&self.encoder_heads, vec![1, 1, 1, 1], vec![4, 8, 16, 32])
    }

    pub fn window_size(&self) -> usize {
        self.pick(&self.window_size, 8, 8)
    }

    pub fn decoder_layers(&self) -> usize {
        self.pick(&self.decoder_layers, 2, 6)
    }

    pub fn decoder_heads(&self) -> usize {
        self.pick(&self.decoder_heads, 1, 8)
    }

    pub fn decoder_points(&self) -> usize {
        self.pick(&self.decoder_points, 4, 4)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::config("model.image_size", "must be a positive multiple of 32"));
        }
        if self.latent_stride != 4 {
            return Err(Error::config(
                "model.latent_stride",
                "the guidance pyramid is fused at stride 4; only 4 is supported",
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("model.time_dim", "must be a positive even number"));
        }
        if self.fpn_channels() == 0 || self.fusion_channels() == 0 {
            return Err(Error::config("model.fpn_channels", "channel widths must be positive"));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("model.pixel_std", "must be positive"));
        }
        match self.profile {
            SizeProfile::Tiny => {
                if self.encoder_widths().len() != 4 || self.encoder_depths().len() != 4 {
                    return Err(Error::config(
                        "model.encoder_widths",
                        "tiny profile needs four stage widths and depths",
                    ));
                }
            }
            SizeProfile::Full => {
                if self.encoder_widths().len() != 1 {
                    return Err(Error::config(
                        "model.encoder_widths",
                        "full profile takes a single base width",
                    ));
                }
                let heads = self.encoder_heads();
                if heads.len() != 4 || self.encoder_depths().len() != 4 {
                    return Err(Error::config(
                        "model.encoder_heads",
                        "full profile needs four stage depths and head counts",
                    ));
                }
                let base = self.encoder_widths()[0];
                for (i, h) in heads.iter().enumerate() {
                    if *h == 0 || (base << i) % h != 0 {
                        return Err(Error::config(
                            "model.encoder_heads",
                            format!("stage {i} width {} not divisible by {h} heads", base << i),
                        ));
                    }
                }
                if (2 * self.fusion_channels()) % self.decoder_heads() != 0 {
                    return Err(Error::config(
                        "model.decoder_heads",
                        "twice the fusion width must be divisible by the head count",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight on manipulated pixels in the cross-entropy term.
    pub mu: f64,
    /// Weight on authentic pixels in the cross-entropy term.
    pub eta: f64,
    /// Share of the cross-entropy term; dice gets `1 - lambda`.
    pub lambda: f64,
    pub smooth: f64,
    pub clip_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            eta: 2.5,
            lambda: 0.3,
            smooth: 1.0,
            clip_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::config("loss.mu", "must be positive"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::config("loss.eta", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("loss.lambda", "must lie in [0, 1]"));
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::config("loss.smooth", "must be non-negative"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(Error::config("loss.clip_eps", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have been taken.
    pub max_steps: Option<u64>,
    pub grad_clip: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    pub jpeg_aug: bool,
    pub jpeg_quality: [u8; 2],
    /// Re-encode the CIML original as well, with an independent quality draw.
    pub jpeg_aug_original: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Iml,
            batch_size: 12,
            learning_rate: 6e-5,
            weight_decay: 1e-2,
            epochs: 50,
            max_steps: None,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            jpeg_aug: true,
            jpeg_quality: [30, 100],
            jpeg_aug_original: true,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip", "must be non-negative (0 disables)"));
        }
        let [lo, hi] = self.jpeg_quality;
        if lo == 0 || lo > hi || hi > 100 {
            return Err(Error::config("train.jpeg_quality", "need 1 <= lo <= hi <= 100"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            test_manifest: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            seed: 0,
            threshold: 0.5,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<document>".into());
            Error::config(key, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths that do not exist are looked up in
    /// the directory named by [`CONFIG_DIR_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let resolved = resolve_config_path(path);
        let text = std::fs::read_to_string(&resolved).map_err(|e| Error::io(&resolved, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides, parsing values as TOML.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Value = toml::Value::try_from(self).expect("config serializes");
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.clone(), "override must look like key=value"))?;
            let key = key.trim();
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .map(|mut t| t.remove("v").expect("parsed key"))
                .unwrap_or_else(|_| toml::Value::String(raw.trim().to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, "path does not name a table"))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let text = toml::to_string(&doc).expect("document serializes");
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.steps == 0 {
            return Err(Error::config("schedule.steps", "must be positive"));
        }
        self.schedule
            .build()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            return Err(Error::config("sampler.steps", "need 1 <= steps <= schedule.steps"));
        }
        if !(self.sampler.threshold > 0.0 && self.sampler.threshold < 1.0) {
            return Err(Error::config("sampler.threshold", "must lie in (0, 1)"));
        }
        if self.sampler.batch_size == 0 {
            return Err(Error::config("sampler.batch_size", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Hash of the fields that determine parameter shapes and forward behaviour.
    pub fn architecture_hash(&self) -> String {
        let canonical = serde_json::to_string(&(&self.model, &self.schedule.steps)).expect("serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

pub fn resolve_config_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(CONFIG_DIR_ENV) {
        Some(dir) => {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                candidate
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_training_recipe() {
        let c = ExperimentConfig::default();
        assert_eq!(c.schedule.steps, 1000);
        assert_eq!(c.train.batch_size, 12);
        assert_eq!(c.train.learning_rate, 6e-5);
        assert_eq!(c.train.epochs, 50);
        assert_eq!((c.loss.mu, c.loss.eta, c.loss.lambda), (0.5, 2.5, 0.3));
        assert_eq!(c.model.fpn_channels(), 64);
        assert_eq!(ModelConfig::full().fpn_channels(), 256);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[train]\nbatchsize = 3\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
        let err = ExperimentConfig::from_toml_str("[loss]\nlambda = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("loss.lambda"), "{err}");
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let mut c = ExperimentConfig::default();
        c.train.mode = TrainMode::Mixed;
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let o = c
            .with_overrides(&["train.epochs=3".into(), "data.output_dir=\"x/y\"".into()])
            .unwrap();
        assert_eq!(o.train.epochs, 3);
        assert_eq!(o.data.output_dir, PathBuf::from("x/y"));
        assert_ne!(o.hash(), c.hash());
        assert_eq!(o.architecture_hash(), c.architecture_hash());
        assert!(c.with_overrides(&["train.nope=1".into()]).is_err());
    }
}
