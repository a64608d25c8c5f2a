//! Single-file checkpoints: model weights, optimizer moments and run metadata
//! in one safetensors file.
//!
//! Tensor names are `model.<param>`, `optim.m.<param>` and `optim.v.<param>`.
//! The header metadata carries the format tag, the full experiment config as
//! JSON, its hashes and the step and epoch counters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::LocalizationModel;
use crate::optim::{AdamW, OptimState};

pub const CHECKPOINT_FORMAT: &str = "maskdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: ExperimentConfig,
    /// Optimizer steps taken; 0 means the weights are the initialization.
    pub step: u64,
    pub epoch: u64,
    pub running_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: BTreeMap<String, Tensor>,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    /// Snapshot of the current weights (and moments when `optim` is given).
    pub fn capture(model: &LocalizationModel, optim: Option<&AdamW>, meta: CheckpointMeta) -> Self {
        let weights = model
            .store()
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().detach()))
            .collect();
        Self {
            meta,
            model: weights,
            optim: optim.map(|o| o.state().clone()),
        }
    }

    pub fn is_trained(&self) -> bool {
        self.meta.step > 0
    }

    /// Rebuilds the model described by the stored config and loads the weights.
    pub fn build_model(&self, dtype: DType, device: &Device) -> Result<LocalizationModel> {
        let cfg = &self.meta.config;
        let model = LocalizationModel::new(&cfg.model, cfg.schedule.steps, dtype, device)?;
        let expected = model.store().names();
        if expected.len() != self.model.len() {
            let extra: Vec<&String> = self.model.keys().filter(|k| !expected.contains(k)).collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {} (unexpected: {extra:?})",
                self.model.len(),
                expected.len()
            )));
        }
        model.store().load_from(&self.model)?;
        Ok(model)
    }

    /// Like [`build_model`](Self::build_model) but refuses initialization-only
    /// checkpoints and configs whose architecture differs from `cfg`.
    pub fn inference_model(&self, cfg: &ExperimentConfig, dtype: DType, device: &Device) -> Result<LocalizationModel> {
        if !self.is_trained() {
            return Err(Error::Checkpoint("checkpoint is untrained (step 0)".into()));
        }
        if cfg.architecture_hash() != self.meta.config.architecture_hash() {
            return Err(Error::Checkpoint(
                "checkpoint architecture does not match the requested config".into(),
            ));
        }
        self.build_model(dtype, device)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (n, t) in &self.model {
            tensors.insert(format!("model.{n}"), t.clone());
        }
        if let Some(o) = &self.optim {
            for (n, t) in &o.m {
                tensors.insert(format!("optim.m.{n}"), t.clone());
            }
            for (n, t) in &o.v {
                tensors.insert(format!("optim.v.{n}"), t.clone());
            }
        }
        let cfg = &self.meta.config;
        let mut info = HashMap::new();
        info.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        info.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        info.insert("config".to_string(), serde_json::to_string(cfg).expect("config serializes"));
        info.insert("config_hash".to_string(), cfg.hash());
        info.insert("architecture_hash".to_string(), cfg.architecture_hash());
        info.insert("step".to_string(), self.meta.step.to_string());
        info.insert("epoch".to_string(), self.meta.epoch.to_string());
        if let Some(l) = self.meta.running_loss {
            info.insert("running_loss".to_string(), format!("{l:e}"));
        }
        if let Some(o) = &self.optim {
            info.insert("optim_step".to_string(), o.step.to_string());
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("safetensors.tmp");
        safetensors::serialize_to_file(tensors.iter(), Some(info), &tmp)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let info = header.metadata().clone().ok_or_else(|| bad("no metadata".into()))?;
        let field = |k: &str| info.get(k).ok_or_else(|| bad(format!("metadata lacks `{k}`")));
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(bad(format!("not a {CHECKPOINT_FORMAT} file")));
        }
        let version: u32 = field("version")?.parse().map_err(|_| bad("bad version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let config: ExperimentConfig =
            serde_json::from_str(field("config")?).map_err(|e| bad(format!("config: {e}")))?;
        if &config.hash() != field("config_hash")? {
            return Err(bad("config hash mismatch".into()));
        }
        let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let step = num("step")?;
        let epoch = num("epoch")?;
        let running_loss = match info.get("running_loss") {
            Some(s) => Some(s.parse().map_err(|_| bad("bad running_loss".into()))?),
            None => None,
        };
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut model = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("model.") {
                model.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("optim.m.") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                v.insert(n.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor `{name}`")));
            }
        }
        let optim = match info.get("optim_step") {
            Some(s) => Some(OptimState {
                step: s.parse().map_err(|_| bad("bad optim_step".into()))?,
                m,
                v,
            }),
            None => None,
        };
        Ok(Self {
            meta: CheckpointMeta {
                config,
                step,
                epoch,
                running_loss,
            },
            model,
            optim,
        })
    }
}
