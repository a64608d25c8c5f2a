//! The assembled network: conditioner, class-embedding table and denoiser
//! over one parameter store.

use candle_core::{DType, Device, Tensor};

use crate::codec::{EmbeddingTable, MaskLogits};
use crate::conditioner::{stack_images, Conditioner, Conditions, InputImage, TaskMode};
use crate::config::ModelConfig;
use crate::denoiser::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub struct LocalizationModel {
    store: ParamStore,
    conditioner: Conditioner,
    table: EmbeddingTable,
    denoiser: Denoiser,
    config: ModelConfig,
    dtype: DType,
    device: Device,
}

impl LocalizationModel {
    /// Builds a freshly initialized model; `total_steps` is the diffusion length `T`.
    pub fn new(config: &ModelConfig, total_steps: usize, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.init_seed);
        let vb = store.var_builder(dtype, device);
        let conditioner = Conditioner::new(config, vb.pp("ccm"))?;
        let table = EmbeddingTable::new(vb.pp("nam"), config.embed_dim)?;
        let denoiser = Denoiser::new(config, total_steps, vb.pp("dm"))?;
        Ok(Self {
            store,
            conditioner,
            table,
            denoiser,
            config: config.clone(),
            dtype,
            device: device.clone(),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn total_steps(&self) -> usize {
        self.denoiser.total_steps()
    }

    /// `(name, element count)` for every trainable parameter, sorted by name.
    pub fn named_parameters(&self) -> Vec<(String, usize)> {
        self.store
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.elem_count()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    pub fn images_to_tensor(&self, images: &[&InputImage]) -> Result<Tensor> {
        stack_images(images, self.dtype, &self.device)
    }

    /// Guidance for a batch; `originals` must be given exactly in CIML.
    pub fn conditions(
        &self,
        mode: TaskMode,
        forged: &[&InputImage],
        originals: Option<&[&InputImage]>,
    ) -> Result<Conditions> {
        let f = self.images_to_tensor(forged)?;
        let o = match originals {
            Some(o) => {
                if o.len() != forged.len() {
                    return Err(Error::ModeMismatch(format!(
                        "{} forged images but {} originals",
                        forged.len(),
                        o.len()
                    )));
                }
                Some(self.images_to_tensor(o)?)
            }
            None => None,
        };
        self.conditioner.build_condition(mode, &f, o.as_ref())
    }

    pub fn denoise(&self, noisy: &Tensor, timesteps: &[usize], conditions: &Conditions) -> Result<MaskLogits> {
        self.denoiser.denoise(&DenoiserInput {
            noisy,
            timesteps,
            conditions,
        })
    }

    /// Latent grid side length.
    pub fn latent_size(&self) -> usize {
        self.config.latent_size()
    }
}
