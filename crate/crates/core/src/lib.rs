//! Conditional diffusion for pixel-level image manipulation localization.
//!
//! A single model localizes manipulated regions either from the forged image
//! alone (IML) or from the forged image together with its pristine original
//! (CIML). Ground-truth masks are class-embedded into a continuous space,
//! noised by a standard forward diffusion process, and a denoiser conditioned
//! on image features predicts the clean mask directly. Inference runs a
//! deterministic DDIM trajectory from Gaussian noise; the number of steps is a
//! runtime knob, and label flips along the trajectory give an uncertainty map.

pub mod checkpoint;
pub mod codec;
pub mod conditioner;
pub mod config;
pub mod conv;
pub mod datasets;
pub mod denoiser;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod resample;
pub mod sampler;
pub mod schedule;
pub mod seed;
pub mod swin;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod diffusion {}
    #[doc = include_str!("../../../book/src/masks.md")]
    pub mod masks {}
    #[doc = include_str!("../../../book/src/conditioning.md")]
    pub mod conditioning {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub mod sampling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    pub mod datasets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
