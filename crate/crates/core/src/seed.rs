//! Derived random streams. Every random draw in training and sampling comes
//! from a ChaCha stream keyed by a base seed plus a few counters, so any step
//! can be replayed in isolation.

use candle_core::{DType, Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Seed for the stream identified by `base` and `path`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Standard-normal tensor drawn on the host, so values do not depend on the device.
pub fn randn(shape: impl Into<Shape>, rng: &mut impl Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let v: Vec<f32> = (0..shape.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Stable 64-bit key for a string id.
pub fn key_of(s: &str) -> u64 {
    derive_seed(0, &[]) ^ {
        let d = Sha256::digest(s.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }
}
