//! Small building blocks shared by the encoder and decoder.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{linear, GroupNorm, Linear, VarBuilder};

use crate::conv::Conv;
use crate::error::Result;

pub fn conv3x3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Conv> {
    Conv::new(cin, cout, 3, stride, 1, vb)
}

pub fn conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv> {
    Conv::new(cin, cout, 1, 1, 0, vb)
}

/// 3x3 convolution with edge-replicating padding, so constant maps stay constant.
#[derive(Debug, Clone)]
pub struct ReplicateConv3x3 {
    conv: Conv,
}

impl ReplicateConv3x3 {
    pub fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(cin, cout, 3, 1, 0, vb)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
        Ok(self.conv.forward(&padded)?)
    }
}

pub fn group_norm(channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    let groups = [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1);
    Ok(candle_nn::group_norm(groups, channels, 1e-5, vb)?)
}

/// Sinusoidal encoding of integer timesteps, `(B, dim)`.
pub fn timestep_encoding(timesteps: &[usize], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        let mut cos = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t * freq).sin());
            cos.push((t * freq).cos());
        }
        out.extend(cos);
    }
    Ok(Tensor::from_vec(out, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}

/// Maps the timestep encoding to a shared conditioning vector.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeMlp {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: linear(dim, hidden, vb.pp("fc1"))?,
            fc2: linear(hidden, hidden, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, timesteps: &[usize], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let enc = timestep_encoding(timesteps, self.dim, dtype, device)?;
        let h = self.fc1.forward(&enc)?.silu()?;
        Ok(self.fc2.forward(&h)?)
    }
}

/// Per-channel scale and shift predicted from the time vector.
#[derive(Debug, Clone)]
pub struct Modulation {
    proj: Linear,
    channels: usize,
}

impl Modulation {
    pub fn new(time_hidden: usize, channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: linear(time_hidden, 2 * channels, vb)?,
            channels,
        })
    }

    /// `x * (1 + scale) + shift` for `(B, C, H, W)` maps.
    pub fn apply_map(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let ss = self.proj.forward(&temb.silu()?)?;
        let b = ss.dim(0)?;
        let scale = ss.narrow(1, 0, self.channels)?.reshape((b, self.channels, 1, 1))?;
        let shift = ss
            .narrow(1, self.channels, self.channels)?
            .reshape((b, self.channels, 1, 1))?;
        Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
    }

    /// Same as [`Self::apply_map`] for `(B, N, C)` token sequences.
    pub fn apply_tokens(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let ss = self.proj.forward(&temb.silu()?)?;
        let b = ss.dim(0)?;
        let scale = ss.narrow(1, 0, self.channels)?.reshape((b, 1, self.channels))?;
        let shift = ss
            .narrow(1, self.channels, self.channels)?
            .reshape((b, 1, self.channels))?;
        Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?)
    }
}

/// Scaled dot-product attention over `(B, N, d)` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let scores = q.matmul(&k.t()?)?.affine(1.0 / (d as f64).sqrt(), 0.0)?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(weights.matmul(v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn timestep_encoding_is_deterministic_and_distinct() {
        let a = timestep_encoding(&[1, 1000], 8, DType::F64, &Device::Cpu).unwrap();
        let b = timestep_encoding(&[1, 1000], 8, DType::F64, &Device::Cpu).unwrap();
        let a = a.to_vec2::<f64>().unwrap();
        assert_eq!(a, b.to_vec2::<f64>().unwrap());
        assert_ne!(a[0], a[1]);
        assert!((a[0][0] - 1f64.sin()).abs() < 1e-12);
        assert!((a[0][4] - 1f64.cos()).abs() < 1e-12);
    }

    // The fused last-dim softmax kernel has no backward pass; queries and
    // keys must still receive gradients.
    #[test]
    fn attention_backpropagates_into_queries_and_keys() {
        let dev = Device::Cpu;
        let q = candle_core::Var::randn(0f64, 1.0, (1, 4, 3), &dev).unwrap();
        let k = candle_core::Var::randn(0f64, 1.0, (1, 4, 3), &dev).unwrap();
        let v = Tensor::randn(0f64, 1.0, (1, 4, 3), &dev).unwrap();
        let out = attention(q.as_tensor(), k.as_tensor(), &v).unwrap();
        let g = out.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(g.get(q.as_tensor()).is_some());
        assert!(g.get(k.as_tensor()).is_some());
    }
}
