//! The denoising module: fuses the noisy mask embedding with the guidance
//! map(s) and predicts per-cell class logits of the clean mask, conditioned on
//! the timestep.
//!
//! Fusion always produces `2F` channels. Slot A holds the forged-image branch;
//! slot B holds the original-image branch in CIML and zeros in IML. Both
//! branches use the same fusion convolution, so both tasks share one parameter
//! set and one decoder.

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{linear, GroupNorm, Init, LayerNorm, Linear, VarBuilder};

use crate::codec::MaskLogits;
use crate::conditioner::Conditions;
use crate::config::{ModelConfig, SizeProfile};
use crate::conv::Conv;
use crate::error::{Error, Result};
use crate::layers::{attention, conv1x1, conv3x3, group_norm, Modulation, TimeMlp};

/// Everything one denoiser call consumes.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    /// Noisy embedding, `(B, D, h, w)`.
    pub noisy: &'a Tensor,
    /// One timestep per batch element, each in `1..=T`.
    pub timesteps: &'a [usize],
    pub conditions: &'a Conditions,
}

/// Residual conv block followed by global self-attention over the latent grid.
#[derive(Debug, Clone)]
struct ConvAttnBlock {
    norm1: GroupNorm,
    modulation: Modulation,
    conv_a: Conv,
    conv_b: Conv,
    norm2: GroupNorm,
    qkv: Conv,
    proj: Conv,
}

impl ConvAttnBlock {
    fn new(channels: usize, time_hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(channels, vb.pp("norm1"))?,
            modulation: Modulation::new(time_hidden, channels, vb.pp("time"))?,
            conv_a: conv3x3(channels, channels, 1, vb.pp("conv_a"))?,
            conv_b: conv3x3(channels, channels, 1, vb.pp("conv_b"))?,
            norm2: group_norm(channels, vb.pp("norm2"))?,
            qkv: conv1x1(channels, 3 * channels, vb.pp("qkv"))?,
            proj: conv1x1(channels, channels, vb.pp("proj"))?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.modulation.apply_map(&self.norm1.forward(x)?, temb)?;
        let h = self.conv_b.forward(&self.conv_a.forward(&h)?.silu()?)?;
        let x = (x + h)?;

        let (b, c, hh, ww) = x.dims4()?;
        let qkv = self
            .qkv
            .forward(&self.norm2.forward(&x)?)?
            .reshape((b, 3, c, hh * ww))?
            .transpose(2, 3)?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        let out = attention(&q, &k, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, hh, ww))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

/// Bilinear lookup of `value` rows (`(G, H*W, d)`) at fractional pixel
/// positions `(G, M)`; positions outside the grid read zeros.
pub fn bilinear_gather(value: &Tensor, xs: &Tensor, ys: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (g, _, d) = value.dims3()?;
    let m = xs.dim(1)?;
    let x0 = xs.detach().floor()?;
    let y0 = ys.detach().floor()?;
    let fx = (xs - &x0)?;
    let fy = (ys - &y0)?;
    let gx = fx.affine(-1.0, 1.0)?;
    let gy = fy.affine(-1.0, 1.0)?;
    let corners = [
        (0.0, 0.0, (&gx * &gy)?),
        (1.0, 0.0, (&fx * &gy)?),
        (0.0, 1.0, (&gx * &fy)?),
        (1.0, 1.0, (&fx * &fy)?),
    ];
    let mut acc: Option<Tensor> = None;
    for (dx, dy, weight) in corners {
        let cx = x0.affine(1.0, dx)?;
        let cy = y0.affine(1.0, dy)?;
        let inside = (cx.ge(0.0)?.to_dtype(xs.dtype())?
            * cx.le((width - 1) as f64)?.to_dtype(xs.dtype())?
            * cy.ge(0.0)?.to_dtype(xs.dtype())?
            * cy.le((height - 1) as f64)?.to_dtype(xs.dtype())?)?;
        let flat = (cy.clamp(0.0, (height - 1) as f64)?.affine(width as f64, 0.0)?
            + cx.clamp(0.0, (width - 1) as f64)?)?
            .to_dtype(DType::U32)?;
        let index = flat.unsqueeze(2)?.broadcast_as((g, m, d))?.contiguous()?;
        let picked = value.gather(&index, 1)?;
        let term = picked.broadcast_mul(&(weight * inside)?.unsqueeze(2)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("four corners"))
}

/// Single-scale deformable self-attention over a dense token grid: every
/// token attends to a few learned offsets around its own location.
#[derive(Debug, Clone)]
struct DeformableAttention {
    value: Linear,
    offsets: Linear,
    weights: Linear,
    output: Linear,
    pattern: Tensor,
    heads: usize,
    points: usize,
}

impl DeformableAttention {
    fn new(channels: usize, heads: usize, points: usize, vb: VarBuilder) -> Result<Self> {
        let n = heads * points;
        // Fixed sampling pattern: each head looks in its own direction, at
        // increasing radii per point. The learned offsets start at zero.
        let mut pattern = Vec::with_capacity(2 * n);
        for h in 0..heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let scale = dx.abs().max(dy.abs());
            for p in 0..points {
                pattern.push(dx / scale * (p + 1) as f64);
                pattern.push(dy / scale * (p + 1) as f64);
            }
        }
        let offset_w = vb.get_with_hints((2 * n, channels), "offsets.weight", Init::Const(0.0))?;
        let offset_b = vb.get_with_hints(2 * n, "offsets.bias", Init::Const(0.0))?;
        let pattern = Tensor::from_vec(pattern, (1, 1, heads, points, 2), offset_b.device())?
            .to_dtype(offset_b.dtype())?;
        Ok(Self {
            value: linear(channels, channels, vb.pp("value"))?,
            offsets: Linear::new(offset_w, Some(offset_b)),
            weights: Linear::new(
                vb.get_with_hints((n, channels), "weights.weight", Init::Const(0.0))?,
                Some(vb.get_with_hints(n, "weights.bias", Init::Const(0.0))?),
            ),
            output: linear(channels, channels, vb.pp("output"))?,
            pattern,
            heads,
            points,
        })
    }

    /// `x`: `(B, N, C)` tokens laid out on an `h x w` grid.
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let (heads, points) = (self.heads, self.points);
        let hd = c / heads;
        let value = self
            .value
            .forward(x)?
            .reshape((b, n, heads, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * heads, n, hd))?;

        let mut grid = Vec::with_capacity(2 * n);
        for i in 0..n {
            grid.push((i % w) as f64);
            grid.push((i / w) as f64);
        }
        let reference = Tensor::from_vec(grid, (1, n, 1, 1, 2), x.device())?.to_dtype(x.dtype())?;
        let loc = self
            .offsets
            .forward(x)?
            .reshape((b, n, heads, points, 2))?
            .broadcast_add(&self.pattern)?
            .broadcast_add(&reference)?
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((b * heads, n * points, 2))?;
        let xs = loc.narrow(2, 0, 1)?.squeeze(2)?.contiguous()?;
        let ys = loc.narrow(2, 1, 1)?.squeeze(2)?.contiguous()?;
        let sampled = bilinear_gather(&value, &xs, &ys, h, w)?.reshape((b * heads, n, points, hd))?;

        let attn = candle_nn::ops::softmax(
            &self.weights.forward(x)?.reshape((b, n, heads, points))?,
            D::Minus1,
        )?
        .permute((0, 2, 1, 3))?
        .contiguous()?
        .reshape((b * heads, n, points, 1))?;
        let mixed = sampled
            .broadcast_mul(&attn)?
            .sum(2)?
            .reshape((b, heads, n, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        Ok(self.output.forward(&mixed)?)
    }
}

#[derive(Debug, Clone)]
struct DeformableBlock {
    norm1: LayerNorm,
    modulation: Modulation,
    attn: DeformableAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl DeformableBlock {
    fn new(channels: usize, heads: usize, points: usize, time_hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: candle_nn::layer_norm(channels, 1e-5, vb.pp("norm1"))?,
            modulation: Modulation::new(time_hidden, channels, vb.pp("time"))?,
            attn: DeformableAttention::new(channels, heads, points, vb.pp("attn"))?,
            norm2: candle_nn::layer_norm(channels, 1e-5, vb.pp("norm2"))?,
            fc1: linear(channels, 4 * channels, vb.pp("ffn.fc1"))?,
            fc2: linear(4 * channels, channels, vb.pp("ffn.fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.modulation.apply_tokens(&self.norm1.forward(x)?, temb)?;
        let x = (x + self.attn.forward(&y, h, w)?)?;
        let y = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.silu()?)?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
enum Decoder {
    Tiny(Vec<ConvAttnBlock>),
    Full(Vec<DeformableBlock>),
}

impl Decoder {
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        match self {
            Decoder::Tiny(blocks) => {
                let mut h = x.clone();
                for b in blocks {
                    h = b.forward(&h, temb)?;
                }
                Ok(h)
            }
            Decoder::Full(blocks) => {
                let (b, c, hh, ww) = x.dims4()?;
                let mut tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
                for block in blocks {
                    tokens = block.forward(&tokens, temb, hh, ww)?;
                }
                Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, hh, ww))?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    fusion: Conv,
    time: TimeMlp,
    decoder: Decoder,
    head_norm: GroupNorm,
    head: Conv,
    embed_dim: usize,
    cond_channels: usize,
    fusion_channels: usize,
    total_steps: usize,
}

impl Denoiser {
    pub fn new(cfg: &ModelConfig, total_steps: usize, vb: VarBuilder) -> Result<Self> {
        let f = cfg.fusion_channels();
        let width = 2 * f;
        let time_hidden = 2 * cfg.time_dim;
        let decoder = match cfg.profile {
            SizeProfile::Tiny => Decoder::Tiny(
                (0..cfg.decoder_layers())
                    .map(|i| ConvAttnBlock::new(width, time_hidden, vb.pp(format!("decoder.layer{i}"))))
                    .collect::<Result<_>>()?,
            ),
            SizeProfile::Full => Decoder::Full(
                (0..cfg.decoder_layers())
                    .map(|i| {
                        DeformableBlock::new(
                            width,
                            cfg.decoder_heads(),
                            cfg.decoder_points(),
                            time_hidden,
                            vb.pp(format!("decoder.layer{i}")),
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            fusion: conv3x3(cfg.embed_dim + cfg.fpn_channels(), f, 1, vb.pp("fusion"))?,
            time: TimeMlp::new(cfg.time_dim, time_hidden, vb.pp("time_mlp"))?,
            decoder,
            head_norm: group_norm(width, vb.pp("head_norm"))?,
            head: conv1x1(width, 2, vb.pp("head"))?,
            embed_dim: cfg.embed_dim,
            cond_channels: cfg.fpn_channels(),
            fusion_channels: f,
            total_steps,
        })
    }

    /// Output width of [`Self::fuse_inputs`], identical for both tasks.
    pub fn fused_channels(&self) -> usize {
        2 * self.fusion_channels
    }

    fn fuse_branch(&self, noisy: &Tensor, features: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[noisy, features], 1)?;
        Ok(self.fusion.forward(&x)?.silu()?)
    }

    /// Channel-concatenates the noisy state with each guidance map, fuses each
    /// pair with the shared convolution and stacks the slots: `(B, 2F, h, w)`.
    pub fn fuse_inputs(&self, noisy: &Tensor, conditions: &Conditions) -> Result<Tensor> {
        let (b, d, h, w) = noisy.dims4()?;
        if d != self.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![b, self.embed_dim, h, w],
                got: noisy.dims().to_vec(),
            });
        }
        let check = |c: &Tensor| -> Result<()> {
            let (cb, cc, ch, cw) = c.dims4()?;
            if (cb, ch, cw) != (b, h, w) || cc != self.cond_channels {
                return Err(Error::GridMisaligned(format!(
                    "noisy state is {:?} but guidance is {:?}",
                    noisy.dims(),
                    c.dims()
                )));
            }
            Ok(())
        };
        let forged = &conditions.forged().features;
        check(forged)?;
        let slot_a = self.fuse_branch(noisy, forged)?;
        let slot_b = match conditions.original() {
            None => slot_a.zeros_like()?,
            Some(orig) => {
                check(&orig.features)?;
                self.fuse_branch(noisy, &orig.features)?
            }
        };
        Ok(Tensor::cat(&[slot_a, slot_b], 1)?)
    }

    pub fn denoise(&self, input: &DenoiserInput) -> Result<MaskLogits> {
        let b = input.noisy.dim(0)?;
        if input.timesteps.len() != b {
            return Err(Error::ShapeMismatch {
                expected: vec![b],
                got: vec![input.timesteps.len()],
            });
        }
        if let Some(&t) = input
            .timesteps
            .iter()
            .find(|&&t| t == 0 || t > self.total_steps)
        {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 1,
                hi: self.total_steps,
            });
        }
        let fused = self.fuse_inputs(input.noisy, input.conditions)?;
        let temb = self
            .time
            .forward(input.timesteps, fused.dtype(), fused.device())?;
        let h = self.decoder.forward(&fused, &temb)?;
        let h = self.head_norm.forward(&h)?.silu()?;
        let logits = self.head.forward(&h)?;
        debug_assert_eq!(logits.dim(1)?, 2);
        Ok(MaskLogits(logits))
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }
}
