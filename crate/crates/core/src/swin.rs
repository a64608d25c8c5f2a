//! Hierarchical shifted-window transformer encoder used by the `full` profile.
//!
//! Patch embedding at stride 4, then four stages of window-attention blocks
//! separated by 2x2 patch merging, giving maps at strides 4, 8, 16 and 32 with
//! widths `C, 2C, 4C, 8C`. Odd blocks shift their windows by half a window and
//! mask attention across the wrapped border.

use candle_core::{Module, Tensor, D};
use candle_nn::{layer_norm, linear, linear_no_bias, Init, LayerNorm, Linear, VarBuilder};

use crate::conv::Conv;
use crate::error::Result;

fn ln(dim: usize, vb: VarBuilder) -> Result<LayerNorm> {
    Ok(layer_norm(dim, 1e-5, vb)?)
}

#[derive(Debug, Clone)]
struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    fn new(dim: usize, heads: usize, window: usize, vb: VarBuilder) -> Result<Self> {
        let span = 2 * window - 1;
        Ok(Self {
            qkv: linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: linear(dim, dim, vb.pp("proj"))?,
            bias_table: vb.get_with_hints(
                (span * span, heads),
                "relative_position_bias",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.02,
                },
            )?,
            heads,
            window,
        })
    }

    /// `(heads, N, N)` relative position bias for the current window size.
    fn relative_bias(&self, ws: usize) -> Result<Tensor> {
        let n = ws * ws;
        let span = 2 * self.window - 1;
        let mut idx = Vec::with_capacity(n * n);
        for a in 0..n {
            let (ya, xa) = (a / ws, a % ws);
            for b in 0..n {
                let (yb, xb) = (b / ws, b % ws);
                let dy = ya + self.window - 1 - yb;
                let dx = xa + self.window - 1 - xb;
                idx.push((dy * span + dx) as u32);
            }
        }
        let idx = Tensor::from_vec(idx, n * n, self.bias_table.device())?;
        Ok(self
            .bias_table
            .index_select(&idx, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    /// `windows`: `(B * nW, N, C)`; `mask`: optional `(nW, N, N)` additive mask.
    fn forward(&self, windows: &Tensor, ws: usize, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = windows.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(windows)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = q
            .matmul(&k.t()?.contiguous()?)?
            .affine(1.0 / (hd as f64).sqrt(), 0.0)?
            .broadcast_add(&self.relative_bias(ws)?.unsqueeze(0)?)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            scores = scores
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                .reshape((bw, self.heads, n, n))?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bw, n, c))?;
        Ok(self.proj.forward(&out)?)
    }
}

#[derive(Debug, Clone)]
struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shifted: bool,
}

fn partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

fn unpartition(windows: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = windows.dim(D::Minus1)?;
    Ok(windows
        .reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Region-id mask that stops shifted windows from attending across the wrap.
fn shift_mask(h: usize, w: usize, ws: usize, shift: usize, device: &candle_core::Device) -> Result<Tensor> {
    let region = |i: usize, len: usize| -> usize {
        if i < len - ws {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let n = ws * ws;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..n)
                .map(|p| {
                    let (y, x) = (wy * ws + p / ws, wx * ws + p % ws);
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for a in &ids {
                for b in &ids {
                    mask.push(if a == b { 0f32 } else { -100.0 });
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nh * nw, n, n), device)?)
}

impl SwinBlock {
    fn new(dim: usize, heads: usize, window: usize, shifted: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: ln(dim, vb.pp("norm1"))?,
            attn: WindowAttention::new(dim, heads, window, vb.pp("attn"))?,
            norm2: ln(dim, vb.pp("norm2"))?,
            fc1: linear(dim, 4 * dim, vb.pp("mlp.fc1"))?,
            fc2: linear(4 * dim, dim, vb.pp("mlp.fc2"))?,
            window,
            shifted,
        })
    }

    /// `x`: `(B, H, W, C)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let ws = self.window.min(h).min(w);
        let ph = h.div_ceil(ws) * ws;
        let pw = w.div_ceil(ws) * ws;
        let shift = if self.shifted && ws < h.min(w) { ws / 2 } else { 0 };

        let mut y = self.norm1.forward(x)?;
        if ph != h || pw != w {
            y = y.pad_with_zeros(1, 0, ph - h)?.pad_with_zeros(2, 0, pw - w)?;
        }
        if shift > 0 {
            y = y.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let mask = if shift > 0 {
            Some(shift_mask(ph, pw, ws, shift, x.device())?.to_dtype(x.dtype())?)
        } else {
            None
        };
        let attended = self.attn.forward(&partition(&y, ws)?, ws, mask.as_ref())?;
        let mut y = unpartition(&attended, ws, b, ph, pw)?;
        if shift > 0 {
            y = y.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        if ph != h || pw != w {
            y = y.narrow(1, 0, h)?.narrow(2, 0, w)?;
        }
        let x = (x + y)?;
        let m = self
            .fc2
            .forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        let out = (x + m)?;
        debug_assert_eq!(out.dims(), &[b, h, w, c]);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: ln(4 * dim, vb.pp("norm"))?,
            reduction: linear_no_bias(4 * dim, 2 * dim, vb.pp("reduction"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let grid = x.reshape((b, h / 2, 2, w / 2, 2, c))?;
        let parts = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .map(|&(dy, dx)| Ok(grid.narrow(2, dy, 1)?.narrow(4, dx, 1)?.squeeze(4)?.squeeze(2)?))
            .collect::<Result<Vec<_>>>()?;
        let merged = Tensor::cat(&parts, D::Minus1)?;
        Ok(self.reduction.forward(&self.norm.forward(&merged)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SwinBackbone {
    patch_embed: Conv,
    embed_norm: LayerNorm,
    merges: Vec<PatchMerging>,
    stages: Vec<Vec<SwinBlock>>,
    out_norms: Vec<LayerNorm>,
    base: usize,
}

impl SwinBackbone {
    pub fn new(base: usize, depths: &[usize], heads: &[usize], window: usize, vb: VarBuilder) -> Result<Self> {
        let patch_embed = Conv::new(3, base, 4, 4, 0, vb.pp("patch_embed.proj"))?;
        let embed_norm = ln(base, vb.pp("patch_embed.norm"))?;
        let mut merges = Vec::new();
        let mut stages = Vec::new();
        let mut out_norms = Vec::new();
        for (i, (&depth, &h)) in depths.iter().zip(heads).enumerate() {
            let dim = base << i;
            if i > 0 {
                merges.push(PatchMerging::new(dim / 2, vb.pp(format!("stage{i}.downsample")))?);
            }
            let blocks = (0..depth)
                .map(|j| SwinBlock::new(dim, h, window, j % 2 == 1, vb.pp(format!("stage{i}.block{j}"))))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            out_norms.push(ln(dim, vb.pp(format!("stage{i}.out_norm")))?);
        }
        Ok(Self {
            patch_embed,
            embed_norm,
            merges,
            stages,
            out_norms,
            base,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..4).map(|i| self.base << i).collect()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.patch_embed.forward(x)?.permute((0, 2, 3, 1))?;
        h = self.embed_norm.forward(&h)?;
        let mut levels = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                h = self.merges[i - 1].forward(&h)?;
            }
            for block in blocks {
                h = block.forward(&h)?;
            }
            let out = self.out_norms[i].forward(&h)?.permute((0, 3, 1, 2))?.contiguous()?;
            levels.push(out);
        }
        Ok(levels)
    }
}
