//! Conversion between discrete masks and the continuous space the diffusion
//! process runs in.
//!
//! A mask is downsampled to the latent grid, each cell is replaced by the
//! learnable row of its class, and the table is rescaled per channel so the
//! two class rows span `[-1, 1]`. Decoding goes the other way: per-cell class
//! logits are either upsampled bilinearly, normalized and thresholded into a
//! full-resolution mask, or turned into probabilities and mixed back into the
//! embedding space.

use candle_core::{DType, Tensor, D};
use candle_nn::{Init, VarBuilder};
use image::GrayImage;

use crate::error::{Error, Result};
use crate::resample::resize_bilinear;

/// `H x W` grid of labels, `0` authentic and `1` manipulated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidRange("mask dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                got: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidRange("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len() as f64
    }

    /// Any pixel at or above 128 counts as manipulated.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.pixels().map(|p| (p.0[0] >= 128) as u8).collect(),
        }
    }

    /// `{0, 255}` single-channel image.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.get(y as usize, x as usize) * 255])
        })
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx) == 1
        })
    }

    /// Majority vote over `stride x stride` cells; exact ties go to class 1.
    pub fn downsample_majority(&self, stride: usize) -> Result<Self> {
        for dim in [self.height, self.width] {
            if stride == 0 || dim % stride != 0 {
                return Err(Error::Indivisible { dim, stride });
            }
        }
        let (h, w) = (self.height / stride, self.width / stride);
        Ok(Self::from_fn(h, w, |cy, cx| {
            let mut ones = 0;
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    ones += self.get(y, x) as usize;
                }
            }
            2 * ones >= stride * stride
        }))
    }

    /// Float tensor of shape `(H, W)`.
    pub fn to_tensor(&self, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| b as f32).collect();
        Ok(Tensor::from_vec(v, (self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Stacks masks of equal size into a `(B, H, W)` float tensor.
pub fn stack_masks(masks: &[BinaryMask], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let ts = masks
        .iter()
        .map(|m| m.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Per-channel bounds of the raw table used to rescale it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormScale {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

/// Learnable `2 x D` class embedding, one row per class.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    rows: Tensor,
}

impl EmbeddingTable {
    pub fn new(vb: VarBuilder, dim: usize) -> Result<Self> {
        let rows = vb.get_with_hints(
            (2, dim),
            "class_embedding",
            Init::Randn {
                mean: 0.0,
                stdev: 1.0,
            },
        )?;
        Self::from_rows(rows)
    }

    pub fn from_rows(rows: Tensor) -> Result<Self> {
        let dims = rows.dims();
        if dims.len() != 2 || dims[0] != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![2, 0],
                got: dims.to_vec(),
            });
        }
        Ok(Self { rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.dims()[1]
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Affine per-channel rescale of the table so that, in every channel, the
    /// smaller entry maps to -1 and the larger to +1. Channels whose two
    /// entries coincide map to 0.
    pub fn normalized(&self) -> Result<Tensor> {
        normalize_rows(&self.rows)
    }

    pub fn scale(&self) -> Result<NormScale> {
        let r0 = self.rows.get(0)?;
        let r1 = self.rows.get(1)?;
        Ok(NormScale {
            lo: r0.minimum(&r1)?.to_dtype(DType::F32)?.to_vec1()?,
            hi: r0.maximum(&r1)?.to_dtype(DType::F32)?.to_vec1()?,
        })
    }
}

fn normalize_rows(rows: &Tensor) -> Result<Tensor> {
    let r0 = rows.get(0)?;
    let r1 = rows.get(1)?;
    let lo = r0.minimum(&r1)?;
    let hi = r0.maximum(&r1)?;
    let span = (&hi - &lo)?;
    let degenerate = span.le(0.0)?;
    let safe_span = degenerate.where_cond(&span.ones_like()?, &span)?;
    let centre = (&lo + &hi)?;
    let num = rows.affine(2.0, 0.0)?.broadcast_sub(&centre)?;
    Ok(num.broadcast_div(&safe_span)?)
}

/// Clean mask embedding of shape `(B, D, h, w)`.
#[derive(Debug, Clone)]
pub struct MaskEmbedding {
    pub values: Tensor,
    pub scale: NormScale,
}

/// Per-cell class scores of shape `(B, 2, h, w)`.
#[derive(Debug, Clone)]
pub struct MaskLogits(pub Tensor);

impl MaskLogits {
    /// `(B, h, w)` probability of the manipulated class.
    pub fn manipulated_prob(&self) -> Result<Tensor> {
        let p = candle_nn::ops::softmax(&self.0, 1)?;
        Ok(p.narrow(1, 1, 1)?.squeeze(1)?)
    }

    /// Manipulated-class probability at `(H, W)`: logits are upsampled
    /// bilinearly, then normalized. Training and decoding both use this, so
    /// pixels between two confident cells are placed the way the loss taught.
    pub fn upsampled_prob(&self, height: usize, width: usize) -> Result<Tensor> {
        MaskLogits(resize_bilinear(&self.0, height, width)?).manipulated_prob()
    }
}

fn labels_to_embedding(
    labels: &[Vec<u8>],
    h: usize,
    w: usize,
    table: &EmbeddingTable,
) -> Result<Tensor> {
    let b = labels.len();
    let mut onehot = Vec::with_capacity(b * h * w * 2);
    for grid in labels {
        for &l in grid {
            onehot.push((l == 0) as u8 as f32);
            onehot.push((l == 1) as u8 as f32);
        }
    }
    let rows = table.normalized()?;
    let onehot = Tensor::from_vec(onehot, (b * h * w, 2), rows.device())?.to_dtype(rows.dtype())?;
    let d = table.dim();
    Ok(onehot
        .matmul(&rows)?
        .reshape((b, h, w, d))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Embeds a batch of equally sized masks at `1 / latent_stride` resolution.
pub fn embed_masks(masks: &[BinaryMask], table: &EmbeddingTable, latent_stride: usize) -> Result<MaskEmbedding> {
    let first = masks.first().ok_or_else(|| Error::Empty("no masks to embed".into()))?;
    let mut labels = Vec::with_capacity(masks.len());
    for m in masks {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::ShapeMismatch {
                expected: vec![first.height, first.width],
                got: vec![m.height, m.width],
            });
        }
        labels.push(m.downsample_majority(latent_stride)?.data);
    }
    let (h, w) = (first.height / latent_stride, first.width / latent_stride);
    Ok(MaskEmbedding {
        values: labels_to_embedding(&labels, h, w, table)?,
        scale: table.scale()?,
    })
}

pub fn embed_mask(mask: &BinaryMask, table: &EmbeddingTable, latent_stride: usize) -> Result<MaskEmbedding> {
    embed_masks(std::slice::from_ref(mask), table, latent_stride)
}

/// Thresholds [`MaskLogits::upsampled_prob`]: a pixel is manipulated iff `p >= threshold`.
pub fn logits_to_masks(
    logits: &MaskLogits,
    threshold: f64,
    height: usize,
    width: usize,
) -> Result<Vec<BinaryMask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidRange(format!("threshold {threshold} outside (0, 1)")));
    }
    let probs = logits.upsampled_prob(height, width)?.to_dtype(DType::F32)?;
    let b = probs.dim(0)?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let p = probs.get(i)?.flatten_all()?.to_vec1::<f32>()?;
        out.push(threshold_probs(&p, height, width, threshold));
    }
    Ok(out)
}

pub fn threshold_probs(probs: &[f32], height: usize, width: usize, threshold: f64) -> BinaryMask {
    BinaryMask {
        height,
        width,
        data: probs.iter().map(|&p| (p as f64 >= threshold) as u8).collect(),
    }
}

/// Probability-weighted mix of the normalized class rows, `(B, D, h, w)`.
pub fn logits_to_embedding(logits: &MaskLogits, table: &EmbeddingTable) -> Result<MaskEmbedding> {
    let (b, c, h, w) = logits.0.dims4()?;
    if c != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![b, 2, h, w],
            got: logits.0.dims().to_vec(),
        });
    }
    let rows = table.normalized()?;
    let probs = candle_nn::ops::softmax(&logits.0, 1)?
        .permute((0, 2, 3, 1))?
        .reshape((b * h * w, 2))?
        .to_dtype(rows.dtype())?;
    let values = probs
        .matmul(&rows)?
        .reshape((b, h, w, table.dim()))?
        .permute((0, 3, 1, 2))?
        .contiguous()?;
    Ok(MaskEmbedding {
        values,
        scale: table.scale()?,
    })
}

/// Assigns every cell to the class whose normalized row is closest.
pub fn nearest_row_decode(embedding: &Tensor, table: &EmbeddingTable) -> Result<Vec<BinaryMask>> {
    let (b, d, h, w) = embedding.dims4()?;
    let rows = table.normalized()?;
    let cells = embedding.permute((0, 2, 3, 1))?.reshape((b * h * w, 1, d))?;
    let dist = cells.broadcast_sub(&rows.unsqueeze(0)?)?.sqr()?.sum(D::Minus1)?;
    let labels = dist.argmin(1)?.to_vec1::<u32>()?;
    Ok(labels
        .chunks(h * w)
        .map(|c| BinaryMask {
            height: h,
            width: w,
            data: c.iter().map(|&l| l as u8).collect(),
        })
        .collect())
}
