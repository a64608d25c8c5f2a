//! Differentiable bilinear resizing expressed as two matrix products.
//!
//! Uses the half-pixel convention (`align_corners = false`) with edge clamping.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Row-major `out x inp` interpolation weights along one axis.
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut w = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        w[i * inp + i0] += 1.0 - frac;
        w[i * inp + i1] += frac;
    }
    w
}

fn weight_tensor(out: usize, inp: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(bilinear_weights(out, inp), (out, inp), device)?.to_dtype(dtype)?)
}

/// Resizes the last two dimensions of `x` (rank 3 or 4) to `height x width`.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let rank = dims.len();
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    if h == height && w == width {
        return Ok(x.clone());
    }
    let lead: usize = dims[..rank - 2].iter().product();
    // two plain 2-D products; batched matmul against a broadcast operand is
    // not reliable in the backend
    let rows_t = weight_tensor(height, h, x.dtype(), x.device())?.t()?.contiguous()?;
    let cols_t = weight_tensor(width, w, x.dtype(), x.device())?.t()?.contiguous()?;
    let y = x.reshape((lead * h, w))?.matmul(&cols_t)?; // (lead*h, W)
    let y = y
        .reshape((lead, h, width))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((lead * width, h))?
        .matmul(&rows_t)?; // (lead*W, H)
    let y = y.reshape((lead, width, height))?.transpose(1, 2)?.contiguous()?;
    let mut out_dims = dims[..rank - 2].to_vec();
    out_dims.extend([height, width]);
    Ok(y.reshape(out_dims)?)
}

/// Plain-slice counterpart of [`resize_bilinear`] for a single `h x w` plane.
pub fn resize_plane(plane: &[f32], h: usize, w: usize, height: usize, width: usize) -> Vec<f32> {
    let rows = bilinear_weights(height, h);
    let cols = bilinear_weights(width, w);
    let mut tmp = vec![0.0f64; height * w];
    for i in 0..height {
        for k in 0..h {
            let r = rows[i * h + k];
            if r == 0.0 {
                continue;
            }
            for j in 0..w {
                tmp[i * w + j] += r * plane[k * w + j] as f64;
            }
        }
    }
    let mut out = vec![0.0f32; height * width];
    for i in 0..height {
        for j in 0..width {
            let mut acc = 0.0;
            for k in 0..w {
                acc += tmp[i * w + k] * cols[j * w + k];
            }
            out[i * width + j] = acc as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for (o, i) in [(64, 16), (16, 16), (7, 3), (3, 7)] {
            let w = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = w[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_is_preserved_and_matches_plane() {
        let x = Tensor::full(0.25f32, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 16, 16).unwrap();
        assert_eq!(y.dims(), &[1, 2, 16, 16]);
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 0.25).abs() < 1e-6);
        }
        let plane: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let t = Tensor::from_vec(plane.clone(), (3, 4), &Device::Cpu).unwrap();
        let a = resize_bilinear(&t.unsqueeze(0).unwrap(), 9, 8)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = resize_plane(&plane, 3, 4, 9, 8);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
