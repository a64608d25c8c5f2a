//! 2-D convolution as `im2col` followed by one matrix product.
//!
//! The backend's own convolution computes input gradients with a direct
//! transposed convolution, which dominates CPU training time at the sizes used
//! here. Routing through `im2col` leaves the heavy lifting to matrix products
//! in both directions; the only custom kernel is the patch gather and its
//! scatter-add adjoint.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor, WithDType};
use candle_nn::{Init, VarBuilder};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.n * oh * ow
    }

    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Calls `f(col_index, image_index)` for every in-bounds patch entry.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let kk = self.k * self.k;
        let ncols = self.cols();
        for n in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((n * oh + oy) * ow + ox) * ncols;
                    for c in 0..self.c {
                        let plane = (n * self.c + c) * self.h * self.w;
                        for ky in 0..self.k {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x < 0 || x >= self.w as isize {
                                    continue;
                                }
                                f(
                                    row + c * kk + ky * self.k + kx,
                                    plane + y as usize * self.w + x as usize,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv kernels need contiguous inputs"),
    }
}

/// `(N, C, H, W)` to `(N * OH * OW, C * k * k)` patch rows.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatter-adds patch rows back onto the image.
struct Col2Im(Geometry);

fn gather<T: WithDType>(g: &Geometry, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.cols()];
    g.for_each(|col, img| out[col] = src[img]);
    out
}

fn scatter<T: WithDType>(g: &Geometry, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    g.for_each(|col, img| out[img] += src[col]);
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gather(g, contiguous_slice(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(g, contiguous_slice(v, l)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.n, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(g, contiguous_slice(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(g, contiguous_slice(v, l)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// Square-kernel convolution with zero padding. Parameters are named
/// `weight` `(O, C, k, k)` and `bias` `(O)`, as in the backend's own layer.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((cout, cin, k, k), "weight", candle_nn::init::DEFAULT_KAIMING_NORMAL)?;
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let bias = vb.get_with_hints(cout, "bias", Init::Uniform { lo: -bound, up: bound })?;
        Ok(Self {
            weight,
            bias,
            k,
            stride,
            pad,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let o = self.out_channels();
        let g = Geometry {
            n,
            c,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        let (oh, ow) = g.out_hw();
        let cols = if self.k == 1 && self.stride == 1 && self.pad == 0 {
            x.permute((0, 2, 3, 1))?.contiguous()?.reshape((n * h * w, c))?
        } else {
            x.contiguous()?.apply_op1(Im2Col(g))?
        };
        let kernel = self.weight.reshape((o, g.cols()))?.t()?;
        cols.matmul(&kernel)?
            .broadcast_add(&self.bias)?
            .reshape((n, oh, ow, o))?
            .permute((0, 3, 1, 2))?
            .contiguous()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn matches_backend_convolution_and_gradients() {
        let dev = Device::Cpu;
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)] {
            let vb = VarBuilder::zeros(DType::F64, &dev);
            let mut conv = Conv::new(3, 4, k, stride, pad, vb).unwrap();
            conv.weight = Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap();
            conv.bias = Tensor::randn(0f64, 1.0, 4, &dev).unwrap();
            let x = Var::randn(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
            let ours = conv.forward(x.as_tensor()).unwrap();
            let cfg = candle_nn::Conv2dConfig {
                padding: pad,
                stride,
                ..Default::default()
            };
            let reference = candle_nn::Conv2d::new(conv.weight.clone(), Some(conv.bias.clone()), cfg)
                .forward(x.as_tensor())
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);

            let ga = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gb = reference.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let d = (ga.get(&x).unwrap() - gb.get(&x).unwrap()).unwrap().abs().unwrap();
            assert!(d.max_all().unwrap().to_scalar::<f64>().unwrap() < 1e-9);
        }
    }
}
