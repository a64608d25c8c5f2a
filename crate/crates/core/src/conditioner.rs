//! Image guidance: an encoder producing a four-level pyramid (strides 4, 8,
//! 16, 32) and a top-down feature pyramid network fusing it into a single
//! stride-4 guidance map. Forged and original images go through the very same
//! modules; the original adds no parameters of its own.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SizeProfile};
use crate::conv::Conv;
use crate::error::{Error, Result};
use crate::layers::{conv1x1, conv3x3, ReplicateConv3x3};
use crate::resample::resize_plane;
use crate::swin::SwinBackbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Forged image only.
    Iml,
    /// Forged image plus its pristine original.
    Ciml,
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::Iml => "iml",
            TaskMode::Ciml => "ciml",
        })
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iml" => Ok(TaskMode::Iml),
            "ciml" => Ok(TaskMode::Ciml),
            other => Err(Error::ModeMismatch(format!("unknown task mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Forged,
    Original,
}

/// RGB pixels in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    pub role: ImageRole,
}

impl InputImage {
    pub fn from_rgb(img: &RgbImage, role: ImageRole) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Self {
            pixels,
            height: h,
            width: w,
            role,
        }
    }

    pub fn new(pixels: Vec<f32>, height: usize, width: usize, role: ImageRole) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![3, height, width],
                got: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidRange("image holds non-finite values".into()));
        }
        Ok(Self {
            pixels,
            height,
            width,
            role,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Quantizes back to 8-bit RGB.
    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let q = |c: usize| (self.pixels[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    /// Bilinear resize of every channel (half-pixel centres).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let plane = self.height * self.width;
        let mut pixels = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            pixels.extend(resize_plane(
                &self.pixels[c * plane..(c + 1) * plane],
                self.height,
                self.width,
                height,
                width,
            ));
        }
        Self {
            pixels,
            height,
            width,
            role: self.role,
        }
    }
}

/// Stacks images into a `(B, 3, H, W)` tensor of raw `[0, 1]` values.
pub fn stack_images(images: &[&InputImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Empty("no images".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![3, h, w],
                got: vec![3, img.height, img.width],
            });
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Four maps at strides 4, 8, 16 and 32, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Fused guidance features at the latent grid, `(B, C, H/4, W/4)`.
#[derive(Debug, Clone)]
pub struct GuidanceCondition {
    pub features: Tensor,
    pub role: ImageRole,
}

/// The guidance a denoiser call receives; the variant fixes the task.
#[derive(Debug, Clone)]
pub enum Conditions {
    Iml {
        forged: GuidanceCondition,
    },
    Ciml {
        forged: GuidanceCondition,
        original: GuidanceCondition,
    },
}

impl Conditions {
    pub fn mode(&self) -> TaskMode {
        match self {
            Conditions::Iml { .. } => TaskMode::Iml,
            Conditions::Ciml { .. } => TaskMode::Ciml,
        }
    }

    pub fn forged(&self) -> &GuidanceCondition {
        match self {
            Conditions::Iml { forged } | Conditions::Ciml { forged, .. } => forged,
        }
    }

    pub fn original(&self) -> Option<&GuidanceCondition> {
        match self {
            Conditions::Iml { .. } => None,
            Conditions::Ciml { original, .. } => Some(original),
        }
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.forged().features.dim(0)?)
    }

    /// Selects batch entries `start..start + len`.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let cut = |c: &GuidanceCondition| -> Result<GuidanceCondition> {
            Ok(GuidanceCondition {
                features: c.features.narrow(0, start, len)?,
                role: c.role,
            })
        };
        Ok(match self {
            Conditions::Iml { forged } => Conditions::Iml { forged: cut(forged)? },
            Conditions::Ciml { forged, original } => Conditions::Ciml {
                forged: cut(forged)?,
                original: cut(original)?,
            },
        })
    }

    pub fn detach(&self) -> Self {
        let d = |c: &GuidanceCondition| GuidanceCondition {
            features: c.features.detach(),
            role: c.role,
        };
        match self {
            Conditions::Iml { forged } => Conditions::Iml { forged: d(forged) },
            Conditions::Ciml { forged, original } => Conditions::Ciml {
                forged: d(forged),
                original: d(original),
            },
        }
    }
}

/// Plain convolutional stage stack for desk-scale runs.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    stem_a: Conv,
    stem_b: Conv,
    stages: Vec<(Conv, Vec<(Conv, Conv)>)>,
    widths: Vec<usize>,
}

impl TinyBackbone {
    pub fn new(widths: &[usize], depths: &[usize], vb: VarBuilder) -> Result<Self> {
        let stem_width = (widths[0] / 2).max(4);
        let stem_a = conv3x3(3, stem_width, 1, vb.pp("stem_a"))?;
        let stem_b = conv3x3(stem_width, widths[0], 2, vb.pp("stem_b"))?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (i, (&w, &depth)) in widths.iter().zip(depths).enumerate() {
            let vbs = vb.pp(format!("stage{i}"));
            let down = conv3x3(cin, w, 2, vbs.pp("down"))?;
            let blocks = (0..depth)
                .map(|j| {
                    Ok((
                        conv3x3(w, w, 1, vbs.pp(format!("block{j}.conv_a")))?,
                        conv3x3(w, w, 1, vbs.pp(format!("block{j}.conv_b")))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push((down, blocks));
            cin = w;
        }
        Ok(Self {
            stem_a,
            stem_b,
            stages,
            widths: widths.to_vec(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.stem_a.forward(x)?.silu()?;
        h = self.stem_b.forward(&h)?.silu()?;
        let mut levels = Vec::with_capacity(4);
        for (down, blocks) in &self.stages {
            h = down.forward(&h)?.silu()?;
            for (a, b) in blocks {
                let r = b.forward(&a.forward(&h)?.silu()?)?;
                h = (h + r)?.silu()?;
            }
            levels.push(h.clone());
        }
        Ok(levels)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Tiny(TinyBackbone),
    Full(SwinBackbone),
}

impl Backbone {
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            Backbone::Tiny(b) => b.forward(x),
            Backbone::Full(b) => b.forward(x),
        }
    }

    fn widths(&self) -> Vec<usize> {
        match self {
            Backbone::Tiny(b) => b.widths().to_vec(),
            Backbone::Full(b) => b.widths(),
        }
    }
}

/// Top-down lateral fusion to a single stride-4 map with `C` channels.
#[derive(Debug, Clone)]
pub struct Fpn {
    laterals: Vec<Conv>,
    output: ReplicateConv3x3,
    channels: usize,
}

impl Fpn {
    pub fn new(in_widths: &[usize], channels: usize, vb: VarBuilder) -> Result<Self> {
        let laterals = in_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| conv1x1(w, channels, vb.pp(format!("lateral{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            laterals,
            output: ReplicateConv3x3::new(channels, channels, vb.pp("output"))?,
            channels,
        })
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        if pyramid.levels.len() != self.laterals.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.laterals.len()],
                got: vec![pyramid.levels.len()],
            });
        }
        let mut top: Option<Tensor> = None;
        for (lateral, level) in self.laterals.iter().zip(&pyramid.levels).rev() {
            let l = lateral.forward(level)?;
            top = Some(match top {
                None => l,
                Some(t) => {
                    let (_, _, h, w) = l.dims4()?;
                    (l + t.upsample_nearest2d(h, w)?)?
                }
            });
        }
        let fused = top.expect("pyramid has levels");
        self.output.forward(&fused)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    backbone: Backbone,
    fpn: Fpn,
    image_size: usize,
    mean: [f32; 3],
    std: [f32; 3],
}

impl Conditioner {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let backbone = match cfg.profile {
            SizeProfile::Tiny => Backbone::Tiny(TinyBackbone::new(
                &cfg.encoder_widths(),
                &cfg.encoder_depths(),
                vb.pp("encoder"),
            )?),
            SizeProfile::Full => Backbone::Full(SwinBackbone::new(
                cfg.encoder_widths()[0],
                &cfg.encoder_depths(),
                &cfg.encoder_heads(),
                cfg.window_size(),
                vb.pp("encoder"),
            )?),
        };
        let fpn = Fpn::new(&backbone.widths(), cfg.fpn_channels(), vb.pp("fpn"))?;
        Ok(Self {
            backbone,
            fpn,
            image_size: cfg.image_size,
            mean: cfg.pixel_mean,
            std: cfg.pixel_std,
        })
    }

    /// Per-channel standardization of raw `[0, 1]` pixels.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let dev = x.device();
        let mean = Tensor::new(&self.mean, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&self.std, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Raw `(B, 3, H, W)` pixels in `[0, 1]` to the four-level pyramid.
    pub fn encode_image(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::ShapeMismatch {
                expected: vec![3, self.image_size, self.image_size],
                got: vec![c, h, w],
            });
        }
        let levels = self.backbone.forward(&self.normalize(images)?)?;
        Ok(FeaturePyramid { levels })
    }

    pub fn fpn_fuse(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.fpn.forward(pyramid)
    }

    pub fn condition(&self, images: &Tensor, role: ImageRole) -> Result<GuidanceCondition> {
        let features = self.fpn_fuse(&self.encode_image(images)?)?;
        Ok(GuidanceCondition { features, role })
    }

    /// IML takes the forged batch only; CIML requires the matching originals.
    pub fn build_condition(
        &self,
        mode: TaskMode,
        forged: &Tensor,
        original: Option<&Tensor>,
    ) -> Result<Conditions> {
        match (mode, original) {
            (TaskMode::Iml, None) => Ok(Conditions::Iml {
                forged: self.condition(forged, ImageRole::Forged)?,
            }),
            (TaskMode::Ciml, Some(orig)) => {
                if orig.dims() != forged.dims() {
                    return Err(Error::ShapeMismatch {
                        expected: forged.dims().to_vec(),
                        got: orig.dims().to_vec(),
                    });
                }
                Ok(Conditions::Ciml {
                    forged: self.condition(forged, ImageRole::Forged)?,
                    original: self.condition(orig, ImageRole::Original)?,
                })
            }
            (TaskMode::Iml, Some(_)) => Err(Error::ModeMismatch(
                "IML takes only the forged image but an original was supplied".into(),
            )),
            (TaskMode::Ciml, None) => Err(Error::ModeMismatch(
                "CIML needs the original image alongside the forged one".into(),
            )),
        }
    }

    pub fn channels(&self) -> usize {
        self.fpn.channels()
    }
}
