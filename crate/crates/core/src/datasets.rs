//! Samples, manifests, preprocessing and a synthetic splice generator.
//!
//! A manifest is a line-delimited JSON file. The first line is a header
//! `{"schema": "maskdiff-manifest", "version": 1, "split": "train"}`; every
//! following line is one record whose paths are relative to the manifest's
//! directory:
//!
//! ```text
//! {"id":"000007","forged":"forged/000007.png","original":"original/000007.png","mask":"mask/000007.png","mode":"ciml","tag":"SPG"}
//! ```
//!
//! Images are 8-bit RGB files, masks single-channel `{0, 255}` files.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::BinaryMask;
use crate::conditioner::{ImageRole, InputImage, TaskMode};
use crate::error::{Error, Result};
use crate::resample::resize_plane;

pub const MANIFEST_SCHEMA: &str = "maskdiff-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Region area bounds of the synthetic generator, as fractions of the image.
pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.40;

#[derive(Debug, Clone, PartialEq)]
pub struct ForgerySample {
    pub forged: InputImage,
    pub original: Option<InputImage>,
    pub gt_mask: BinaryMask,
    pub mode: TaskMode,
    pub source_id: String,
}

impl ForgerySample {
    pub fn new(
        forged: InputImage,
        original: Option<InputImage>,
        gt_mask: BinaryMask,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let dims = (forged.height(), forged.width());
        if (gt_mask.height(), gt_mask.width()) != dims {
            return Err(Error::ShapeMismatch {
                expected: vec![dims.0, dims.1],
                got: vec![gt_mask.height(), gt_mask.width()],
            });
        }
        if let Some(o) = &original {
            if (o.height(), o.width()) != dims {
                return Err(Error::ShapeMismatch {
                    expected: vec![dims.0, dims.1],
                    got: vec![o.height(), o.width()],
                });
            }
        }
        let mode = if original.is_some() {
            TaskMode::Ciml
        } else {
            TaskMode::Iml
        };
        Ok(Self {
            forged,
            original,
            gt_mask,
            mode,
            source_id: source_id.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub forged: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<PathBuf>,
    pub mask: PathBuf,
    pub mode: TaskMode,
    /// Pair taxonomy for CIML data (`SDG` or `SPG`), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema: String,
    version: u32,
    split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            root: root.into(),
            split,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the manifest; record paths are stored as given (relative to `root`).
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let header = ManifestHeader {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
            split: self.split,
        };
        let mut text = serde_json::to_string(&header).expect("header serializes");
        text.push('\n');
        for r in &self.records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    /// Decodes record `index` at its native resolution.
    pub fn load_sample(&self, index: usize) -> Result<ForgerySample> {
        let r = self
            .records
            .get(index)
            .ok_or_else(|| Error::InvalidRange(format!("record {index} of {}", self.len())))?;
        let forged = InputImage::from_rgb(&read_rgb(&self.resolve(&r.forged))?, ImageRole::Forged);
        let original = match &r.original {
            Some(p) => Some(InputImage::from_rgb(&read_rgb(&self.resolve(p))?, ImageRole::Original)),
            None => None,
        };
        let mask_path = self.resolve(&r.mask);
        let mask = image::open(&mask_path)
            .map_err(|e| Error::Image {
                path: mask_path.clone(),
                source: e,
            })?
            .to_luma8();
        let mut sample = ForgerySample::new(forged, original, BinaryMask::from_gray(&mask), r.id.clone())?;
        sample.mode = r.mode;
        Ok(sample)
    }

    /// Loads and resizes every record (no augmentation).
    pub fn load_all(&self, size: usize) -> Result<Vec<ForgerySample>> {
        (0..self.len())
            .map(|i| preprocess(&self.load_sample(i)?, size, None, &mut ChaCha8Rng::seed_from_u64(0)))
            .collect()
    }

    /// Record indices grouped into batches; see [`batch_order`].
    pub fn iterate(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
        batch_order(self.len(), batch_size, shuffle_seed)
    }
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8())
}

/// Reads a manifest; its directory becomes the root for relative paths.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let bad = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(f).lines().enumerate();
    let header: ManifestHeader = loop {
        match lines.next() {
            None => return Err(bad(1, "missing header line".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| bad(i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if header.schema != MANIFEST_SCHEMA {
        return Err(bad(1, format!("unknown schema `{}`", header.schema)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(bad(1, format!("unsupported version {}", header.version)));
    }
    let mut manifest = DatasetManifest::new(root, header.split);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
        if rec.mode == TaskMode::Ciml && rec.original.is_none() {
            return Err(bad(i + 1, "ciml record without an original image".into()));
        }
        let files = [Some(&rec.forged), rec.original.as_ref(), Some(&rec.mask)];
        for p in files.into_iter().flatten() {
            if !manifest.resolve(p).is_file() {
                return Err(bad(i + 1, format!("missing file {}", manifest.resolve(p).display())));
            }
        }
        manifest.records.push(rec);
    }
    Ok(manifest)
}

/// Splits `0..len` into batches of `batch_size` (the last may be short).
/// With a seed the order is a seeded shuffle, otherwise the natural order.
pub fn batch_order(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidRange("batch size must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// JPEG re-encoding applied during preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JpegAugment {
    /// Inclusive quality range.
    pub quality: [u8; 2],
    /// Also re-encode the original (with its own quality draw).
    pub original: bool,
}

/// Resizes to `size x size` (bilinear for images, nearest for the mask) and
/// optionally re-encodes the images as JPEG at a uniformly drawn quality.
pub fn preprocess(
    sample: &ForgerySample,
    size: usize,
    jpeg: Option<JpegAugment>,
    rng: &mut impl Rng,
) -> Result<ForgerySample> {
    if size == 0 {
        return Err(Error::InvalidRange("target size must be positive".into()));
    }
    let mut forged = sample.forged.resized(size, size);
    let mut original = sample.original.as_ref().map(|o| o.resized(size, size));
    if let Some(aug) = jpeg {
        let [lo, hi] = aug.quality;
        if lo == 0 || lo > hi || hi > 100 {
            return Err(Error::InvalidRange(format!("jpeg quality range [{lo}, {hi}]")));
        }
        forged = jpeg_roundtrip(&forged, rng.random_range(lo..=hi))?;
        if aug.original {
            if let Some(o) = original.as_mut() {
                *o = jpeg_roundtrip(o, rng.random_range(lo..=hi))?;
            }
        }
    }
    Ok(ForgerySample {
        forged,
        original,
        gt_mask: sample.gt_mask.resize_nearest(size, size),
        mode: sample.mode,
        source_id: sample.source_id.clone(),
    })
}

pub fn jpeg_roundtrip(img: &InputImage, quality: u8) -> Result<InputImage> {
    let mem = || PathBuf::from("<jpeg buffer>");
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&img.to_rgb())
        .map_err(|e| Error::Image { path: mem(), source: e })?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::Image { path: mem(), source: e })?
        .to_rgb8();
    Ok(InputImage::from_rgb(&decoded, img.role))
}

/// Smooth random colour field with additive per-pixel sensor noise.
pub fn procedural_base(size: usize, rng: &mut impl Rng) -> RgbImage {
    let s = size as f64;
    let waves: Vec<[f64; 6]> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.5..3.0) * std::f64::consts::TAU / s;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            [
                freq * angle.cos(),
                freq * angle.sin(),
                phase,
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            ]
        })
        .collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let sigma = rng.random_range(0.03..0.06);
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let mut px = [0u8; 3];
        let (fx, fy) = (x as f64, y as f64);
        for (c, out) in px.iter_mut().enumerate() {
            let mut v = base[c];
            for w in &waves {
                v += w[3 + c] * (w[0] * fx + w[1] * fy + w[2]).sin();
            }
            v += noise.sample(rng);
            *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        image::Rgb(px)
    })
}

pub fn procedural_bases(count: usize, size: usize, rng: &mut impl Rng) -> Vec<RgbImage> {
    (0..count).map(|_| procedural_base(size, rng)).collect()
}

/// Random ellipse or star polygon covering `MIN_AREA..=MAX_AREA` of the image.
pub fn random_region(height: usize, width: usize, rng: &mut impl Rng) -> BinaryMask {
    let s = height.min(width) as f64;
    loop {
        let cy = rng.random_range(0.15..0.85) * height as f64;
        let cx = rng.random_range(0.15..0.85) * width as f64;
        let mask = if rng.random_bool(0.5) {
            let ry = rng.random_range(0.08..0.4) * s;
            let rx = rng.random_range(0.08..0.4) * s;
            let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
            BinaryMask::from_fn(height, width, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            })
        } else {
            let k = rng.random_range(5..=9);
            let r = rng.random_range(0.12..0.45) * s;
            let start = rng.random_range(0.0..std::f64::consts::TAU);
            let verts: Vec<(f64, f64)> = (0..k)
                .map(|i| {
                    let a = start + i as f64 * std::f64::consts::TAU / k as f64;
                    let rad = r * rng.random_range(0.5..1.0);
                    (cy + rad * a.sin(), cx + rad * a.cos())
                })
                .collect();
            BinaryMask::from_fn(height, width, |y, x| inside(&verts, y as f64 + 0.5, x as f64 + 0.5))
        };
        let a = mask.area_fraction();
        if (MIN_AREA..=MAX_AREA).contains(&a) {
            return mask;
        }
    }
}

/// Even-odd point-in-polygon test; vertices are `(y, x)`.
fn inside(verts: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut hit = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (yi, xi) = verts[i];
        let (yj, xj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Down- then up-sampling by `factor`; flattens sensor noise, which is the
/// trace the forged-only task has to pick up.
fn resample_trace(img: &RgbImage, factor: f64) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (sh, sw) = (
        ((h as f64 * factor).round() as usize).max(1),
        ((w as f64 * factor).round() as usize).max(1),
    );
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| {
            let p: Vec<f32> = img.pixels().map(|px| px.0[c] as f32).collect();
            let small = resize_plane(&p, h, w, sh, sw);
            resize_plane(&small, sh, sw, h, w)
        })
        .collect();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| planes[c][i].round().clamp(0.0, 255.0) as u8))
    })
}

/// One synthetic splice: `forged` equals `original` outside `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub forged: RgbImage,
    pub original: RgbImage,
    pub mask: BinaryMask,
}

/// Splices a random region of a resampled donor into a host, both drawn
/// from `bases` (distinct indices).
pub fn synth_pairs(bases: &[RgbImage], rng: &mut impl Rng, n: usize) -> Result<Vec<SyntheticPair>> {
    if bases.len() < 2 {
        return Err(Error::InsufficientBases(bases.len()));
    }
    let (w, h) = bases[0].dimensions();
    if bases.iter().any(|b| b.dimensions() != (w, h)) {
        return Err(Error::InvalidRange("base images differ in size".into()));
    }
    (0..n)
        .map(|_| {
            let host = rng.random_range(0..bases.len());
            let mut donor = rng.random_range(0..bases.len() - 1);
            if donor >= host {
                donor += 1;
            }
            let mask = random_region(h as usize, w as usize, rng);
            let donor = resample_trace(&bases[donor], rng.random_range(0.35..0.6));
            let original = bases[host].clone();
            let mut forged = original.clone();
            for (x, y, px) in forged.enumerate_pixels_mut() {
                if mask.get(y as usize, x as usize) == 1 {
                    *px = *donor.get_pixel(x, y);
                }
            }
            Ok(SyntheticPair {
                forged,
                original,
                mask,
            })
        })
        .collect()
}

/// Writes `n` synthetic CIML pairs plus `manifest.jsonl` under `out_dir`.
/// The original is the host, so the shared content is authentic (`SPG`).
pub fn synth_forgery(
    bases: &[RgbImage],
    rng: &mut impl Rng,
    n: usize,
    out_dir: &Path,
    split: Split,
) -> Result<DatasetManifest> {
    let pairs = synth_pairs(bases, rng, n)?;
    let mut manifest = DatasetManifest::new(out_dir, split);
    for sub in ["forged", "original", "mask"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let id = format!("{i:06}");
        let rec = ManifestRecord {
            forged: PathBuf::from(format!("forged/{id}.png")),
            original: Some(PathBuf::from(format!("original/{id}.png"))),
            mask: PathBuf::from(format!("mask/{id}.png")),
            mode: TaskMode::Ciml,
            tag: Some("SPG".into()),
            id,
        };
        save(&p.forged, &out_dir.join(&rec.forged))?;
        save(&p.original, &out_dir.join(rec.original.as_ref().expect("set above")))?;
        let mask_path = out_dir.join(&rec.mask);
        p.mask.to_gray().save(&mask_path).map_err(|e| Error::Image {
            path: mask_path.clone(),
            source: e,
        })?;
        manifest.records.push(rec);
    }
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// In-memory samples from synthetic pairs, skipping the filesystem.
pub fn pairs_to_samples(pairs: &[SyntheticPair]) -> Result<Vec<ForgerySample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            ForgerySample::new(
                InputImage::from_rgb(&p.forged, ImageRole::Forged),
                Some(InputImage::from_rgb(&p.original, ImageRole::Original)),
                p.mask.clone(),
                format!("{i:06}"),
            )
        })
        .collect()
}
