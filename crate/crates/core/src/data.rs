//! Image corpora: PNG ingestion, split manifests, synthetic healthy head
//! slices and sprite corruption with exact ground-truth masks.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-channel image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        let id = id.into();
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "image `{id}`: {} pixels for {height}x{width}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Parameter(format!("image `{id}`: pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            id,
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Batch of images as an `(N, 1, H, W)` tensor. All images must share a size.
    pub fn batch_tensor(images: &[Image], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Parameter("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if (im.height, im.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "image `{}` is {}x{}, batch is {h}x{w}",
                    im.id, im.height, im.width
                )));
            }
            data.extend_from_slice(&im.pixels);
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?)
    }
}

/// Per-image min-max rescaling to `[0, 1]`; constant inputs map to all zeros.
pub fn normalize_min_max(raw: &[f32]) -> Vec<f32> {
    let (lo, hi) = raw
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    let span = hi - lo;
    raw.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Reads an 8- or 16-bit grayscale PNG and min-max normalises it.
pub fn read_grayscale(path: &Path, id: &str) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Load {
            id: id.to_string(),
            path: path.to_path_buf(),
            reason: io.to_string(),
        },
        other => Error::Format {
            id: id.to_string(),
            reason: other.to_string(),
        },
    })?;
    let (w, h, raw): (u32, u32, Vec<f32>) = match decoded {
        DynamicImage::ImageLuma8(buf) => (
            buf.width(),
            buf.height(),
            buf.into_raw().into_iter().map(f32::from).collect(),
        ),
        DynamicImage::ImageLuma16(buf) => (
            buf.width(),
            buf.height(),
            buf.into_raw().into_iter().map(f32::from).collect(),
        ),
        other => {
            return Err(Error::Format {
                id: id.to_string(),
                reason: format!("expected single-channel grayscale, found {:?}", other.color()),
            })
        }
    };
    Image::new(id, h as usize, w as usize, normalize_min_max(&raw))
}

/// Loads `ids` from `root/<id>.png`, returned in ascending id order.
pub fn load_corpus(root: &Path, ids: &[String]) -> Result<Vec<Image>> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted
        .into_iter()
        .map(|id| {
            let path = root.join(format!("{id}.png"));
            if !path.is_file() {
                return Err(Error::Load {
                    id: id.clone(),
                    path,
                    reason: "file not found".into(),
                });
            }
            read_grayscale(&path, id)
        })
        .collect()
}

/// Ids (file stems) of every `.png` directly inside `root`, sorted.
pub fn list_png_ids(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn encode_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    path: &Path,
    buf: ImageBuffer<P, Vec<S>>,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            id: path.display().to_string(),
            reason: e.to_string(),
        })?;
    crate::checkpoint::write_atomic(path, &bytes)
}

/// Writes `[0, 1]` values as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let data: Vec<u16> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
    encode_png(path, buf)
}

/// Writes a binary mask as an 8-bit PNG with values {0, 255}.
pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Shape("mask buffer does not match dimensions".into()))?;
    encode_png(path, buf)
}

/// Reads a mask PNG; any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let id = path.display().to_string();
    let decoded = image::open(path).map_err(|e| Error::Load {
        id: id.clone(),
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let luma = decoded.to_luma16();
    let (w, h) = luma.dimensions();
    Ok((h as usize, w as usize, luma.into_raw().into_iter().map(|v| v > 0).collect()))
}

/// Disjoint train/validation/test id lists, reproducible from `seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitManifest {
    /// Shuffles `ids` with `seed` and cuts consecutive train/val/test blocks.
    pub fn split(ids: &[String], n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Self> {
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Parameter("duplicate ids in corpus".into()));
        }
        let needed = n_train + n_val + n_test;
        if ids.len() < needed {
            return Err(Error::Parameter(format!(
                "corpus has {} images, split needs {needed}",
                ids.len()
            )));
        }
        let mut shuffled: Vec<String> = unique.into_iter().cloned().collect();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let sorted = |range: std::ops::Range<usize>| {
            let mut v = shuffled[range].to_vec();
            v.sort();
            v
        };
        Ok(Self {
            train: sorted(0..n_train),
            val: sorted(n_train..n_train + n_val),
            test: sorted(n_train + n_val..needed),
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Parameter(format!("id `{id}` appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Square,
    Circle,
    Cross,
    Plus,
}

impl SpriteShape {
    pub const ALL: [SpriteShape; 4] = [
        SpriteShape::Square,
        SpriteShape::Circle,
        SpriteShape::Cross,
        SpriteShape::Plus,
    ];

    /// Whether the box-relative offset `(du, dv)` (pixel centres, origin at
    /// the box centre) lies inside a sprite of side `size`.
    fn contains(self, du: f64, dv: f64, size: f64) -> bool {
        let half = size / 2.0;
        let arm = (size / 3.0).round().max(2.0) / 2.0;
        match self {
            SpriteShape::Square => true,
            SpriteShape::Circle => du * du + dv * dv <= half * half,
            SpriteShape::Plus => du.abs() <= arm || dv.abs() <= arm,
            SpriteShape::Cross => {
                let band = arm * std::f64::consts::SQRT_2;
                (du - dv).abs() <= band || (du + dv).abs() <= band
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteParams {
    pub shape: SpriteShape,
    pub size_px: usize,
    pub intensity: f32,
    pub center_row: usize,
    pub center_col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample {
    pub image: Image,
    pub gt_mask: Vec<bool>,
    pub sprite: SpriteParams,
}

/// Sprite sizes are drawn from this range at 64×64 and scaled with the image.
pub const SPRITE_SIZE_RANGE: (usize, usize) = (4, 14);

/// Pastes one random sprite onto `image`, centred inside its nonzero support.
pub fn corrupt_with_sprite(image: &Image, seed: u64) -> Result<CorruptedSample> {
    let support: Vec<usize> = image
        .pixels
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, _)| i)
        .collect();
    if support.is_empty() {
        return Err(Error::Corruption(image.id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = SpriteShape::ALL[rng.random_range(0..4)];
    let scale = image.height.min(image.width) as f64 / 64.0;
    let (lo, hi) = SPRITE_SIZE_RANGE;
    let size_px = ((rng.random_range(lo..=hi) as f64) * scale).round().max(2.0) as usize;
    let intensity: f32 = rng.random_range(0.0..=1.0);
    let centre = support[rng.random_range(0..support.len())];
    let (center_row, center_col) = (centre / image.width, centre % image.width);

    let mut pixels = image.pixels.clone();
    let mut gt_mask = vec![false; pixels.len()];
    let top = center_row as isize - (size_px / 2) as isize;
    let left = center_col as isize - (size_px / 2) as isize;
    let half = size_px as f64 / 2.0;
    for u in 0..size_px {
        for v in 0..size_px {
            let (r, c) = (top + u as isize, left + v as isize);
            if r < 0 || c < 0 || r >= image.height as isize || c >= image.width as isize {
                continue;
            }
            let (du, dv) = (u as f64 + 0.5 - half, v as f64 + 0.5 - half);
            if shape.contains(du, dv, size_px as f64) {
                let idx = r as usize * image.width + c as usize;
                pixels[idx] = intensity.clamp(0.0, 1.0);
                gt_mask[idx] = true;
            }
        }
    }
    Ok(CorruptedSample {
        image: Image::new(image.id.clone(), image.height, image.width, pixels)?,
        gt_mask,
        sprite: SpriteParams {
            shape,
            size_px,
            intensity,
            center_row,
            center_col,
        },
    })
}

/// Procedural healthy head slice resembling an axial CT: dark background,
/// bright skull ring, soft-tissue interior with smooth texture and a pair of
/// ventricles. Stands in for MedNIST "HeadCT" when no corpus is available.
pub fn synthesize_head_slice(id: impl Into<String>, size: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64 / 64.0;
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);

    let cy = size as f64 / 2.0 + u(-2.0, 2.0) * s;
    let cx = size as f64 / 2.0 + u(-2.0, 2.0) * s;
    let semi_v = u(24.0, 28.0) * s;
    let semi_h = u(19.0, 23.0) * s;
    let theta = u(-0.25, 0.25);
    let skull = u(2.5, 4.0) * s;
    let skull_val = u(0.85, 1.0);
    let tissue = u(0.35, 0.5);
    let grad = u(-0.06, 0.06);
    let vent_dx = u(3.0, 5.0) * s;
    let vent_dy = u(-4.0, 0.0) * s;
    let vent_a = u(3.5, 6.0) * s;
    let vent_b = u(1.5, 2.5) * s;
    let vent_tilt = u(0.1, 0.4);
    let vent_val = u(0.12, 0.22);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (u(0.5, 2.0), u(0.0, 2.0 * PI), u(0.0, 2.0 * PI), u(0.005, 0.02)))
        .collect();

    let (sin_t, cos_t) = theta.sin_cos();
    let mut raw = vec![0f32; size * size];
    for row in 0..size {
        for col in 0..size {
            let (y, x) = (row as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
            // head-aligned frame
            let yr = cos_t * y + sin_t * x;
            let xr = -sin_t * y + cos_t * x;
            let r_outer = ((yr / semi_v).powi(2) + (xr / semi_h).powi(2)).sqrt();
            let edge_dist = (1.0 - r_outer) * semi_v.min(semi_h);
            let coverage = (edge_dist + 0.5).clamp(0.0, 1.0);
            if coverage <= 0.0 {
                continue;
            }
            let inner_v = semi_v - skull;
            let inner_h = semi_h - skull;
            let r_inner = ((yr / inner_v).powi(2) + (xr / inner_h).powi(2)).sqrt();
            let inner_dist = (1.0 - r_inner) * inner_v.min(inner_h);
            let brain_w = (inner_dist + 0.5).clamp(0.0, 1.0);

            let mut brain = tissue + grad * yr / semi_v;
            for &(freq, py, px, amp) in &waves {
                brain += amp * (freq * PI * yr / semi_v + py).sin() * (freq * PI * xr / semi_h + px).cos();
            }
            for side in [-1.0, 1.0] {
                let (vy, vx) = (yr - vent_dy, xr - side * vent_dx);
                let (st, ct) = (side * vent_tilt).sin_cos();
                let a = ct * vy + st * vx;
                let b = -st * vy + ct * vx;
                let rv = ((a / vent_a).powi(2) + (b / vent_b).powi(2)).sqrt();
                let w = ((1.0 - rv) * vent_b + 0.5).clamp(0.0, 1.0);
                brain = brain * (1.0 - w) + vent_val * w;
            }
            let value = coverage * (brain_w * brain + (1.0 - brain_w) * skull_val);
            raw[row * size + col] = value.max(0.0) as f32;
        }
    }
    Image::new(id, size, size, normalize_min_max(&raw))
}

/// Writes `n` synthetic head slices named `head_00000.png`… into `dir` as 8-bit PNGs.
pub fn write_synthetic_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n)
        .map(|i| {
            let id = format!("head_{i:05}");
            let img = synthesize_head_slice(&id, size, crate::derive_seed(seed, &id))?;
            let data: Vec<u8> = img.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
            let buf = ImageBuffer::<Luma<u8>, _>::from_raw(size as u32, size as u32, data)
                .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
            let path = dir.join(format!("{id}.png"));
            encode_png(&path, buf)?;
            Ok(path)
        })
        .collect()
}
