//! KL-guided anomaly localisation: per-cell KL volumes, percentile threshold
//! maps, mask extraction, latent healing and residual scoring.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Image;
use crate::diffusion::{forward_sample, kl_per_element, LatentStandardizer, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result, StageContext};
use crate::nn::randn;
use crate::sampler::{heal_inpaint_seeded, LatentMask, ReverseConfig};
use crate::vqvae::VqVae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    /// Every step in `[400, 600)`: 200 values.
    Full,
    /// 50 evenly spaced values in `[400, 600)`.
    Fast,
}

impl GridMode {
    pub fn timesteps(self) -> Vec<usize> {
        match self {
            GridMode::Full => (400..600).collect(),
            GridMode::Fast => (0..50).map(|i| 400 + 4 * i).collect(),
        }
    }
}

/// Timesteps for the image-level score: every `stride` steps over `[2, T]`,
/// or every step when `stride` is `None`.
pub fn chain_timesteps(steps: usize, stride: Option<usize>) -> Vec<usize> {
    (2..=steps).step_by(stride.unwrap_or(1).max(1)).collect()
}

/// Row-major `h × w` map of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LatentMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Per-element KL values with layout `(h, w, n_z, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KLVolume {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub t_range: Vec<usize>,
    pub values: Vec<f32>,
}

impl KLVolume {
    pub fn index(&self, i: usize, j: usize, c: usize, k: usize) -> usize {
        ((i * self.width + j) * self.channels + c) * self.t_range.len() + k
    }

    pub fn get(&self, i: usize, j: usize, c: usize, k: usize) -> f32 {
        self.values[self.index(i, j, c, k)]
    }
}

/// KL volumes for every element of a standardised `(B, C, h, w)` batch.
/// Element `b` draws its forward noise from `seeds[b]`, one draw per `t`.
pub fn compute_kl_volumes(
    z0: &Tensor,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    t_range: &[usize],
    seeds: &[u64],
) -> Result<Vec<KLVolume>> {
    if t_range.is_empty() {
        return Err(Error::Parameter("empty t range".into()));
    }
    let (b, c, h, w) = z0.dims4()?;
    if seeds.len() != b {
        return Err(Error::Shape(format!("{} seeds for batch of {b}", seeds.len())));
    }
    let nt = t_range.len();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut vols: Vec<KLVolume> = (0..b)
        .map(|_| KLVolume {
            height: h,
            width: w,
            channels: c,
            t_range: t_range.to_vec(),
            values: vec![0.0; h * w * c * nt],
        })
        .collect();
    for (k, &t) in t_range.iter().enumerate() {
        let eps = rngs
            .iter_mut()
            .map(|r| randn(r, &[1, c, h, w], z0.device()))
            .collect::<Result<Vec<_>>>()?;
        let eps = Tensor::cat(&eps, 0)?.to_dtype(z0.dtype())?;
        let zt = forward_sample(z0, t, &eps, schedule)?;
        let kl = kl_per_element(z0, &zt, t, model, schedule)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        for (bi, vol) in vols.iter_mut().enumerate() {
            for ci in 0..c {
                for p in 0..h * w {
                    vol.values[(p * c + ci) * nt + k] = kl[(bi * c + ci) * h * w + p];
                }
            }
        }
    }
    Ok(vols)
}

/// Single-latent form of [`compute_kl_volumes`].
pub fn compute_kl_volume(
    z0: &Tensor,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    t_range: &[usize],
    seed: u64,
) -> Result<KLVolume> {
    let z = if z0.rank() == 3 { z0.unsqueeze(0)? } else { z0.clone() };
    if z.dim(0)? != 1 {
        return Err(Error::Shape("compute_kl_volume takes one latent".into()));
    }
    Ok(compute_kl_volumes(&z, model, schedule, t_range, &[seed])?.remove(0))
}

/// Mean over the channel and timestep axes.
pub fn reduce_to_v(vol: &KLVolume) -> LatentMap {
    let per_cell = vol.channels * vol.t_range.len();
    let values = vol
        .values
        .chunks_exact(per_cell)
        .map(|cell| cell.iter().map(|&x| x as f64).sum::<f64>() / per_cell as f64)
        .collect();
    LatentMap {
        height: vol.height,
        width: vol.width,
        values,
    }
}

/// Mean of every element of the volume.
pub fn image_level_score(vol: &KLVolume) -> f64 {
    vol.values.iter().map(|&x| x as f64).sum::<f64>() / vol.values.len().max(1) as f64
}

/// Linear-interpolation percentile (the same rule as numpy's default).
pub fn percentile_linear(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(Error::Parameter(format!("percentile {q} of {} values", values.len())));
    }
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    let frac = pos - lo as f64;
    Ok(s[lo] + (s[hi] - s[lo]) * frac)
}

pub const MIN_CALIBRATION_SUBJECTS: usize = 20;

/// Per-location percentile of healthy `v` maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMap {
    pub map: LatentMap,
    pub meta: ThresholdMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMeta {
    pub percentile: f64,
    pub n_calibration: usize,
    pub mode: GridMode,
    pub t_range: Vec<usize>,
    pub vqvae_sha256: Option<String>,
    pub ddpm_sha256: Option<String>,
}

impl ThresholdMap {
    /// Calibrates from per-subject maps; needs at least
    /// [`MIN_CALIBRATION_SUBJECTS`] of them.
    pub fn from_maps(maps: &[LatentMap], percentile: f64, mode: GridMode) -> Result<Self> {
        if maps.len() < MIN_CALIBRATION_SUBJECTS {
            return Err(Error::Calibration(format!(
                "{} healthy subjects given, at least {MIN_CALIBRATION_SUBJECTS} required",
                maps.len()
            )));
        }
        let (h, w) = (maps[0].height, maps[0].width);
        if maps.iter().any(|m| (m.height, m.width) != (h, w)) {
            return Err(Error::Shape("calibration maps differ in size".into()));
        }
        let mut values = Vec::with_capacity(h * w);
        let mut column = vec![0.0; maps.len()];
        for p in 0..h * w {
            for (c, m) in column.iter_mut().zip(maps) {
                *c = m.values[p];
            }
            let q = percentile_linear(&column, percentile)?;
            if !q.is_finite() {
                return Err(Error::Calibration(format!("non-finite threshold at cell {p}")));
            }
            values.push(q);
        }
        Ok(Self {
            map: LatentMap::new(h, w, values)?,
            meta: ThresholdMeta {
                percentile,
                n_calibration: maps.len(),
                mode,
                t_range: mode.timesteps(),
                vqvae_sha256: None,
                ddpm_sha256: None,
            },
        })
    }

    pub fn with_checksums(mut self, vqvae: impl Into<String>, ddpm: impl Into<String>) -> Self {
        self.meta.vqvae_sha256 = Some(vqvae.into());
        self.meta.ddpm_sha256 = Some(ddpm.into());
        self
    }

    /// Refuses a map calibrated against different model files.
    pub fn check_models(&self, vqvae_sha256: &str, ddpm_sha256: &str) -> Result<()> {
        for (what, stored, actual) in [
            ("VQ-VAE", &self.meta.vqvae_sha256, vqvae_sha256),
            ("diffusion", &self.meta.ddpm_sha256, ddpm_sha256),
        ] {
            match stored {
                Some(s) if s == actual => {}
                Some(s) => {
                    return Err(Error::Checkpoint(format!(
                        "threshold map was calibrated on {what} checkpoint {s}, loaded checkpoint is {actual}"
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "threshold map carries no {what} checksum"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let t = Tensor::from_vec(self.map.values.clone(), (self.map.height, self.map.width), &Device::Cpu)?;
        Checkpoint::new(BTreeMap::from([("threshold".to_string(), t)]), &self.meta)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, &Device::Cpu)?;
        let meta: ThresholdMeta = ck.meta()?;
        let t = ck.tensor("threshold")?;
        let (h, w) = t.dims2()?;
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Self {
            map: LatentMap::new(h, w, values)?,
            meta,
        })
    }
}

/// `m = v ≥ threshold`, element-wise.
pub fn extract_mask(v: &LatentMap, threshold: &ThresholdMap) -> Result<LatentMask> {
    let t = &threshold.map;
    if (v.height, v.width) != (t.height, t.width) {
        return Err(Error::Shape(format!(
            "v is {}x{}, threshold is {}x{}",
            v.height, v.width, t.height, t.width
        )));
    }
    let values = v.values.iter().zip(&t.values).map(|(a, b)| a >= b).collect();
    LatentMask::new(v.height, v.width, values)
}

/// Nearest-neighbour upsampling by `f`, then a Gaussian blur with
/// `σ = f/2` truncated at `4σ` (edge values repeated at the border).
pub fn smooth_upsampled_mask(mask: &LatentMask, f: usize) -> Vec<f32> {
    let (hh, ww) = (mask.height * f, mask.width * f);
    let up: Vec<f32> = (0..hh * ww)
        .map(|p| if mask.get(p / ww / f, p % ww / f) { 1.0 } else { 0.0 })
        .collect();
    let sigma = f as f64 / 2.0;
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let blur = |src: &[f32], along_rows: bool| -> Vec<f32> {
        let mut out = vec![0f32; src.len()];
        for r in 0..hh {
            for c in 0..ww {
                let mut acc = 0.0;
                for (ki, &k) in kernel.iter().enumerate() {
                    let d = ki as isize - radius;
                    let (rr, cc) = if along_rows {
                        ((r as isize + d).clamp(0, hh as isize - 1) as usize, c)
                    } else {
                        (r, (c as isize + d).clamp(0, ww as isize - 1) as usize)
                    };
                    acc += k * src[rr * ww + cc] as f64;
                }
                out[r * ww + c] = acc as f32;
            }
        }
        out
    };
    blur(&blur(&up, false), true)
}

/// Detection variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Heal every latent cell from `t_start`; raw residual.
    A,
    /// Healing of (a), residual gated by the smoothed KL mask.
    B,
    /// KL-mask-guided inpainting, residual gated by the mask.
    C,
    /// (c) with the 50-point KL grid and 50-step DDIM healing.
    D,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            "d" => Ok(Variant::D),
            _ => Err(Error::Parameter(format!("unknown variant `{s}` (expected a, b, c or d)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub variant: Variant,
    /// Use the 50-point grid and DDIM healing regardless of variant.
    pub fast: bool,
    pub t_start: usize,
    pub ddim_steps: usize,
    /// `None` skips the image-level score.
    pub image_score: Option<ImageScoreConfig>,
    pub seed: u64,
    /// Upper bound on images per forward batch.
    pub max_batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageScoreConfig {
    /// Step between sampled timesteps; `None` uses the whole chain.
    pub stride: Option<usize>,
}

impl Default for ImageScoreConfig {
    fn default() -> Self {
        Self { stride: Some(10) }
    }
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            variant: Variant::C,
            fast: false,
            t_start: 500,
            ddim_steps: 50,
            image_score: Some(ImageScoreConfig::default()),
            seed: 0,
            max_batch: 128,
        }
    }
}

impl DetectConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Default::default()
        }
    }

    pub fn is_fast(&self) -> bool {
        self.fast || self.variant == Variant::D
    }

    pub fn grid(&self) -> GridMode {
        if self.is_fast() {
            GridMode::Fast
        } else {
            GridMode::Full
        }
    }

    /// Whether this variant computes KL maps and so needs a threshold map.
    pub fn needs_kl_mask(&self) -> bool {
        self.variant != Variant::A
    }

    fn heal_key(&self) -> HealKey {
        let mask = match self.variant {
            Variant::A | Variant::B => None,
            Variant::C | Variant::D => Some(self.grid()),
        };
        HealKey { mask, fast: self.is_fast() }
    }

    pub fn reverse(&self) -> ReverseConfig {
        if self.is_fast() {
            ReverseConfig::ddim(self.t_start, self.ddim_steps, self.seed)
        } else {
            ReverseConfig::ancestral(self.t_start, self.seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct HealKey {
    /// `None` heals every cell; otherwise the KL mask from this grid.
    mask: Option<GridMode>,
    fast: bool,
}

/// Per-image output of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub input_id: String,
    /// Mean KL map; `None` when the variant does not compute one.
    pub v: Option<LatentMap>,
    pub mask: LatentMask,
    pub healed: Image,
    /// `|x − x̂′|`, row-major `H × W`.
    pub residual: Vec<f32>,
    pub pixel_scores: Vec<f32>,
    pub image_score: Option<f64>,
    /// Seconds per stage, amortised over the images of a batch.
    pub wall_time_s: BTreeMap<String, f64>,
}

/// A variant's reports plus total seconds per stage over all images.
#[derive(Debug, Clone)]
pub struct Detection {
    pub config: DetectConfig,
    pub reports: Vec<AnomalyReport>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub batches: usize,
}

/// Trained models and calibrations needed to score images.
pub struct Detector<'a, M: NoisePredictor> {
    pub vqvae: &'a VqVae,
    pub model: &'a M,
    pub schedule: &'a NoiseSchedule,
    pub standardizer: &'a LatentStandardizer,
    thresholds: BTreeMap<GridMode, ThresholdMap>,
}

fn image_seeds(seed: u64, stage: &str, images: &[Image]) -> Vec<u64> {
    images
        .iter()
        .map(|im| crate::derive_seed(seed, &format!("{stage}/{}", im.id)))
        .collect()
}

fn timed<T>(stages: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *stages.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
    out
}

impl<'a, M: NoisePredictor> Detector<'a, M> {
    pub fn new(
        vqvae: &'a VqVae,
        model: &'a M,
        schedule: &'a NoiseSchedule,
        standardizer: &'a LatentStandardizer,
    ) -> Self {
        Self {
            vqvae,
            model,
            schedule,
            standardizer,
            thresholds: BTreeMap::new(),
        }
    }

    /// Registers a threshold map for its grid mode, replacing any previous one.
    pub fn with_threshold(mut self, threshold: ThresholdMap) -> Self {
        self.thresholds.insert(threshold.meta.mode, threshold);
        self
    }

    pub fn threshold(&self, mode: GridMode) -> Option<&ThresholdMap> {
        self.thresholds.get(&mode)
    }

    /// Standardised quantised latents of `images`.
    pub fn latents(&self, images: &[Image]) -> Result<Tensor> {
        let q = self.vqvae.encode_images(images, images.len().max(1))?;
        self.standardizer.standardize(&q.values)
    }

    /// Mean KL maps for a standardised batch.
    pub fn v_maps(&self, z: &Tensor, images: &[Image], mode: GridMode, seed: u64) -> Result<Vec<LatentMap>> {
        let seeds = image_seeds(seed, &format!("kl-{mode:?}"), images);
        let vols = compute_kl_volumes(z, self.model, self.schedule, &mode.timesteps(), &seeds)?;
        Ok(vols.iter().map(reduce_to_v).collect())
    }

    /// Mean KL maps for `images`, in batches of at most `max_batch`.
    pub fn v_maps_for(&self, images: &[Image], mode: GridMode, seed: u64, max_batch: usize) -> Result<Vec<LatentMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(max_batch.max(1)) {
            let z = self.latents(chunk).stage("encode")?;
            out.extend(self.v_maps(&z, chunk, mode, seed).stage("kl")?);
        }
        Ok(out)
    }

    /// Threshold map from healthy validation images.
    pub fn calibrate(
        &self,
        images: &[Image],
        mode: GridMode,
        percentile: f64,
        seed: u64,
        max_batch: usize,
    ) -> Result<ThresholdMap> {
        if images.len() < MIN_CALIBRATION_SUBJECTS {
            return Err(Error::Calibration(format!(
                "{} healthy subjects given, at least {MIN_CALIBRATION_SUBJECTS} required",
                images.len()
            )));
        }
        let maps = self.v_maps_for(images, mode, seed, max_batch)?;
        ThresholdMap::from_maps(&maps, percentile, mode)
    }

    /// Image-level scores (mean KL over the chain grid).
    pub fn image_scores(&self, z: &Tensor, images: &[Image], cfg: ImageScoreConfig, seed: u64) -> Result<Vec<f64>> {
        let seeds = image_seeds(seed, "chain", images);
        let ts = chain_timesteps(self.schedule.steps(), cfg.stride);
        let vols = compute_kl_volumes(z, self.model, self.schedule, &ts, &seeds)?;
        Ok(vols.iter().map(image_level_score).collect())
    }

    pub fn detect(&self, images: &[Image], config: &DetectConfig) -> Result<Detection> {
        Ok(self.run_many(images, std::slice::from_ref(config))?.remove(0))
    }

    /// Runs several configurations over the same images, computing stages
    /// they have in common (encoding, KL maps, healing) once. Each result is
    /// identical to running its configuration alone with the same seed.
    pub fn run_many(&self, images: &[Image], configs: &[DetectConfig]) -> Result<Vec<Detection>> {
        let first = configs
            .first()
            .ok_or_else(|| Error::Parameter("no detection configuration given".into()))?;
        if images.is_empty() {
            return Err(Error::Parameter("no images to process".into()));
        }
        let (hh, ww) = (images[0].height, images[0].width);
        if images.iter().any(|im| (im.height, im.width) != (hh, ww)) {
            return Err(Error::Shape("images in one run must share a size".into()));
        }
        for c in configs {
            if c.seed != first.seed || c.max_batch != first.max_batch || c.t_start != first.t_start {
                return Err(Error::Parameter(
                    "shared runs need equal seed, t_start and max_batch".into(),
                ));
            }
            c.reverse().validate(self.schedule)?;
            if c.needs_kl_mask() && !self.thresholds.contains_key(&c.grid()) {
                return Err(Error::Calibration(format!(
                    "variant {} needs a {:?}-grid threshold map",
                    c.variant.tag(),
                    c.grid()
                )));
            }
        }
        let f = self.vqvae.config().downsample;
        let seed = first.seed;
        let mut results: Vec<Detection> = configs
            .iter()
            .map(|c| Detection {
                config: c.clone(),
                reports: Vec::with_capacity(images.len()),
                stage_seconds: BTreeMap::new(),
                batches: 0,
            })
            .collect();

        for chunk in images.chunks(first.max_batch.max(1)) {
            let n = chunk.len();
            let mut shared: BTreeMap<String, f64> = BTreeMap::new();
            let z = timed(&mut shared, "encode", || self.latents(chunk)).stage("encode")?;
            let (_, _, h, w) = z.dims4()?;

            let mut v_by_grid: BTreeMap<GridMode, Vec<LatentMap>> = BTreeMap::new();
            for c in configs.iter().filter(|c| c.needs_kl_mask()) {
                let g = c.grid();
                if !v_by_grid.contains_key(&g) {
                    let v = timed(&mut shared, &format!("kl_{g:?}"), || self.v_maps(&z, chunk, g, seed))
                        .stage("kl")?;
                    v_by_grid.insert(g, v);
                }
            }
            let mut masks_by_grid: BTreeMap<GridMode, Vec<LatentMask>> = BTreeMap::new();
            for (g, vs) in &v_by_grid {
                let th = &self.thresholds[g];
                let masks = vs.iter().map(|v| extract_mask(v, th)).collect::<Result<Vec<_>>>().stage("mask")?;
                masks_by_grid.insert(*g, masks);
            }

            let mut healed: BTreeMap<HealKey, (Vec<LatentMask>, Vec<Image>, Vec<Vec<f32>>)> = BTreeMap::new();
            for c in configs {
                let key = c.heal_key();
                if healed.contains_key(&key) {
                    continue;
                }
                let masks = match key.mask {
                    None => vec![LatentMask::filled(h, w, true); n],
                    Some(g) => masks_by_grid[&g].clone(),
                };
                let seeds = image_seeds(seed, "heal", chunk);
                let reverse = c.reverse();
                let zh = timed(&mut shared, &format!("heal_{key:?}"), || {
                    // images with an empty mask come back unchanged, so only
                    // the others enter the reverse chain
                    let active: Vec<usize> = (0..n).filter(|&i| masks[i].count() > 0).collect();
                    if active.is_empty() {
                        return Ok(z.clone());
                    }
                    let idx = Tensor::new(active.iter().map(|&i| i as u32).collect::<Vec<_>>(), z.device())?;
                    let sub_masks: Vec<LatentMask> = active.iter().map(|&i| masks[i].clone()).collect();
                    let sub_seeds: Vec<u64> = active.iter().map(|&i| seeds[i]).collect();
                    let healed = heal_inpaint_seeded(
                        &z.index_select(&idx, 0)?,
                        &LatentMask::stack(&sub_masks, z.device())?,
                        &reverse,
                        self.model,
                        self.schedule,
                        &sub_seeds,
                    )?;
                    let mut rows = Vec::with_capacity(n);
                    let mut next = 0;
                    for i in 0..n {
                        if active.get(next) == Some(&i) {
                            rows.push(healed.narrow(0, next, 1)?);
                            next += 1;
                        } else {
                            rows.push(z.narrow(0, i, 1)?);
                        }
                    }
                    Ok(Tensor::cat(&rows, 0)?)
                })
                .stage("heal")?;
                let (imgs, residuals) = timed(&mut shared, &format!("decode_{key:?}"), || {
                    let x_hat = self.vqvae.decode(&self.standardizer.destandardize(&zh)?)?;
                    let pix = x_hat.flatten_all()?.to_vec1::<f32>()?;
                    let mut imgs = Vec::with_capacity(n);
                    let mut residuals = Vec::with_capacity(n);
                    for (im, p) in chunk.iter().zip(pix.chunks_exact(hh * ww)) {
                        let clamped: Vec<f32> = p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                        residuals.push(im.pixels.iter().zip(&clamped).map(|(a, b)| (a - b).abs()).collect());
                        imgs.push(Image::new(im.id.clone(), hh, ww, clamped)?);
                    }
                    Ok((imgs, residuals))
                })
                .stage("decode")?;
                healed.insert(key, (masks, imgs, residuals));
            }

            let mut scores: Option<(ImageScoreConfig, Vec<f64>)> = None;
            for c in configs {
                if let Some(sc) = c.image_score {
                    if scores.as_ref().map(|s| s.0) != Some(sc) {
                        let s = timed(&mut shared, &format!("image_score_{:?}", sc.stride), || {
                            self.image_scores(&z, chunk, sc, seed)
                        })
                        .stage("image_score")?;
                        scores = Some((sc, s));
                    }
                }
            }

            for (c, result) in configs.iter().zip(results.iter_mut()) {
                let key = c.heal_key();
                let (heal_masks, imgs, residuals) = &healed[&key];
                let mut stages: BTreeMap<String, f64> = BTreeMap::new();
                stages.insert("encode".into(), shared["encode"]);
                if c.needs_kl_mask() {
                    stages.insert("kl".into(), shared[&format!("kl_{:?}", c.grid())]);
                }
                stages.insert("heal".into(), shared[&format!("heal_{key:?}")]);
                stages.insert("decode".into(), shared[&format!("decode_{key:?}")]);
                if let Some(sc) = c.image_score {
                    stages.insert("image_score".into(), shared[&format!("image_score_{:?}", sc.stride)]);
                }
                let start = Instant::now();
                let mut batch_reports = Vec::with_capacity(n);
                for i in 0..n {
                    let (mask, pixel_scores) = match c.variant {
                        Variant::A => (heal_masks[i].clone(), residuals[i].clone()),
                        _ => {
                            let m = &masks_by_grid[&c.grid()][i];
                            let weight = smooth_upsampled_mask(m, f);
                            let s = residuals[i].iter().zip(&weight).map(|(r, wt)| r * wt).collect();
                            (m.clone(), s)
                        }
                    };
                    batch_reports.push(AnomalyReport {
                        input_id: chunk[i].id.clone(),
                        v: if c.needs_kl_mask() {
                            Some(v_by_grid[&c.grid()][i].clone())
                        } else {
                            None
                        },
                        mask,
                        healed: imgs[i].clone(),
                        residual: residuals[i].clone(),
                        pixel_scores,
                        image_score: c.image_score.map(|_| scores.as_ref().map(|s| s.1[i]).unwrap_or(f64::NAN)),
                        wall_time_s: BTreeMap::new(),
                    });
                }
                stages.insert("residual".into(), start.elapsed().as_secs_f64());
                for r in &mut batch_reports {
                    r.wall_time_s = stages.iter().map(|(k, v)| (k.clone(), v / n as f64)).collect();
                }
                for (k, v) in &stages {
                    *result.stage_seconds.entry(k.clone()).or_default() += v;
                }
                result.reports.extend(batch_reports);
                result.batches += 1;
            }
        }
        Ok(results)
    }
}
