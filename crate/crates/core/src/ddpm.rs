//! Latent diffusion model bundle (U-Net, schedule, latent standardiser) and
//! its resumable training state.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{l_simple_epoch, LatentStandardizer, NoisePredictor, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpmConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            schedule: ScheduleParams::default(),
            learning_rate: 2.5e-5,
            epochs: 300,
            batch_size: 32,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// Trained ε-model with the schedule and latent normalisation it was fit with.
pub struct LatentDdpm {
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub standardizer: LatentStandardizer,
}

impl NoisePredictor for LatentDdpm {
    fn predict_noise(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.unet.forward(zt, t)
    }
}

pub const DDPM_KIND: &str = "ddpm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmMeta {
    pub kind: String,
    pub config: DdpmConfig,
    pub standardizer: LatentStandardizer,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Downsampling factor of the autoencoder whose latents were modelled.
    pub downsample: usize,
    pub vqvae_sha256: String,
    pub epoch: usize,
    pub history: Vec<f32>,
}

/// Resumable diffusion training state.
pub struct DdpmTraining {
    pub ddpm: LatentDdpm,
    pub optimizer: Adam,
    pub config: DdpmConfig,
    pub epoch: usize,
    pub history: Vec<f32>,
    pub latent_size: (usize, usize),
    pub downsample: usize,
    pub vqvae_sha256: String,
}

impl DdpmTraining {
    pub fn new(
        config: DdpmConfig,
        standardizer: LatentStandardizer,
        latent_size: (usize, usize),
        downsample: usize,
        vqvae_sha256: impl Into<String>,
        device: &Device,
    ) -> Result<Self> {
        config.unet.validate()?;
        let m = config.unet.size_multiple();
        if latent_size.0 % m != 0 || latent_size.1 % m != 0 {
            return Err(Error::Parameter(format!(
                "latent {}x{} not divisible by the U-Net's {m}",
                latent_size.0, latent_size.1
            )));
        }
        if standardizer.mean.len() != config.unet.latent_channels {
            return Err(Error::Parameter(format!(
                "standardiser has {} channels, U-Net expects {}",
                standardizer.mean.len(),
                config.unet.latent_channels
            )));
        }
        let s = &config.schedule;
        let schedule = NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)?;
        let unet = UNet::new(config.unet.clone(), config.seed, device)?;
        let mut optimizer = Adam::new(unet.params().vars(), config.learning_rate)?;
        if let Some(c) = config.clip_norm {
            optimizer = optimizer.with_clip_norm(c);
        }
        Ok(Self {
            ddpm: LatentDdpm {
                unet,
                schedule,
                standardizer,
            },
            optimizer,
            config,
            epoch: 0,
            history: Vec::new(),
            latent_size,
            downsample,
            vqvae_sha256: vqvae_sha256.into(),
        })
    }

    /// One pass over standardised latents; returns the mean loss.
    pub fn run_epoch(&mut self, latents: &Tensor) -> Result<f32> {
        let seed = crate::derive_seed(self.config.seed, &format!("ddpm-epoch-{}", self.epoch));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = l_simple_epoch(
            &self.ddpm.unet,
            latents,
            self.config.batch_size,
            &self.ddpm.schedule,
            &mut self.optimizer,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::NonFinite { step, detail, .. } => Error::NonFinite {
                epoch: self.epoch,
                step,
                detail,
            },
            other => other,
        })?;
        self.epoch += 1;
        self.history.push(loss);
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: BTreeMap<String, Tensor> = self
            .ddpm
            .unet
            .params()
            .export()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        tensors.extend(self.optimizer.export_state()?);
        Checkpoint::new(
            tensors,
            DdpmMeta {
                kind: DDPM_KIND.into(),
                config: self.config.clone(),
                standardizer: self.ddpm.standardizer.clone(),
                latent_height: self.latent_size.0,
                latent_width: self.latent_size.1,
                downsample: self.downsample,
                vqvae_sha256: self.vqvae_sha256.clone(),
                epoch: self.epoch,
                history: self.history.clone(),
            },
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let meta: DdpmMeta = ck.meta()?;
        if meta.kind != DDPM_KIND {
            return Err(Error::Checkpoint(format!("expected a diffusion checkpoint, found `{}`", meta.kind)));
        }
        let mut t = Self::new(
            meta.config,
            meta.standardizer,
            (meta.latent_height, meta.latent_width),
            meta.downsample,
            meta.vqvae_sha256,
            device,
        )?;
        t.ddpm.unet.params().import(&ck.with_prefix("model."))?;
        t.optimizer.import_state(&ck.tensors)?;
        t.epoch = meta.epoch;
        t.history = meta.history;
        Ok(t)
    }
}
