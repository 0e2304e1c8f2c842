use std::path::{Path, PathBuf};

use anomaly_ddpm::anomaly::{DetectConfig, ImageScoreConfig, Variant};
use anomaly_ddpm::ddpm::DdpmConfig;
use anomaly_ddpm::vqvae::VqVaeConfig;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of healthy grayscale PNG slices.
    pub data_root: PathBuf,
    /// Every artifact of a run is written below this directory.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// The first `n_corrupted` test images receive a sprite.
    pub n_corrupted: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_val: 1000,
            n_test: 200,
            n_corrupted: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    pub variant: Variant,
    pub fast: bool,
    pub percentile: f64,
    pub t_start: usize,
    pub ddim_steps: usize,
    pub image_score_stride: usize,
    /// Score images over every step of the chain instead of every `stride`-th.
    pub full_chain: bool,
    pub max_batch: usize,
    pub bench_images: usize,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            variant: Variant::C,
            fast: false,
            percentile: 97.5,
            t_start: 500,
            ddim_steps: 50,
            image_score_stride: 10,
            full_chain: false,
            max_batch: 128,
            bench_images: 100,
        }
    }
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub data: DataConfig,
    pub vqvae: VqVaeConfig,
    pub ddpm: DdpmConfig,
    pub anomaly: AnomalyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            data: DataConfig::default(),
            vqvae: VqVaeConfig::default(),
            ddpm: DdpmConfig::default(),
            anomaly: AnomalyConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub downsample: Option<usize>,
    pub fast: bool,
    pub full_chain: bool,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| ConfigError(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.variant {
            self.anomaly.variant = v;
        }
        if let Some(f) = o.downsample {
            self.vqvae.downsample = f;
        }
        self.anomaly.fast |= o.fast;
        self.anomaly.full_chain |= o.full_chain;
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        // every model seed follows the run seed
        self.vqvae.seed = self.seed;
        self.ddpm.seed = self.seed;
        // one channel width per resolution: repeat or drop trailing widths
        if self.vqvae.downsample.is_power_of_two() && self.vqvae.downsample >= 2 {
            let levels = self.vqvae.downsample.trailing_zeros() as usize + 1;
            let last = self.vqvae.channel_widths.last().copied().unwrap_or(64);
            self.vqvae.channel_widths.resize(levels, last);
        }
        self.ddpm.unet.latent_channels = self.vqvae.latent_channels;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.vqvae.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.ddpm.unet.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.data.n_corrupted > self.data.n_test {
            return Err(ConfigError(format!(
                "n_corrupted ({}) exceeds n_test ({})",
                self.data.n_corrupted, self.data.n_test
            )));
        }
        if self.workers == 0 {
            return Err(ConfigError("workers must be at least 1".into()));
        }
        if !(0.0..=100.0).contains(&self.anomaly.percentile) {
            return Err(ConfigError(format!("percentile {} outside [0, 100]", self.anomaly.percentile)));
        }
        if self.anomaly.max_batch == 0 || self.anomaly.image_score_stride == 0 {
            return Err(ConfigError("max_batch and image_score_stride must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> String {
        anomaly_ddpm::checkpoint::sha256_hex(self.to_toml().as_bytes())
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            variant: self.anomaly.variant,
            fast: self.anomaly.fast,
            t_start: self.anomaly.t_start,
            ddim_steps: self.anomaly.ddim_steps,
            image_score: Some(ImageScoreConfig {
                stride: if self.anomaly.full_chain {
                    None
                } else {
                    Some(self.anomaly.image_score_stride)
                },
            }),
            seed: self.seed,
            max_batch: self.anomaly.max_batch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            variant: Some(Variant::D),
            downsample: Some(8),
            seed: Some(9),
            ..Default::default()
        });
        assert_eq!(cfg.anomaly.variant, Variant::D);
        assert_eq!(cfg.vqvae.channel_widths.len(), 4);
        assert_eq!((cfg.seed, cfg.vqvae.seed, cfg.ddpm.seed), (9, 9, 9));
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let cfg: RunConfig = toml::from_str("seed = 4\n[anomaly]\nvariant = \"b\"\n").unwrap();
        assert_eq!((cfg.seed, cfg.anomaly.variant), (4, Variant::B));
        assert_eq!(cfg.data, DataConfig::default());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.data.n_corrupted = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            downsample: Some(3),
            ..Default::default()
        });
        assert!(cfg.validate().is_err());
    }
}
