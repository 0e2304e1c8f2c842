//! Vector-quantised autoencoder: convolutional encoder, nearest-neighbour
//! codebook with exponential-moving-average updates, and decoder.

use candle_core::{DType, Device, Module, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Adam, Conv2d, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqVaeConfig {
    /// Spatial downsampling factor `f` (a power of two).
    pub downsample: usize,
    /// Embedding dimension `n_z`.
    pub latent_channels: usize,
    /// Number of codebook vectors `K`.
    pub codebook_size: usize,
    /// Weight of the commitment term.
    pub beta_commit: f64,
    /// Feature width at full resolution and after each downsampling; `log2(f) + 1` entries.
    pub channel_widths: Vec<usize>,
    pub res_blocks: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    /// Codes whose EMA cluster size falls below this are re-seeded from the
    /// current batch. Zero disables restarts.
    pub dead_code_threshold: f64,
    pub seed: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            latent_channels: 3,
            codebook_size: 256,
            beta_commit: 0.25,
            channel_widths: vec![64, 64, 128],
            res_blocks: 2,
            learning_rate: 3e-4,
            epochs: 100,
            batch_size: 32,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            dead_code_threshold: 0.5,
            seed: 0,
        }
    }
}

impl VqVaeConfig {
    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample < 2 || !self.downsample.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "downsampling factor must be a power of two >= 2, got {}",
                self.downsample
            )));
        }
        if self.channel_widths.len() != self.levels() + 1 {
            return Err(Error::Parameter(format!(
                "f = {} needs {} channel widths, got {}",
                self.downsample,
                self.levels() + 1,
                self.channel_widths.len()
            )));
        }
        if self.codebook_size < 2 || self.latent_channels == 0 {
            return Err(Error::Parameter("codebook needs K >= 2 and n_z >= 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) || !(self.ema_epsilon > 0.0) {
            return Err(Error::Parameter("EMA decay must lie in (0, 1) and epsilon be positive".into()));
        }
        if self.beta_commit < 0.0 {
            return Err(Error::Parameter("commitment weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Finite set of embedding vectors with EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f32>,
    cluster_size: Vec<f64>,
    embed_sum: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    initialized: bool,
}

impl Codebook {
    /// Codebook from explicit row-major `K × dim` vectors.
    pub fn from_vectors(dim: usize, vectors: Vec<f32>, decay: f64, epsilon: f64) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 || vectors.len() / dim < 2 {
            return Err(Error::Parameter("codebook needs at least two vectors of equal length".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("codebook vectors must be finite".into()));
        }
        let k = vectors.len() / dim;
        Ok(Self {
            dim,
            embed_sum: vectors.iter().map(|&v| v as f64).collect(),
            cluster_size: vec![1.0; k],
            vectors,
            decay,
            epsilon,
            initialized: true,
        })
    }

    /// Small uniform random codebook, re-seeded from data on the first
    /// training batch.
    pub fn random(size: usize, dim: usize, decay: f64, epsilon: f64, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / size as f32;
        let v = (0..size * dim).map(|_| rng.random_range(-bound..=bound)).collect();
        let mut cb = Self::from_vectors(dim, v, decay, epsilon)?;
        cb.initialized = false;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> &[f64] {
        &self.cluster_size
    }

    /// Index of the nearest vector in squared Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, fiber: &[f32]) -> usize {
        let mut best = (0usize, f32::INFINITY);
        for k in 0..self.size() {
            let d: f32 = self
                .vector(k)
                .iter()
                .zip(fiber)
                .map(|(e, z)| (z - e) * (z - e))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Quantises row-major fibers; returns replacement values and indices.
    pub fn quantize_fibers(&self, fibers: &[f32]) -> (Vec<f32>, Vec<u32>) {
        let mut values = Vec::with_capacity(fibers.len());
        let mut indices = Vec::with_capacity(fibers.len() / self.dim);
        for fiber in fibers.chunks_exact(self.dim) {
            let k = self.nearest(fiber);
            values.extend_from_slice(self.vector(k));
            indices.push(k as u32);
        }
        (values, indices)
    }

    /// One EMA step: cluster sizes and per-code sums decay by `γ` and absorb
    /// this batch's assignments. Vectors are the Laplace-smoothed ratios.
    pub fn ema_update(&mut self, fibers: &[f32], indices: &[u32]) {
        let k = self.size();
        let mut counts = vec![0f64; k];
        let mut sums = vec![0f64; k * self.dim];
        for (fiber, &idx) in fibers.chunks_exact(self.dim).zip(indices) {
            let idx = idx as usize;
            counts[idx] += 1.0;
            for (s, &z) in sums[idx * self.dim..(idx + 1) * self.dim].iter_mut().zip(fiber) {
                *s += z as f64;
            }
        }
        let g = self.decay;
        for (cs, c) in self.cluster_size.iter_mut().zip(&counts) {
            *cs = g * *cs + (1.0 - g) * c;
        }
        for (es, s) in self.embed_sum.iter_mut().zip(&sums) {
            *es = g * *es + (1.0 - g) * s;
        }
        let total: f64 = self.cluster_size.iter().sum();
        let eps = self.epsilon;
        for i in 0..k {
            let smoothed = (self.cluster_size[i] + eps) / (total + k as f64 * eps) * total;
            for d in 0..self.dim {
                self.vectors[i * self.dim + d] = (self.embed_sum[i * self.dim + d] / smoothed) as f32;
            }
        }
    }

    /// Re-seeds codes with cluster size below `threshold` from random fibers.
    pub fn restart_dead(&mut self, fibers: &[f32], threshold: f64, rng: &mut impl Rng) -> usize {
        let n = fibers.len() / self.dim;
        if threshold <= 0.0 || n == 0 {
            return 0;
        }
        let mut restarted = 0;
        for i in 0..self.size() {
            if self.cluster_size[i] < threshold {
                let j = rng.random_range(0..n);
                for d in 0..self.dim {
                    let v = fibers[j * self.dim + d];
                    self.vectors[i * self.dim + d] = v;
                    self.embed_sum[i * self.dim + d] = v as f64;
                }
                self.cluster_size[i] = 1.0;
                restarted += 1;
            }
        }
        restarted
    }

    fn init_from_data(&mut self, fibers: &[f32], rng: &mut impl Rng) {
        let n = fibers.len() / self.dim;
        if n == 0 {
            return;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for i in 0..self.size() {
            let j = order[i % n];
            for d in 0..self.dim {
                let v = fibers[j * self.dim + d];
                self.vectors[i * self.dim + d] = v;
                self.embed_sum[i * self.dim + d] = v as f64;
            }
            self.cluster_size[i] = 1.0;
        }
        self.initialized = true;
    }

    fn to_tensors(&self, device: &Device) -> Result<Vec<(String, Tensor)>> {
        let k = self.size();
        Ok(vec![
            (
                "codebook.vectors".into(),
                Tensor::from_vec(self.vectors.clone(), (k, self.dim), device)?,
            ),
            (
                "codebook.cluster_size".into(),
                Tensor::from_vec(self.cluster_size.clone(), k, device)?,
            ),
            (
                "codebook.embed_sum".into(),
                Tensor::from_vec(self.embed_sum.clone(), (k, self.dim), device)?,
            ),
        ])
    }

    fn from_checkpoint(ck: &Checkpoint, decay: f64, epsilon: f64) -> Result<Self> {
        let vectors = ck.tensor("codebook.vectors")?;
        let (k, dim) = vectors.dims2()?;
        let mut cb = Self::from_vectors(dim, vectors.flatten_all()?.to_vec1::<f32>()?, decay, epsilon)?;
        cb.cluster_size = ck.tensor("codebook.cluster_size")?.to_vec1::<f64>()?;
        cb.embed_sum = ck.tensor("codebook.embed_sum")?.flatten_all()?.to_vec1::<f64>()?;
        if cb.cluster_size.len() != k || cb.embed_sum.len() != k * dim {
            return Err(Error::Checkpoint("codebook statistics have inconsistent sizes".into()));
        }
        Ok(cb)
    }
}

/// Latent `(B, n_z, h, w)` tensor, with code indices when quantised.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub values: Tensor,
    /// Row-major `(B, h, w)` code indices.
    pub indices: Option<Vec<u32>>,
}

impl LatentTensor {
    pub fn is_quantized(&self) -> bool {
        self.indices.is_some()
    }
}

fn to_fibers(z: &Tensor) -> Result<Vec<f32>> {
    Ok(z.permute((0, 2, 3, 1))?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

fn from_fibers(values: Vec<f32>, dims: (usize, usize, usize, usize), device: &Device) -> Result<Tensor> {
    let (b, c, h, w) = dims;
    Ok(Tensor::from_vec(values, (b, h, w, c), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Nearest-codebook quantisation of every spatial fiber of `z_e`.
pub fn quantize(z_e: &Tensor, codebook: &Codebook) -> Result<LatentTensor> {
    let dims = z_e.dims4()?;
    if dims.1 != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent has {} channels, codebook dimension is {}",
            dims.1,
            codebook.dim()
        )));
    }
    let (values, indices) = codebook.quantize_fibers(&to_fibers(z_e)?);
    Ok(LatentTensor {
        values: from_fibers(values, dims, z_e.device())?.to_dtype(z_e.dtype())?,
        indices: Some(indices),
    })
}

#[derive(Debug, Clone)]
struct ResidualUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualUnit {
    fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ch, ch, 3, 1)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(&x.relu()?)?.relu()?)?;
        Ok((x + h)?)
    }
}

/// Per-batch training losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Mean absolute reconstruction error.
    pub recon: f32,
    /// `‖sg[z_e] − e_k‖²`, minimised by the EMA updates rather than by gradient.
    pub codebook: f32,
    /// `‖z_e − sg[e_k]‖²`.
    pub commit: f32,
    /// The loss that was actually back-propagated: `recon + β·commit`.
    pub stepped: f32,
}

pub struct VqVae {
    config: VqVaeConfig,
    store: ParamStore,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_res: Vec<ResidualUnit>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: Vec<ResidualUnit>,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    codebook: Codebook,
}

impl VqVae {
    pub fn new(config: VqVaeConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, device);
        let s = &mut store;
        let w = &config.channel_widths;
        let levels = config.levels();
        let latent_w = w[levels];

        let enc_in = Conv2d::new(s, "enc.in", 1, w[0], 3, 1)?;
        let enc_down = (0..levels)
            .map(|i| Conv2d::new(s, &format!("enc.down.{i}"), w[i], w[i + 1], 3, 2))
            .collect::<Result<Vec<_>>>()?;
        let enc_res = (0..config.res_blocks)
            .map(|i| ResidualUnit::new(s, &format!("enc.res.{i}"), latent_w))
            .collect::<Result<Vec<_>>>()?;
        let enc_out = Conv2d::new(s, "enc.out", latent_w, config.latent_channels, 1, 1)?;

        let dec_in = Conv2d::new(s, "dec.in", config.latent_channels, latent_w, 3, 1)?;
        let dec_res = (0..config.res_blocks)
            .map(|i| ResidualUnit::new(s, &format!("dec.res.{i}"), latent_w))
            .collect::<Result<Vec<_>>>()?;
        let dec_up = (0..levels)
            .rev()
            .map(|i| Conv2d::new(s, &format!("dec.up.{i}"), w[i + 1], w[i], 3, 1))
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv2d::new(s, "dec.out", w[0], 1, 3, 1)?;

        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, "codebook"));
        let codebook = Codebook::random(
            config.codebook_size,
            config.latent_channels,
            config.ema_decay,
            config.ema_epsilon,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            enc_in,
            enc_down,
            enc_res,
            enc_out,
            dec_in,
            dec_res,
            dec_up,
            dec_out,
            codebook,
        })
    }

    pub fn config(&self) -> &VqVaeConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Latent spatial size for an `H × W` image.
    pub fn latent_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.config.downsample;
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("image {height}x{width} not divisible by f = {f}")));
        }
        Ok((height / f, width / f))
    }

    /// Continuous encoder output `z_e` for an `(N, 1, H, W)` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("encoder expects 1 channel, got {c}")));
        }
        self.latent_size(h, w)?;
        let mut hcur = self.enc_in.forward(x)?;
        for down in &self.enc_down {
            hcur = down.forward(&hcur.relu()?)?;
        }
        for res in &self.enc_res {
            hcur = res.forward(&hcur)?;
        }
        Ok(self.enc_out.forward(&hcur.relu()?)?)
    }

    pub fn quantize(&self, z_e: &Tensor) -> Result<LatentTensor> {
        quantize(z_e, &self.codebook)
    }

    /// Unclamped reconstruction from an `(N, n_z, h, w)` latent.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "decoder expects {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        let mut hcur = self.dec_in.forward(z)?;
        for res in &self.dec_res {
            hcur = res.forward(&hcur)?;
        }
        for up in &self.dec_up {
            hcur = up.forward(&upsample2x(&hcur.relu()?)?)?;
        }
        // linear output: a squashing function would saturate on the dark
        // background under L1 and stall training; consumers clamp to [0, 1]
        Ok(self.dec_out.forward(&hcur.relu()?)?)
    }

    /// Quantised latents of `images`, processed in chunks of `chunk`.
    pub fn encode_images(&self, images: &[Image], chunk: usize) -> Result<LatentTensor> {
        let mut values = Vec::new();
        let mut indices = Vec::new();
        for part in images.chunks(chunk.max(1)) {
            let x = Image::batch_tensor(part, self.device())?;
            let q = self.quantize(&self.encode(&x)?)?;
            values.push(q.values);
            indices.extend(q.indices.unwrap_or_default());
        }
        Ok(LatentTensor {
            values: Tensor::cat(&values, 0)?,
            indices: Some(indices),
        })
    }

    /// Decodes in chunks and returns `(N, 1, H, W)`.
    pub fn decode_batched(&self, z: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = z.dim(0)?;
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            out.push(self.decode(&z.narrow(0, start, len)?)?);
            start += len;
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    /// Mean absolute error of `decode(quantize(encode(x)))` over `images`.
    pub fn reconstruction_error(&self, images: &[Image]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for part in images.chunks(64) {
            let x = Image::batch_tensor(part, self.device())?;
            let q = self.quantize(&self.encode(&x)?)?;
            let xh = self.decode(&q.values)?.clamp(0f32, 1f32)?;
            total += (xh - &x)?.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            count += x.elem_count();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Fraction of codebook entries selected at least once on `images`.
    pub fn code_usage(&self, images: &[Image]) -> Result<f64> {
        let q = self.encode_images(images, 64)?;
        let mut used = vec![false; self.codebook.size()];
        for &i in q.indices.as_deref().unwrap_or_default() {
            used[i as usize] = true;
        }
        Ok(used.iter().filter(|&&u| u).count() as f64 / used.len() as f64)
    }

    /// One optimiser step on `recon + β·commit` plus an EMA codebook update.
    pub fn train_step(&mut self, x: &Tensor, optimizer: &mut Adam, rng: &mut impl Rng) -> Result<LossRecord> {
        let z_e = self.encode(x)?;
        let dims = z_e.dims4()?;
        let fibers = to_fibers(&z_e.detach())?;
        if !self.codebook.initialized {
            self.codebook.init_from_data(&fibers, rng);
        }
        let (q_values, indices) = self.codebook.quantize_fibers(&fibers);
        let z_q = from_fibers(q_values, dims, z_e.device())?;
        // straight-through: forward uses z_q, gradient flows to z_e unchanged
        let z_st = (&z_e + (&z_q - &z_e.detach())?)?;
        let x_hat = self.decode(&z_st)?;
        let recon = (&x_hat - x)?.abs()?.mean_all()?;
        let commit = (&z_e - &z_q)?.sqr()?.mean_all()?;
        let loss = if self.config.beta_commit > 0.0 {
            (&recon + (&commit * self.config.beta_commit)?)?
        } else {
            recon.clone()
        };
        let record = LossRecord {
            recon: recon.to_scalar::<f32>()?,
            codebook: commit.to_scalar::<f32>()?,
            commit: commit.to_scalar::<f32>()?,
            stepped: loss.to_scalar::<f32>()?,
        };
        if !record.stepped.is_finite() {
            return Err(Error::NonFinite {
                epoch: 0,
                step: optimizer.steps_taken(),
                detail: format!("{record:?}"),
            });
        }
        optimizer.step(&loss.backward()?)?;
        self.codebook.ema_update(&fibers, &indices);
        self.codebook
            .restart_dead(&fibers, self.config.dead_code_threshold, rng);
        Ok(record)
    }

    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .export()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        out.extend(self.codebook.to_tensors(self.device())?);
        Ok(out)
    }

    /// Restores weights and codebook from a checkpoint written with [`VqVae::tensors`].
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        self.store.import(&ck.with_prefix("model."))?;
        let cb = Codebook::from_checkpoint(ck, self.config.ema_decay, self.config.ema_epsilon)?;
        if cb.size() != self.config.codebook_size || cb.dim() != self.config.latent_channels {
            return Err(Error::Checkpoint(format!(
                "codebook is {}x{}, config expects {}x{}",
                cb.size(),
                cb.dim(),
                self.config.codebook_size,
                self.config.latent_channels
            )));
        }
        self.codebook = cb;
        Ok(())
    }
}

/// Metadata stored alongside VQ-VAE weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqVaeMeta {
    pub kind: String,
    pub config: VqVaeConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub epoch: usize,
    pub val_recon_error: Option<f64>,
    pub history: Vec<LossRecord>,
}

/// Resumable training state: model, optimiser and completed epochs.
pub struct VqVaeTraining {
    pub model: VqVae,
    pub optimizer: Adam,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    pub image_size: (usize, usize),
    pub val_recon_error: Option<f64>,
}

pub const VQVAE_KIND: &str = "vqvae";

impl VqVaeTraining {
    pub fn new(config: VqVaeConfig, image_size: (usize, usize), device: &Device) -> Result<Self> {
        let model = VqVae::new(config, device)?;
        model.latent_size(image_size.0, image_size.1)?;
        let optimizer = Adam::new(model.params().vars(), model.config().learning_rate)?;
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            image_size,
            val_recon_error: None,
        })
    }

    /// One shuffled pass over `images` (an `(N, 1, H, W)` tensor).
    pub fn run_epoch(&mut self, images: &Tensor) -> Result<LossRecord> {
        let n = images.dim(0)?;
        let seed = crate::derive_seed(self.model.config.seed, &format!("vqvae-epoch-{}", self.epoch));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng);
        let mut sum = LossRecord::default();
        let mut batches = 0;
        for (step, chunk) in order.chunks(self.model.config.batch_size.max(1)).enumerate() {
            let batch = images.index_select(&Tensor::new(chunk, images.device())?, 0)?;
            let r = self
                .model
                .train_step(&batch, &mut self.optimizer, &mut rng)
                .map_err(|e| match e {
                    Error::NonFinite { detail, .. } => Error::NonFinite {
                        epoch: self.epoch,
                        step,
                        detail,
                    },
                    other => other,
                })?;
            sum.recon += r.recon;
            sum.codebook += r.codebook;
            sum.commit += r.commit;
            sum.stepped += r.stepped;
            batches += 1;
        }
        let k = batches.max(1) as f32;
        let mean = LossRecord {
            recon: sum.recon / k,
            codebook: sum.codebook / k,
            commit: sum.commit / k,
            stepped: sum.stepped / k,
        };
        self.epoch += 1;
        self.history.push(mean);
        Ok(mean)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: std::collections::BTreeMap<String, Tensor> = self.model.tensors()?.into_iter().collect();
        tensors.extend(self.optimizer.export_state()?);
        Checkpoint::new(
            tensors,
            VqVaeMeta {
                kind: VQVAE_KIND.into(),
                config: self.model.config.clone(),
                image_height: self.image_size.0,
                image_width: self.image_size.1,
                epoch: self.epoch,
                val_recon_error: self.val_recon_error,
                history: self.history.clone(),
            },
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let meta: VqVaeMeta = ck.meta()?;
        if meta.kind != VQVAE_KIND {
            return Err(Error::Checkpoint(format!("expected a VQ-VAE checkpoint, found `{}`", meta.kind)));
        }
        let mut training = Self::new(meta.config, (meta.image_height, meta.image_width), device)?;
        training.model.load_state(ck)?;
        training.optimizer.import_state(&ck.tensors)?;
        training.epoch = meta.epoch;
        training.history = meta.history;
        training.val_recon_error = meta.val_recon_error;
        Ok(training)
    }
}
