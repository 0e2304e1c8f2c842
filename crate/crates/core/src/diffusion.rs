//! Gaussian diffusion on latents: noise schedule, closed-form forward
//! process, true posterior `q(z_{t-1} | z_t, z_0)`, the ε-parametrised reverse
//! mean and the per-element KL term of the variational bound.
//!
//! Timesteps are 1-based (`1..=T`); `alpha_bar(0)` is defined as 1.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{randn, Adam};

/// A network predicting the noise that produced `z_t`.
pub trait NoisePredictor {
    /// `zt` is `(B, C, h, w)`; `t` holds one timestep per batch element.
    fn predict_noise(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor>;

    /// Same timestep for every batch element.
    fn predict_noise_at(&self, zt: &Tensor, t: usize) -> Result<Tensor> {
        let b = zt.dim(0)?;
        self.predict_noise(zt, &vec![t; b])
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor> {
        (**self).predict_noise(zt, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Precomputed variance schedule for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β_t` from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Parameter(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let span = beta_end - beta_start;
        let betas = (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(
            ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            betas,
        )
    }

    /// Rebuilds a schedule from stored `β` values (as saved in checkpoints).
    pub fn from_betas(params: ScheduleParams, betas: Vec<f64>) -> Result<Self> {
        if betas.len() != params.steps || betas.len() < 2 {
            return Err(Error::Parameter("beta array length does not match T".into()));
        }
        if betas.iter().any(|b| !(b.is_finite() && *b > 0.0 && *b < 1.0))
            || betas.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::Parameter("betas must be nondecreasing in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            params,
            betas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients `(c0, ct)` of `μ̃_t = c0·z0 + ct·z_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.betas.clone(), self.betas.len(), device)?)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn forward_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(z0, eps, "forward_sample")?;
    let ab = schedule.alpha_bar(t);
    Ok((z0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Forward sample with one timestep per batch element.
pub fn forward_sample_batch(
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(z0, eps, "forward_sample_batch")?;
    let b = z0.dim(0)?;
    if t.len() != b {
        return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
    }
    for &ti in t {
        schedule.check_t(ti)?;
    }
    let per_item = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = t.iter().map(|&ti| f(schedule.alpha_bar(ti))).collect();
        let mut shape = vec![b];
        shape.extend(std::iter::repeat_n(1, z0.rank() - 1));
        Ok(Tensor::from_vec(v, shape, z0.device())?.to_dtype(z0.dtype())?)
    };
    let signal = per_item(&|ab| ab.sqrt())?;
    let noise = per_item(&|ab| (1.0 - ab).sqrt())?;
    Ok((z0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Mean and variance of `q(z_{t−1} | z_t, z_0)`.
pub fn posterior_params(
    z0: &Tensor,
    zt: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    schedule.check_t(t)?;
    same_shape(z0, zt, "posterior_params")?;
    let (c0, ct) = schedule.posterior_mean_coefs(t);
    let mu = (z0.affine(c0, 0.0)? + zt.affine(ct, 0.0)?)?;
    Ok((mu, schedule.posterior_variance(t)))
}

/// `μ_θ = (z_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t` for a given noise estimate.
pub fn mean_from_noise(zt: &Tensor, t: usize, eps_hat: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(zt, eps_hat, "mean_from_noise")?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(((zt - eps_hat.affine(eps_coef, 0.0)?)? * inv_sqrt_alpha)?)
}

/// Reverse-process mean predicted by `model`.
pub fn predict_mu(
    zt: &Tensor,
    t: usize,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let eps_hat = model.predict_noise_at(zt, t)?;
    mean_from_noise(zt, t, &eps_hat, schedule)
}

/// Element-wise KL between two Gaussians sharing variance `var`.
pub fn gaussian_kl_shared_variance(mu_q: &Tensor, mu_p: &Tensor, var: f64) -> Result<Tensor> {
    if !(var > 0.0) {
        return Err(Error::Domain(format!("KL needs positive variance, got {var}")));
    }
    Ok(((mu_q - mu_p)?.sqr()? * (0.5 / var))?)
}

/// Per-element `D_KL(q(z_{t−1}|z_t,z_0) ‖ p_θ(z_{t−1}|z_t))` with both
/// variances fixed to `β̃_t`. No spatial reduction is applied.
pub fn kl_per_element(
    z0: &Tensor,
    zt: &Tensor,
    t: usize,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t < 2 {
        return Err(Error::Domain("KL term undefined at t = 1 (zero posterior variance)".into()));
    }
    let (mu_q, var) = posterior_params(z0, zt, t, schedule)?;
    let mu_p = predict_mu(zt, t, model, schedule)?;
    gaussian_kl_shared_variance(&mu_q, &mu_p, var)
}

/// Per-channel affine map that makes training latents zero-mean, unit-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStandardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStandardizer {
    /// Fits per-channel statistics over an `(N, C, h, w)` latent tensor.
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let (_, c, _, _) = latents.dims4()?;
        let per_channel = latents.transpose(0, 1)?.flatten_from(1)?.to_dtype(DType::F64)?;
        let mean = per_channel.mean(1)?;
        let var = per_channel.broadcast_sub(&mean.unsqueeze(1)?)?.sqr()?.mean(1)?;
        let mean: Vec<f64> = mean.to_vec1()?;
        let var: Vec<f64> = var.to_vec1()?;
        let std: Vec<f32> = var.iter().map(|v| v.sqrt() as f32).collect();
        if let Some(ch) = std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Parameter(format!("latent channel {ch} has zero variance")));
        }
        debug_assert_eq!(std.len(), c);
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        })
    }

    fn channel_tensor(&self, v: &[f32], like: &Tensor) -> Result<Tensor> {
        let c = like.dim(1)?;
        if c != v.len() {
            return Err(Error::Shape(format!("standardizer has {} channels, latent has {c}", v.len())));
        }
        Ok(Tensor::from_slice(v, (1, c, 1, 1), like.device())?.to_dtype(like.dtype())?)
    }

    pub fn standardize(&self, z: &Tensor) -> Result<Tensor> {
        let mean = self.channel_tensor(&self.mean, z)?;
        let std = self.channel_tensor(&self.std, z)?;
        Ok(z.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    pub fn destandardize(&self, z: &Tensor) -> Result<Tensor> {
        let mean = self.channel_tensor(&self.mean, z)?;
        let std = self.channel_tensor(&self.std, z)?;
        Ok(z.broadcast_mul(&std)?.broadcast_add(&mean)?)
    }
}

/// Mean squared ε-prediction error for given noise and timesteps.
pub fn l_simple_loss(
    model: &impl NoisePredictor,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let zt = forward_sample_batch(z0, t, eps, schedule)?;
    let eps_hat = model.predict_noise(&zt, t)?;
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// One optimiser step on the simplified objective; `t ~ U{1..T}` per element.
pub fn l_simple_train_step(
    model: &impl NoisePredictor,
    z0: &Tensor,
    schedule: &NoiseSchedule,
    optimizer: &mut Adam,
    rng: &mut impl Rng,
) -> Result<f32> {
    let dims = z0.dims().to_vec();
    let t: Vec<usize> = (0..dims[0]).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = randn(rng, &dims, z0.device())?.to_dtype(z0.dtype())?;
    let loss = l_simple_loss(model, z0, &t, &eps, schedule)?;
    let value = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            step: optimizer.steps_taken(),
            detail: format!("L_simple = {value}"),
        });
    }
    optimizer.step(&loss.backward()?)?;
    Ok(value)
}

/// One pass over `latents` in shuffled mini-batches; returns the mean loss.
pub fn l_simple_epoch(
    model: &impl NoisePredictor,
    latents: &Tensor,
    batch_size: usize,
    schedule: &NoiseSchedule,
    optimizer: &mut Adam,
    rng: &mut impl Rng,
) -> Result<f32> {
    let n = latents.dim(0)?;
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let idx = Tensor::new(chunk, latents.device())?;
        let batch = latents.index_select(&idx, 0)?;
        total += l_simple_train_step(model, &batch, schedule, optimizer, rng)?;
        batches += 1;
    }
    Ok(total / batches.max(1) as f32)
}
