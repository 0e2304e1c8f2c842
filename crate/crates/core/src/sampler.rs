//! Reverse-process samplers: ancestral and deterministic DDIM steps, full
//! chain generation, and masked inpainting ("healing") of latents.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, predict_mu, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::randn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseKind {
    Ancestral,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseConfig {
    pub kind: ReverseKind,
    pub t_start: usize,
    pub num_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl ReverseConfig {
    pub fn ancestral(t_start: usize, seed: u64) -> Self {
        Self {
            kind: ReverseKind::Ancestral,
            t_start,
            num_steps: t_start,
            eta: 0.0,
            seed,
        }
    }

    pub fn ddim(t_start: usize, num_steps: usize, seed: u64) -> Self {
        Self {
            kind: ReverseKind::Ddim,
            t_start,
            num_steps,
            eta: 0.0,
            seed,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > self.t_start || self.t_start > schedule.steps() {
            return Err(Error::Parameter(format!(
                "need 1 <= num_steps ({}) <= t_start ({}) <= T ({})",
                self.num_steps,
                self.t_start,
                schedule.steps()
            )));
        }
        match self.kind {
            ReverseKind::Ancestral if self.num_steps != self.t_start => Err(Error::Parameter(format!(
                "ancestral sampling visits every step: num_steps must equal t_start ({}), got {}",
                self.t_start, self.num_steps
            ))),
            ReverseKind::Ddim if self.eta != 0.0 => Err(Error::Parameter(format!(
                "only deterministic DDIM (eta = 0) is supported, got eta = {}",
                self.eta
            ))),
            _ => Ok(()),
        }
    }

    /// Timesteps visited, from `t_start` down to 0 inclusive.
    pub fn timesteps(&self) -> Vec<usize> {
        match self.kind {
            ReverseKind::Ancestral => (0..=self.t_start).rev().collect(),
            ReverseKind::Ddim => ddim_timesteps(self.t_start, self.num_steps),
        }
    }
}

/// `num_steps + 1` evenly spaced timesteps from `t_start` to 0.
pub fn ddim_timesteps(t_start: usize, num_steps: usize) -> Vec<usize> {
    let n = num_steps.max(1);
    (0..=n)
        .map(|i| ((t_start * (n - i)) as f64 / n as f64).round() as usize)
        .collect()
}

/// Binary latent-resolution mask, broadcast over channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl LatentMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {} values for {height}x{width}",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    /// Stacks masks into a `(B, 1, h, w)` f32 tensor of zeros and ones.
    pub fn stack(masks: &[LatentMask], device: &Device) -> Result<Tensor> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Parameter("no masks to stack".into()))?;
        let mut v = Vec::with_capacity(masks.len() * first.values.len());
        for m in masks {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::Shape("masks in a batch must share one size".into()));
            }
            v.extend(m.values.iter().map(|&b| if b { 1f32 } else { 0.0 }));
        }
        Ok(Tensor::from_vec(v, (masks.len(), 1, first.height, first.width), device)?)
    }
}

/// `z_{t−1} = μ_θ(z_t, t) + √β̃_t · noise`; the terminal step returns `μ_θ`.
pub fn ancestral_step(
    zt: &Tensor,
    t: usize,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let mu = predict_mu(zt, t, model, schedule)?;
    if t == 1 {
        return Ok(mu);
    }
    let sigma = schedule.posterior_variance(t).sqrt();
    Ok((mu + noise.affine(sigma, 0.0)?)?)
}

/// Deterministic DDIM jump from `t` to `t_prev < t`.
pub fn ddim_step(
    zt: &Tensor,
    t: usize,
    t_prev: usize,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Domain(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let eps = model.predict_noise_at(zt, t)?;
    let ab = schedule.alpha_bar(t);
    let z0_hat = ((zt - eps.affine((1.0 - ab).sqrt(), 0.0)?)? * (1.0 / ab.sqrt()))?;
    if t_prev == 0 {
        return Ok(z0_hat);
    }
    let ab_prev = schedule.alpha_bar(t_prev);
    Ok((z0_hat.affine(ab_prev.sqrt(), 0.0)? + eps.affine((1.0 - ab_prev).sqrt(), 0.0)?)?)
}

/// One independent noise stream per batch element.
struct NoiseStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl NoiseStreams {
    fn new(seeds: &[u64]) -> Self {
        Self {
            rngs: seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect(),
        }
    }

    fn draw(&mut self, like: &Tensor) -> Result<Tensor> {
        let dims = like.dims();
        let mut per_item = dims.to_vec();
        per_item[0] = 1;
        let parts = self
            .rngs
            .iter_mut()
            .map(|rng| randn(rng, &per_item, like.device()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?.to_dtype(like.dtype())?)
    }
}

/// Per-element seeds derived from the config seed and batch position.
pub fn batch_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| crate::derive_seed(seed, &format!("item-{i}"))).collect()
}

/// Samples latents of `shape` from pure noise at `t_start` down to 0.
pub fn generate(
    shape: &[usize],
    config: &ReverseConfig,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    device: &Device,
) -> Result<Tensor> {
    config.validate(schedule)?;
    let mut streams = NoiseStreams::new(&batch_seeds(config.seed, shape[0]));
    let like = Tensor::zeros(shape, DType::F32, device)?;
    let mut z = streams.draw(&like)?;
    let ts = config.timesteps();
    for pair in ts.windows(2) {
        z = match config.kind {
            ReverseKind::Ancestral => {
                let noise = streams.draw(&z)?;
                ancestral_step(&z, pair[0], model, schedule, &noise)?
            }
            ReverseKind::Ddim => ddim_step(&z, pair[0], pair[1], model, schedule)?,
        }
        // drop the autograd history, or every step's activations stay alive
        .detach();
    }
    Ok(z)
}

/// Inpaints the masked cells of `z0` (`(B, C, h, w)`, mask `(B, 1, h, w)`),
/// with per-element seeds derived from `config.seed`.
pub fn heal_inpaint(
    z0: &Tensor,
    mask: &Tensor,
    config: &ReverseConfig,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let seeds = batch_seeds(config.seed, z0.dim(0)?);
    heal_inpaint_seeded(z0, mask, config, model, schedule, &seeds)
}

/// [`heal_inpaint`] with an explicit noise seed for every batch element.
///
/// Before each reverse step the unmasked cells are overwritten by the
/// original forward-diffused to the current `t` with fresh noise. The result
/// keeps unmasked cells bit-identical to `z0`.
pub fn heal_inpaint_seeded(
    z0: &Tensor,
    mask: &Tensor,
    config: &ReverseConfig,
    model: &impl NoisePredictor,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Tensor> {
    config.validate(schedule)?;
    let (b, _, h, w) = z0.dims4()?;
    let mdims = mask.dims4()?;
    if mdims != (b, 1, h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match latent batch ({b}, 1, {h}, {w})",
            mask.dims()
        )));
    }
    if seeds.len() != b {
        return Err(Error::Shape(format!("{} seeds for batch of {b}", seeds.len())));
    }
    let keep = mask.ne(0f32)?.broadcast_as(z0.shape())?.contiguous()?;
    if keep.to_dtype(DType::F32)?.sum_all()?.to_scalar::<f32>()? == 0.0 {
        return Ok(z0.clone());
    }
    let m = keep.to_dtype(z0.dtype())?;
    let inv = (1.0 - &m)?;

    let mut streams = NoiseStreams::new(seeds);
    let ts = config.timesteps();
    let mut z = forward_sample(z0, ts[0], &streams.draw(z0)?, schedule)?;
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let known = forward_sample(z0, t, &streams.draw(z0)?, schedule)?;
        let input = ((&m * &z)? + (&inv * &known)?)?;
        z = match config.kind {
            ReverseKind::Ancestral => {
                let noise = streams.draw(z0)?;
                ancestral_step(&input, t, model, schedule, &noise)?
            }
            ReverseKind::Ddim => ddim_step(&input, t, t_prev, model, schedule)?,
        }
        .detach();
    }
    Ok(keep.where_cond(&z, z0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{mean_from_noise, posterior_params};

    /// Returns the noise that maps a fixed `z0` to the given `z_t`.
    struct ExactNoise {
        z0: Tensor,
        schedule: NoiseSchedule,
    }

    impl NoisePredictor for ExactNoise {
        fn predict_noise(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor> {
            let ab = self.schedule.alpha_bar(t[0]);
            Ok(((zt - self.z0.affine(ab.sqrt(), 0.0)?)? * (1.0 / (1.0 - ab).sqrt()))?)
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, zt: &Tensor, _t: &[usize]) -> Result<Tensor> {
            Ok(zt.zeros_like()?)
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn vec(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    fn latent(seed: u64, dims: &[usize]) -> Tensor {
        randn(&mut ChaCha8Rng::seed_from_u64(seed), dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn ddim_schedule_decreases_to_zero() {
        let ts = ddim_timesteps(500, 50);
        assert_eq!(ts.len(), 51);
        assert_eq!((ts[0], ts[1], ts[50]), (500, 490, 0));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let odd = ddim_timesteps(37, 37);
        assert_eq!(odd, (0..=37).rev().collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        let s = sched();
        ReverseConfig::ancestral(500, 0).validate(&s).unwrap();
        ReverseConfig::ddim(500, 50, 0).validate(&s).unwrap();
        assert!(ReverseConfig::ddim(500, 0, 0).validate(&s).is_err());
        assert!(ReverseConfig::ddim(500, 501, 0).validate(&s).is_err());
        assert!(ReverseConfig::ddim(1001, 50, 0).validate(&s).is_err());
        let mut a = ReverseConfig::ancestral(500, 0);
        a.num_steps = 50;
        assert!(a.validate(&s).is_err());
        let mut d = ReverseConfig::ddim(500, 50, 0);
        d.eta = 0.5;
        assert!(d.validate(&s).is_err());
    }

    #[test]
    fn terminal_ancestral_step_is_the_mean() {
        let s = sched();
        let z = latent(1, &[1, 2, 3, 3]);
        let noise = latent(2, &[1, 2, 3, 3]);
        let out = ancestral_step(&z, 1, &Zero, &s, &noise).unwrap();
        let mu = mean_from_noise(&z, 1, &z.zeros_like().unwrap(), &s).unwrap();
        assert_eq!(vec(&out), vec(&mu));
    }

    #[test]
    fn oracle_ancestral_step_without_noise_is_posterior_mean() {
        let s = sched();
        let z0 = latent(3, &[1, 2, 4, 4]);
        let zt = forward_sample(&z0, 300, &latent(4, &[1, 2, 4, 4]), &s).unwrap();
        let model = ExactNoise { z0: z0.clone(), schedule: s.clone() };
        let out = ancestral_step(&zt, 300, &model, &s, &zt.zeros_like().unwrap()).unwrap();
        let (mu_q, _) = posterior_params(&z0, &zt, 300, &s).unwrap();
        for (a, b) in vec(&out).iter().zip(vec(&mu_q)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn oracle_ddim_inverts_exactly() {
        let s = sched();
        let z0 = latent(5, &[2, 3, 4, 4]);
        let zt = forward_sample(&z0, 500, &latent(6, &[2, 3, 4, 4]), &s).unwrap();
        let model = ExactNoise { z0: z0.clone(), schedule: s.clone() };
        let out = ddim_step(&zt, 500, 0, &model, &s).unwrap();
        for (a, b) in vec(&out).iter().zip(vec(&z0)) {
            assert!((a - b).abs() < 1e-4, "{a} {b}");
        }
        assert!(matches!(ddim_step(&zt, 10, 10, &model, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn oracle_ancestral_chain_recovers_origin() {
        // Each posterior step adds √β̃_t noise; with the exact mean the chain
        // still contracts to z0, so only the last few small variances remain.
        let s = sched();
        let z0 = latent(7, &[1, 1, 4, 4]);
        let model = ExactNoise { z0: z0.clone(), schedule: s.clone() };
        let mask = Tensor::ones((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let out = heal_inpaint(&z0, &mask, &ReverseConfig::ancestral(100, 3), &model, &s).unwrap();
        let bound = 6.0 * s.posterior_variance(2).sqrt();
        for (a, b) in vec(&out).iter().zip(vec(&z0)) {
            assert!((a - b).abs() < bound.max(1e-2), "{a} {b}");
        }
    }

    #[test]
    fn unmasked_cells_are_bit_identical() {
        let s = sched();
        let z0 = latent(8, &[2, 3, 4, 4]);
        let mut m = vec![0f32; 32];
        for i in [0usize, 5, 6, 17, 31] {
            m[i] = 1.0;
        }
        let mask = Tensor::from_vec(m.clone(), (2, 1, 4, 4), &Device::Cpu).unwrap();
        for cfg in [ReverseConfig::ancestral(20, 1), ReverseConfig::ddim(20, 5, 1)] {
            let out = heal_inpaint(&z0, &mask, &cfg, &Zero, &s).unwrap();
            let (o, z) = (
                out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                z0.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            );
            let mut changed = 0;
            for b in 0..2 {
                for c in 0..3 {
                    for p in 0..16 {
                        let i = (b * 3 + c) * 16 + p;
                        if m[b * 16 + p] == 0.0 {
                            assert_eq!(o[i].to_bits(), z[i].to_bits());
                        } else if o[i] != z[i] {
                            changed += 1;
                        }
                    }
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn empty_mask_returns_input_and_seeds_fix_output() {
        let s = sched();
        let z0 = latent(9, &[1, 2, 4, 4]);
        let zero = Tensor::zeros((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let cfg = ReverseConfig::ancestral(10, 4);
        assert_eq!(vec(&heal_inpaint(&z0, &zero, &cfg, &Zero, &s).unwrap()), vec(&z0));
        let one = Tensor::ones((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let a = heal_inpaint(&z0, &one, &cfg, &Zero, &s).unwrap();
        let b = heal_inpaint(&z0, &one, &cfg, &Zero, &s).unwrap();
        assert_eq!(vec(&a), vec(&b));
        let bad = Tensor::ones((1, 1, 2, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(heal_inpaint(&z0, &bad, &cfg, &Zero, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn per_item_seeds_make_results_batch_independent() {
        let s = sched();
        let z0 = latent(10, &[3, 2, 4, 4]);
        let one = Tensor::ones((3, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let cfg = ReverseConfig::ancestral(10, 4);
        let seeds = [11u64, 12, 13];
        let all = heal_inpaint_seeded(&z0, &one, &cfg, &Zero, &s, &seeds).unwrap();
        let single = heal_inpaint_seeded(
            &z0.narrow(0, 1, 1).unwrap(),
            &one.narrow(0, 1, 1).unwrap(),
            &cfg,
            &Zero,
            &s,
            &seeds[1..2],
        )
        .unwrap();
        assert_eq!(vec(&all.narrow(0, 1, 1).unwrap()), vec(&single));
    }

    #[test]
    fn mask_stacking() {
        let a = LatentMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let t = LatentMask::stack(&[a.clone(), LatentMask::filled(2, 2, false)], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 1, 2, 2]);
        assert_eq!(vec(&t), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.count(), 2);
        assert!(LatentMask::new(2, 2, vec![true]).is_err());
    }
}
