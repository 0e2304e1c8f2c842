//! Minimal neural-network building blocks on top of candle.
//!
//! Parameters live in a [`ParamStore`] that owns a seeded RNG, so weight
//! initialisation is reproducible (candle's own `randn` draws from the thread
//! RNG). Layers hold plain tensors that alias the store's variables.

mod adam;
mod conv;

pub use adam::Adam;
pub use conv::conv2d;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Named, trainable parameters with deterministic initialisation.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new variable and returns a tensor aliasing it.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let b = bound as f32;
                (0..n).map(|_| self.rng.random_range(-b..=b)).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Current parameter values keyed by name.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`, which must contain each
    /// registered name with a matching shape.
    pub fn import(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(DType::F32)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// Draws a standard-normal `f32` tensor from `rng`.
pub fn randn(rng: &mut impl Rng, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Nearest-neighbour ×2 upsampling of an NCHW tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self::with_init(store, name, c_in, c_out, kernel, stride, Init::Uniform(bound))
    }

    /// Zero-initialised convolution, used for residual and output projections.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::with_init(store, name, c_in, c_out, kernel, 1, Init::Zeros)
    }

    fn with_init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let bias_bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.param(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], init)?;
        let bias_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::Uniform(bias_bound),
        };
        let bias = store.param(&format!("{name}.bias"), &[c_out], bias_init)?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad: (kernel - 1) / 2,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        let c = self.bias.dim(0)?;
        y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(bound))?,
            bias: store.param(&format!("{name}.bias"), &[d_out], Init::Uniform(bound))?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Group normalisation with learned per-channel affine parameters.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let groups = [8, 4, 2, 1]
            .into_iter()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        let weight = store.param(&format!("{name}.weight"), &[channels], Init::Ones)?;
        let bias = store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?;
        Ok(Self {
            inner: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.inner.forward(x)
    }
}
