//! ε-prediction U-Net for latent diffusion.
//!
//! Residual blocks with group norm and SiLU, a sinusoidal timestep
//! embedding injected into every residual block, stride-2 convolutions for
//! downsampling, nearest-neighbour upsampling, and single-head self-attention
//! at the coarsest resolution.

use candle_core::{Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Conv2d, GroupNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; one level per entry.
    pub channel_mult: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            base_width: 64,
            channel_mult: vec![1, 2, 2],
            res_blocks_per_level: 1,
            attention: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_mult.is_empty() || self.base_width == 0 || self.latent_channels == 0 {
            return Err(Error::Parameter("U-Net needs at least one level and nonzero widths".into()));
        }
        if self.res_blocks_per_level == 0 {
            return Err(Error::Parameter("U-Net needs at least one residual block per level".into()));
        }
        Ok(())
    }

    /// Latent side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mult.len() - 1)
    }
}

/// `[sin(t·ω_i), cos(t·ω_i)]` with `ω_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let ti = ti as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f32>, Vec<f32>) = freqs
            .map(|w| ((ti * w).sin() as f32, (ti * w).cos() as f32))
            .unzip();
        data.extend(sin);
        data.extend(cos);
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, c_out)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels)?,
            qkv: Conv2d::new(store, &format!("{name}.qkv"), channels, 3 * channels, 1, 1)?,
            proj: Conv2d::zeroed(store, &format!("{name}.proj"), channels, channels, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let qkv = qkv.reshape((b, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        let scores = (q.matmul(&k)? * (1.0 / (c as f64).sqrt()))?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        // (B, C, HW) x (B, HW, HW)^T -> (B, C, HW)
        let out = v.matmul(&weights.transpose(1, 2)?.contiguous()?)?;
        let out = self.proj.forward(&out.reshape((b, c, h, w))?)?;
        Ok((x + out)?)
    }
}

pub struct UNet {
    config: UNetConfig,
    store: ParamStore,
    temb_dim: usize,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<Vec<ResBlock>>,
    downsamplers: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: Option<Attention>,
    mid2: ResBlock,
    up_blocks: Vec<Vec<ResBlock>>,
    upsamplers: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, device);
        let s = &mut store;
        let base = config.base_width;
        let widths: Vec<usize> = config.channel_mult.iter().map(|m| m * base).collect();
        let temb_dim = 4 * base;
        let temb1 = Linear::new(s, "temb.0", base, temb_dim)?;
        let temb2 = Linear::new(s, "temb.1", temb_dim, temb_dim)?;
        let conv_in = Conv2d::new(s, "conv_in", config.latent_channels, base, 3, 1)?;

        let mut down_blocks = Vec::new();
        let mut downsamplers = Vec::new();
        let mut skip_widths = Vec::new();
        let mut ch = base;
        for (level, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for i in 0..config.res_blocks_per_level {
                blocks.push(ResBlock::new(s, &format!("down.{level}.{i}"), ch, w, temb_dim)?);
                ch = w;
                skip_widths.push(ch);
            }
            down_blocks.push(blocks);
            if level + 1 < widths.len() {
                downsamplers.push(Conv2d::new(s, &format!("down.{level}.downsample"), ch, ch, 3, 2)?);
            }
        }

        let mid1 = ResBlock::new(s, "mid.0", ch, ch, temb_dim)?;
        let mid_attn = if config.attention {
            Some(Attention::new(s, "mid.attn", ch)?)
        } else {
            None
        };
        let mid2 = ResBlock::new(s, "mid.1", ch, ch, temb_dim)?;

        let mut up_blocks = Vec::new();
        let mut upsamplers = Vec::new();
        for (level, &w) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for i in 0..config.res_blocks_per_level {
                let skip = skip_widths.pop().expect("one skip per down block");
                blocks.push(ResBlock::new(s, &format!("up.{level}.{i}"), ch + skip, w, temb_dim)?);
                ch = w;
            }
            up_blocks.push(blocks);
            if level > 0 {
                upsamplers.push(Conv2d::new(s, &format!("up.{level}.upsample"), ch, ch, 3, 1)?);
            }
        }
        let norm_out = GroupNorm::new(s, "norm_out", ch)?;
        let conv_out = Conv2d::zeroed(s, "conv_out", ch, config.latent_channels, 3)?;

        Ok(Self {
            config,
            store,
            temb_dim,
            temb1,
            temb2,
            conv_in,
            down_blocks,
            downsamplers,
            mid1,
            mid_attn,
            mid2,
            up_blocks,
            upsamplers,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "U-Net expects {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} not divisible by {m}")));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", t.len())));
        }
        let temb = timestep_embedding(t, self.config.base_width, x.device())?.to_dtype(x.dtype())?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;
        debug_assert_eq!(temb.dim(1)?, self.temb_dim);

        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        for (level, blocks) in self.down_blocks.iter().enumerate() {
            for block in blocks {
                hcur = block.forward(&hcur, &temb)?;
                skips.push(hcur.clone());
            }
            if let Some(down) = self.downsamplers.get(level) {
                hcur = down.forward(&hcur)?;
            }
        }
        hcur = self.mid1.forward(&hcur, &temb)?;
        if let Some(attn) = &self.mid_attn {
            hcur = attn.forward(&hcur)?;
        }
        hcur = self.mid2.forward(&hcur, &temb)?;
        for (i, blocks) in self.up_blocks.iter().enumerate() {
            for block in blocks {
                let skip = skips.pop().expect("skip stack matches blocks");
                hcur = block.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &temb)?;
            }
            if let Some(up) = self.upsamplers.get(i) {
                hcur = up.forward(&upsample2x(&hcur)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)?)
    }
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, zt: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.forward(zt, t)
    }
}
