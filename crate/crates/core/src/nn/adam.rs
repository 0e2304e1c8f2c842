use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Adam with optional global-norm gradient clipping.
///
/// Unlike `candle_nn::AdamW` the moment estimates can be exported and
/// restored, which makes interrupted training runs resumable bit-for-bit.
pub struct Adam {
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(params: &BTreeMap<String, Var>, lr: f64) -> Result<Self> {
        let params: Vec<(String, Var)> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let first = params
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            params,
            first,
            second,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        })
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the pre-clipping global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        let mut gs = Vec::with_capacity(self.params.len());
        for (_, var) in &self.params {
            let g = grads.get(var).cloned();
            if let Some(g) = &g {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
            gs.push(g);
        }
        let norm = sq.sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, ((_, var), g)) in self.params.iter().zip(gs).enumerate() {
            let Some(g) = g else { continue };
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g };
            let m = ((&self.first[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(norm)
    }

    /// Moment estimates and step counter, keyed for checkpoint storage.
    pub fn export_state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("adam.m.{name}"), self.first[i].clone());
            out.insert(format!("adam.v.{name}"), self.second[i].clone());
        }
        let device = self.first.first().map(|t| t.device().clone()).unwrap_or(candle_core::Device::Cpu);
        out.insert(
            "adam.step".to_string(),
            Tensor::new(&[self.step as f32], &device)?,
        );
        Ok(out)
    }

    pub fn import_state(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, (name, _)) in self.params.iter().enumerate() {
            let m = state
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))?;
            let v = state
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))?;
            self.first[i] = m.clone();
            self.second[i] = v.clone();
        }
        let step = state
            .get("adam.step")
            .ok_or_else(|| Error::Checkpoint("missing optimizer step".into()))?
            .to_vec1::<f32>()?[0];
        self.step = step as usize;
        Ok(())
    }
}
