//! AdamW with decoupled weight decay and inspectable moment state.

use std::collections::BTreeMap;

use candle::backprop::GradStore;
use candle::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
        }
    }
}

#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Param)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    /// Only trainable params are registered.
    pub fn new(params: Vec<(String, Param)>, cfg: AdamWConfig) -> Result<Self> {
        let params: Vec<_> = params.into_iter().filter(|(_, p)| p.trainable()).collect();
        let zeros = |p: &Param| p.var().zeros_like();
        let m = params.iter().map(|(_, p)| zeros(p)).collect::<candle::Result<Vec<_>>>()?;
        let v = params.iter().map(|(_, p)| zeros(p)).collect::<candle::Result<Vec<_>>>()?;
        Ok(Self { cfg, params, m, v, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Global L2 norm of the gradients of registered params.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, p) in &self.params {
            if let Some(g) = grads.get(p.var()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let clip = match self.cfg.grad_clip {
            Some(max) => {
                let norm = self.grad_norm(grads)?;
                if norm > max {
                    max / (norm + 1e-12)
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.var()) else { continue };
            let g = if clip != 1.0 { (g * clip)? } else { g.clone() };
            let mut theta = p.var().as_tensor().detach();
            if p.decay() && weight_decay > 0.0 {
                theta = (theta * (1.0 - lr * weight_decay))?;
            }
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            p.var().set(&(theta - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// First and second moments keyed by param name.
    pub fn state(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        let collect = |src: &[Tensor]| {
            self.params
                .iter()
                .zip(src)
                .map(|((n, _), t)| (n.clone(), t.clone()))
                .collect()
        };
        (collect(&self.m), collect(&self.v))
    }

    pub fn restore(&mut self, m: &BTreeMap<String, Tensor>, v: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            let (Some(mi), Some(vi)) = (m.get(name), v.get(name)) else {
                return Err(Error::Checkpoint(format!("optimizer state missing for `{name}`")));
            };
            if mi.dims() != p.var().dims() || vi.dims() != p.var().dims() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for `{name}`")));
            }
            self.m[i] = mi.to_dtype(p.var().dtype())?;
            self.v[i] = vi.to_dtype(p.var().dtype())?;
        }
        self.steps = steps;
        Ok(())
    }
}
