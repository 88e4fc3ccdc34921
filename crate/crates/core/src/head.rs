//! Pooling, embedding projection and the real/fake classifier.

use candle::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Param, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    /// First token; only meaningful when the class token is kept.
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub width: usize,
    pub proj_dim: usize,
    pub pooling: Pooling,
    /// L2-normalize embeddings before the triplet loss and classifier.
    pub normalize: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            proj_dim: 512,
            pooling: Pooling::Mean,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cfg: HeadConfig,
    pub projection: Linear,
    pub classifier: Linear,
}

impl HeadParams {
    pub fn init(cfg: &HeadConfig, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.proj_dim < 2 {
            return Err(Error::Config("projection width must be at least 2".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            projection: Linear::init(rng, cfg.width, cfg.proj_dim, (cfg.width as f64).sqrt().recip(), dtype, device)?,
            classifier: Linear::init(rng, cfg.proj_dim, 1, (cfg.proj_dim as f64).sqrt().recip(), dtype, device)?,
        })
    }
}

impl Parameterized for HeadParams {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.projection.push_params("head.projection", &mut out);
        self.classifier.push_params("head.classifier", &mut out);
        out
    }
}

/// Reduces `(B, N, D)` tokens to `(B, D)`.
pub fn pool(tokens: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let (_, n, _) = tokens
        .dims3()
        .map_err(|_| Error::RejectedInput(format!("pool expects (B, N, D), got {:?}", tokens.dims())))?;
    if n == 0 {
        return Err(Error::RejectedInput("cannot pool an empty token axis".into()));
    }
    Ok(match pooling {
        Pooling::Mean => tokens.mean(1)?,
        Pooling::First => tokens.narrow(1, 0, 1)?.squeeze(1)?,
    })
}

/// Affine projection into the metric space: `(B, D) → (B, D_proj)`.
pub fn embed(pooled: &Tensor, params: &HeadParams) -> Result<Tensor> {
    let e = params.projection.forward(pooled)?;
    if params.cfg.normalize {
        let norm = e.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
        Ok(e.broadcast_div(&norm)?)
    } else {
        Ok(e)
    }
}

/// One logit per embedding: `(B, D_proj) → (B,)`.
pub fn classify(embedding: &Tensor, params: &HeadParams) -> Result<Tensor> {
    Ok(params.classifier.forward(embedding)?.squeeze(D::Minus1)?)
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
