//! Triplet, BCE-with-logits and the weighted composite objective.

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::TripletBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    /// Plain sum over triplets, the unnormalized form.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the BCE term.
    pub lambda: f64,
    /// Clamp each triplet term at zero.
    pub hinge: bool,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 2.0,
            hinge: true,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("margin and lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `‖a−p‖² − ‖a−n‖² + margin` per triplet, hinged if configured. `(N,)`.
pub fn triplet_terms(anchors: &Tensor, positives: &Tensor, negatives: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let (n, d) = anchors.dims2()?;
    if positives.dims2()? != (n, d) || negatives.dims2()? != (n, d) {
        return Err(Error::RejectedInput(format!(
            "triplet shapes disagree: {:?}, {:?}, {:?}",
            anchors.dims(),
            positives.dims(),
            negatives.dims()
        )));
    }
    let ap = (anchors - positives)?.sqr()?.sum(1)?;
    let an = (anchors - negatives)?.sqr()?.sum(1)?;
    let terms = ((ap - an)? + cfg.margin)?;
    Ok(if cfg.hinge { terms.relu()? } else { terms })
}

/// Reduced triplet loss. An empty batch contributes zero.
pub fn triplet_loss(anchors: &Tensor, positives: &Tensor, negatives: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let n = anchors.dims().first().copied().unwrap_or(0);
    if n == 0 {
        log::warn!("triplet loss on an empty batch; contributing 0");
        return Ok(Tensor::zeros((), anchors.dtype(), anchors.device())?);
    }
    let terms = triplet_terms(anchors, positives, negatives, cfg)?;
    reduce(&terms, cfg.reduction)
}

/// Triplet loss over rows of `embeddings` selected by `batch`.
pub fn triplet_loss_indexed(embeddings: &Tensor, batch: &TripletBatch, cfg: &LossConfig) -> Result<Tensor> {
    if batch.is_empty() {
        return Ok(Tensor::zeros((), embeddings.dtype(), embeddings.device())?);
    }
    let dev = embeddings.device();
    let pick = |idx: Vec<u32>| -> Result<Tensor> {
        let len = idx.len();
        Ok(embeddings.index_select(&Tensor::from_vec(idx, len, dev)?, 0)?)
    };
    let (a, p, n) = batch.columns();
    triplet_loss(&pick(a)?, &pick(p)?, &pick(n)?, cfg)
}

fn reduce(terms: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let n = terms.dims1()?;
    let sum = terms.sum(0)?;
    Ok(match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => (sum / Tensor::new(n as f64, terms.device())?.to_dtype(terms.dtype())?)?,
    })
}

/// Per-sample `max(z,0) − z·y + ln(1 + e^{−|z|})`. Labels must be 0 or 1.
pub fn bce_terms(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let n = logits.dims1()?;
    if labels.dims1()? != n {
        return Err(Error::RejectedInput(format!(
            "{n} logits but {} labels",
            labels.dims1()?
        )));
    }
    let raw: Vec<f64> = labels.to_dtype(DType::F64)?.to_vec1()?;
    if let Some(bad) = raw.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::RejectedInput(format!("label {bad} is not 0 or 1")));
    }
    let labels = labels.to_dtype(logits.dtype())?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * labels)?)? + softplus)?)
}

/// Mean binary cross-entropy computed from raw logits.
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let terms = bce_terms(logits, labels)?;
    if terms.dims1()? == 0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    reduce(&terms, Reduction::Mean)
}

/// `l_triplet + λ·l_bce`; non-finite inputs signal divergence.
pub fn total_loss(l_triplet: &Tensor, l_bce: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let t = l_triplet.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let b = l_bce.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !t.is_finite() || !b.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            message: format!("non-finite loss (triplet {t}, bce {b})"),
            last_good: None,
        });
    }
    Ok((l_triplet + (l_bce * cfg.lambda)?)?)
}
