//! Deep/shallow feature fusion.
//!
//! The deepest tap queries the concatenation of all shallower taps through
//! cross-attention; the result is refined by an MLP and a gated
//! self-attention branch, then added back onto the deep feature through a
//! per-channel gate:
//!
//! ```text
//! X        = concat(F_1 .. F_{L-1})            (token axis)
//! F_ca     = Attn(norm_c(F_L), norm_c(X))
//! F_mlp    = MLP(norm_m(F_ca))
//! F'_sa    = Attn(norm_s(F_mlp), norm_s(F_mlp))
//! F_sa     = F_mlp + a2 ⊙ F'_sa
//! F_visual = F_L  + a1 ⊙ F_sa
//! ```
//!
//! Both gates start at zero, so an untrained fuser returns `F_L` unchanged.

use candle::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, Linear, Param, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeeFuserConfig {
    /// Must match the backbone width.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
}

impl Default for DeeFuserConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            heads: 8,
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
        }
    }
}

impl DeeFuserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("fusion MLP ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Query/key/value/output projections of one attention site.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl AttentionParams {
    fn init(rng: &mut ChaCha8Rng, d: usize, heads: usize, dtype: DType, device: &Device) -> Result<Self> {
        let std = (d as f64).sqrt().recip();
        Ok(Self {
            q: Linear::init(rng, d, d, std, dtype, device)?,
            k: Linear::init(rng, d, d, std, dtype, device)?,
            v: Linear::init(rng, d, d, std, dtype, device)?,
            out: Linear::init(rng, d, d, std, dtype, device)?,
            heads,
        })
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        self.q.push_params(&format!("{prefix}.q"), out);
        self.k.push_params(&format!("{prefix}.k"), out);
        self.v.push_params(&format!("{prefix}.v"), out);
        self.out.push_params(&format!("{prefix}.out"), out);
    }
}

/// Two-layer GELU MLP, `D → ratio·D → D`.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct DeeFuserParams {
    pub cfg: DeeFuserConfig,
    pub norm_cross: LayerNorm,
    pub cross_attn: AttentionParams,
    pub norm_mlp: LayerNorm,
    pub mlp: MlpParams,
    pub norm_self: LayerNorm,
    pub self_attn: AttentionParams,
    /// Gate on the fused residual, length `D`.
    pub alpha1: Param,
    /// Gate on the self-attention branch, length `D`.
    pub alpha2: Param,
}

impl DeeFuserParams {
    pub fn init(cfg: &DeeFuserConfig, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let hidden = cfg.mlp_ratio * d;
        let eps = cfg.layer_norm_eps;
        let norm_cross = LayerNorm::new(d, eps, dtype, device)?;
        let cross_attn = AttentionParams::init(rng, d, cfg.heads, dtype, device)?;
        let norm_mlp = LayerNorm::new(d, eps, dtype, device)?;
        let mlp = MlpParams {
            fc1: Linear::init(rng, d, hidden, (d as f64).sqrt().recip(), dtype, device)?,
            fc2: Linear::init(rng, hidden, d, (hidden as f64).sqrt().recip(), dtype, device)?,
        };
        let norm_self = LayerNorm::new(d, eps, dtype, device)?;
        let self_attn = AttentionParams::init(rng, d, cfg.heads, dtype, device)?;
        Ok(Self {
            cfg: cfg.clone(),
            norm_cross,
            cross_attn,
            norm_mlp,
            mlp,
            norm_self,
            self_attn,
            alpha1: Param::new(Tensor::zeros(d, dtype, device)?, true, false)?,
            alpha2: Param::new(Tensor::zeros(d, dtype, device)?, true, false)?,
        })
    }
}

impl Parameterized for DeeFuserParams {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.norm_cross.push_params("deefuser.norm_cross", &mut out);
        self.cross_attn.push_params("deefuser.cross_attn", &mut out);
        self.norm_mlp.push_params("deefuser.norm_mlp", &mut out);
        self.mlp.fc1.push_params("deefuser.mlp.fc1", &mut out);
        self.mlp.fc2.push_params("deefuser.mlp.fc2", &mut out);
        self.norm_self.push_params("deefuser.norm_self", &mut out);
        self.self_attn.push_params("deefuser.self_attn", &mut out);
        out.push(("deefuser.alpha1".into(), self.alpha1.clone()));
        out.push(("deefuser.alpha2".into(), self.alpha2.clone()));
        out
    }
}

/// Output of [`fuse`] with every intermediate, all `(B, N, D)`.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub visual: Tensor,
    pub cross: Tensor,
    pub mlp: Tensor,
    pub self_attn_raw: Tensor,
    pub refined: Tensor,
}

fn check_width(x: &Tensor, d: usize, what: &str) -> Result<()> {
    let w = x.dims().last().copied().unwrap_or(0);
    if x.rank() != 3 || w != d {
        return Err(Error::RejectedInput(format!(
            "{what} must be (B, T, {d}), got {:?}",
            x.dims()
        )));
    }
    Ok(())
}

/// Multi-head attention of `query` tokens over `context` tokens.
pub fn attention(query: &Tensor, context: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    Ok(attention_with_weights(query, context, params)?.0)
}

/// Like [`attention`], also returning the `(B, heads, Tq, Tk)` weights.
pub fn attention_with_weights(
    query: &Tensor,
    context: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let d = params.q.in_dim();
    check_width(query, d, "attention query")?;
    check_width(context, d, "attention context")?;
    let q = params.q.forward(query)?;
    let k = params.k.forward(context)?;
    let v = params.v.forward(context)?;
    let (heads_out, weights) = nn::attention_core(&q, &k, &v, params.heads)?;
    Ok((params.out.forward(&heads_out)?, weights))
}

pub fn mlp(x: &Tensor, params: &MlpParams) -> Result<Tensor> {
    let d = params.fc1.in_dim();
    if x.dims().last() != Some(&d) {
        return Err(Error::RejectedInput(format!(
            "MLP expects width {d}, got {:?}",
            x.dims()
        )));
    }
    params.fc2.forward(&nn::gelu(&params.fc1.forward(x)?)?)
}

/// Fuses a feature stack of `L ≥ 2` taps into `F_visual`.
pub fn fuse(stack: &FeatureStack, params: &DeeFuserParams) -> Result<FusedFeatures> {
    if stack.len() < 2 {
        return Err(Error::Config(format!(
            "fusion needs at least two tapped layers, got {}",
            stack.len()
        )));
    }
    let deep = stack.deep().expect("len >= 2");
    check_width(deep, params.cfg.width, "deep feature")?;
    if stack.layers.iter().any(|l| l.dims() != deep.dims()) {
        return Err(Error::RejectedInput("tapped layers differ in shape".into()));
    }
    let shallow = Tensor::cat(stack.shallow(), 1)?;

    let norm_deep = params.norm_cross.forward(deep)?;
    let norm_shallow = params.norm_cross.forward(&shallow)?;
    let cross = attention(&norm_deep, &norm_shallow, &params.cross_attn)?;
    let mlp_out = mlp(&params.norm_mlp.forward(&cross)?, &params.mlp)?;
    let normed = params.norm_self.forward(&mlp_out)?;
    let self_attn_raw = attention(&normed, &normed, &params.self_attn)?;
    let refined = (&mlp_out + self_attn_raw.broadcast_mul(&params.alpha2.tensor())?)?;
    let visual = (deep + refined.broadcast_mul(&params.alpha1.tensor())?)?;
    Ok(FusedFeatures {
        visual,
        cross,
        mlp: mlp_out,
        self_attn_raw,
        refined,
    })
}
