//! Small differentiable building blocks shared by the backbone, the fusion
//! module and the head. Everything is composed from primitive tensor ops so
//! that backpropagation works at any float dtype.

use candle::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// A named model array registered with the optimizer and the checkpoint.
#[derive(Debug, Clone)]
pub struct Param {
    var: Var,
    trainable: bool,
    decay: bool,
}

impl Param {
    pub fn new(tensor: Tensor, trainable: bool, decay: bool) -> Result<Self> {
        Ok(Self {
            var: Var::from_tensor(&tensor)?,
            trainable,
            decay,
        })
    }

    /// Tensor used in forward passes. Frozen params are detached so no
    /// gradient is tracked for them.
    pub fn tensor(&self) -> Tensor {
        if self.trainable {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Whether decoupled weight decay applies to this array.
    pub fn decay(&self) -> bool {
        self.decay
    }

    pub fn set(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.var.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: expected {:?}, got {:?}",
                self.var.dims(),
                value.dims()
            )));
        }
        self.var.set(&value.to_dtype(self.var.dtype())?)?;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.var.elem_count()
    }
}

/// Anything that owns named [`Param`]s.
pub trait Parameterized {
    /// Every param with its fully qualified name, in a stable order.
    fn named_params(&self) -> Vec<(String, Param)>;
}

/// Trainable affine map; weight is stored `out × in` like a dense layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn init(
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        std: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            weight: Param::new(normal(rng, (d_out, d_in), std, dtype, device)?, true, true)?,
            bias: Param::new(Tensor::zeros(d_out, dtype, device)?, true, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight.tensor(), Some(&self.bias.tensor()))
    }

    pub fn in_dim(&self) -> usize {
        self.weight.var().dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.var().dims()[0]
    }

    pub(crate) fn push_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Layer normalization over the channel axis with learnable affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            weight: Param::new(Tensor::ones(dim, dtype, device)?, true, false)?,
            bias: Param::new(Tensor::zeros(dim, dtype, device)?, true, false)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.weight.tensor(), &self.bias.tensor(), self.eps)
    }

    pub(crate) fn push_params(&self, prefix: &str, out: &mut Vec<(String, Param)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// `x · wᵀ + b` over the last axis of `x`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (d_out, d_in) = weight.dims2()?;
    let last = x.dim(D::Minus1)?;
    if last != d_in {
        return Err(Error::RejectedInput(format!(
            "linear expects width {d_in}, got {last}"
        )));
    }
    let mut out_shape = x.dims().to_vec();
    let rows: usize = out_shape[..out_shape.len() - 1].iter().product();
    *out_shape.last_mut().unwrap() = d_out;
    let y = x.reshape((rows, d_in))?.matmul(&weight.t()?)?.reshape(out_shape)?;
    let y = match bias {
        Some(b) => {
            if b.dims1()? != d_out {
                return Err(Error::RejectedInput("bias width mismatch".into()));
            }
            y.broadcast_add(b)?
        }
        None => y,
    };
    Ok(y)
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// Softmax over the last axis. The max shift is detached; softmax is
/// shift-invariant so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// GELU in the exact Gaussian-CDF form.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    // Composed from erf: the fused op's backward uses a truncated 1/sqrt(2*pi).
    let cdf = ((x / std::f64::consts::SQRT_2)?.erf()? + 1.0)?;
    Ok(((x * 0.5)? * cdf)?)
}

/// `x · σ(1.702 x)`, the activation used by the original CLIP vision tower.
pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok((x * sigmoid(&x.affine(1.702, 0.0)?)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn normal(
    rng: &mut ChaCha8Rng,
    shape: impl Into<candle::Shape>,
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let dist = Normal::new(0.0f64, std).map_err(|e| Error::Config(e.to_string()))?;
    let values: Vec<f64> = (0..shape.elem_count()).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Single-precision normal draws for very large arrays.
pub fn normal_f32(
    rng: &mut ChaCha8Rng,
    shape: impl Into<candle::Shape>,
    std: f32,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let dist = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
    let values: Vec<f32> = (0..shape.elem_count()).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?)
}

pub fn uniform(
    rng: &mut ChaCha8Rng,
    shape: impl Into<candle::Shape>,
    bound: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
    let values: Vec<f64> = (0..shape.elem_count()).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Inverted-dropout mask drawn from the caller's stream: entries are
/// `0` with probability `p` and `1/(1-p)` otherwise.
pub fn dropout_mask(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    p: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let values: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Forward-pass mode. Training carries the stream that drives dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Multi-head scaled dot-product attention on already-projected inputs.
///
/// `q` is `(B, Tq, D)`, `k` and `v` are `(B, Tk, D)`. Returns the
/// concatenated head outputs `(B, Tq, D)` and the attention weights
/// `(B, heads, Tq, Tk)`.
pub fn attention_core(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (b, tq, d) = q.dims3()?;
    let (bk, tk, dk) = k.dims3()?;
    if d != dk || v.dims3()? != (bk, tk, dk) || b != bk {
        return Err(Error::RejectedInput(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let scores = (qh.matmul(&kh.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let weights = softmax_last(&scores)?;
    let out = weights
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, tq, d))?;
    Ok((out, weights))
}
