//! ViT image encoder with intermediate feature taps.
//!
//! The layout follows the CLIP vision tower: a non-overlapping patch
//! projection, a prepended class token, learned positions, a pre-encoder
//! layer norm, then pre-norm transformer blocks. Taps record the residual
//! stream after a block (before the final encoder norm) with the class token
//! removed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::lora::{AdaptedLinear, LoraTarget};
use crate::nn::{self, Mode};

/// Tap layers used by the detector: eleven shallow blocks plus the final one.
pub const DEFAULT_TAPS: [usize; 12] = [1, 3, 5, 8, 10, 13, 15, 17, 19, 21, 22, 23];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x·σ(1.702x)`, used by the released CLIP weights.
    QuickGelu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
    pub activation: Activation,
    pub toy: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::vit_l14()
    }
}

impl BackboneConfig {
    /// ViT-L/14 at 224 pixels.
    pub fn vit_l14() -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            depth: 24,
            width: 1024,
            heads: 16,
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
            activation: Activation::QuickGelu,
            toy: false,
        }
    }

    /// Small random-init geometry for tests and examples.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            depth: 2,
            width: 32,
            heads: 4,
            mlp_ratio: 4,
            layer_norm_eps: 1e-5,
            activation: Activation::QuickGelu,
            toy: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count `N`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Embedded input: `(B, N+1, D)` with the class token at position 0.
#[derive(Debug, Clone)]
pub struct TokenSequence(pub Tensor);

impl TokenSequence {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn seq_len(&self) -> usize {
        self.0.dims()[1]
    }
}

/// Tapped patch-token features, one `(B, N, D)` array per tap.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
    pub tap_indices: Vec<usize>,
}

impl FeatureStack {
    pub fn new(layers: Vec<Tensor>, tap_indices: Vec<usize>) -> Result<Self> {
        if layers.len() != tap_indices.len() {
            return Err(Error::RejectedInput(format!(
                "{} layers for {} tap indices",
                layers.len(),
                tap_indices.len()
            )));
        }
        if tap_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::RejectedInput("tap indices must be strictly increasing".into()));
        }
        if let Some(first) = layers.first() {
            if first.rank() != 3 {
                return Err(Error::RejectedInput("feature layers must be (B, N, D)".into()));
            }
            if layers.iter().any(|l| l.dims() != first.dims()) {
                return Err(Error::RejectedInput("feature layers differ in shape".into()));
            }
        }
        Ok(Self { layers, tap_indices })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// The deepest tap.
    pub fn deep(&self) -> Option<&Tensor> {
        self.layers.last()
    }

    pub fn shallow(&self) -> &[Tensor] {
        &self.layers[..self.layers.len().saturating_sub(1)]
    }
}

pub fn validate_taps(taps: &[usize], depth: usize) -> Result<()> {
    if taps.is_empty() {
        return Err(Error::Config("tap list is empty".into()));
    }
    if let Some(&bad) = taps.iter().find(|&&t| t >= depth) {
        return Err(Error::Config(format!(
            "tap index {bad} out of range for a {depth}-block backbone"
        )));
    }
    if taps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("tap indices must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    fn identity(dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            weight: Tensor::ones(dim, dtype, device)?,
            bias: Tensor::zeros(dim, dtype, device)?,
        })
    }

    fn forward(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        nn::layer_norm(x, &self.weight, &self.bias, eps)
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: Norm,
    pub q_proj: AdaptedLinear,
    pub k_proj: AdaptedLinear,
    pub v_proj: AdaptedLinear,
    pub out_proj: AdaptedLinear,
    norm2: Norm,
    pub fc1: AdaptedLinear,
    pub fc2: AdaptedLinear,
}

impl Block {
    pub fn projection(&self, target: LoraTarget) -> Result<&AdaptedLinear> {
        Ok(match target {
            LoraTarget::Query => &self.q_proj,
            LoraTarget::Key => &self.k_proj,
            LoraTarget::Value => &self.v_proj,
            LoraTarget::Output => &self.out_proj,
            LoraTarget::Fc1 => &self.fc1,
            LoraTarget::Fc2 => &self.fc2,
            LoraTarget::PatchEmbed => {
                return Err(Error::Config("patch_embed is not a block projection".into()))
            }
        })
    }

    pub fn projection_mut(&mut self, target: LoraTarget) -> Result<&mut AdaptedLinear> {
        Ok(match target {
            LoraTarget::Query => &mut self.q_proj,
            LoraTarget::Key => &mut self.k_proj,
            LoraTarget::Value => &mut self.v_proj,
            LoraTarget::Output => &mut self.out_proj,
            LoraTarget::Fc1 => &mut self.fc1,
            LoraTarget::Fc2 => &mut self.fc2,
            LoraTarget::PatchEmbed => {
                return Err(Error::Config("patch_embed is not a block projection".into()))
            }
        })
    }

    fn forward(&self, x: &Tensor, cfg: &BackboneConfig, mode: &mut Mode<'_>) -> Result<Tensor> {
        let h = self.norm1.forward(x, cfg.layer_norm_eps)?;
        let q = self.q_proj.forward(&h, mode)?;
        let k = self.k_proj.forward(&h, mode)?;
        let v = self.v_proj.forward(&h, mode)?;
        let (attn, _) = nn::attention_core(&q, &k, &v, cfg.heads)?;
        let x = (x + self.out_proj.forward(&attn, mode)?)?;
        let h = self.norm2.forward(&x, cfg.layer_norm_eps)?;
        let h = self.fc1.forward(&h, mode)?;
        let h = match cfg.activation {
            Activation::QuickGelu => nn::quick_gelu(&h)?,
            Activation::Gelu => nn::gelu(&h)?,
        };
        let h = self.fc2.forward(&h, mode)?;
        Ok((x + h)?)
    }
}

const BLOCK_LINEARS: [(&str, LoraTarget); 6] = [
    ("attn.q_proj", LoraTarget::Query),
    ("attn.k_proj", LoraTarget::Key),
    ("attn.v_proj", LoraTarget::Value),
    ("attn.out_proj", LoraTarget::Output),
    ("mlp.fc1", LoraTarget::Fc1),
    ("mlp.fc2", LoraTarget::Fc2),
];

/// Frozen ViT encoder. Only attached adapters are ever trained.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    device: Device,
    patch: AdaptedLinear,
    class_token: Tensor,
    positions: Tensor,
    pre_norm: Norm,
    blocks: Vec<Block>,
    post_norm: Norm,
}

impl Backbone {
    /// Randomly initialized encoder of any geometry, deterministic under `seed`.
    pub fn random_init(cfg: &BackboneConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let hidden = cfg.mlp_ratio * d;
        let mut draw = |shape: (usize, usize), fan_in: usize| -> Result<Tensor> {
            let std = (fan_in as f64).sqrt().recip();
            if dtype == DType::F32 {
                nn::normal_f32(&mut rng, shape, std as f32, device)
            } else {
                nn::normal(&mut rng, shape, std, dtype, device)
            }
        };
        let patch = AdaptedLinear::new(draw((d, cfg.patch_dim()), cfg.patch_dim())?, None);
        let class_token = draw((1, d), d)?.reshape(d)?;
        let positions = (draw((cfg.num_patches() + 1, d), d)? * 0.5)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let mut lin = |d_out: usize, d_in: usize| -> Result<AdaptedLinear> {
                let w = draw((d_out, d_in), d_in)?;
                Ok(AdaptedLinear::new(w, Some(Tensor::zeros(d_out, dtype, device)?)))
            };
            blocks.push(Block {
                norm1: Norm::identity(d, dtype, device)?,
                q_proj: lin(d, d)?,
                k_proj: lin(d, d)?,
                v_proj: lin(d, d)?,
                out_proj: lin(d, d)?,
                norm2: Norm::identity(d, dtype, device)?,
                fc1: lin(hidden, d)?,
                fc2: lin(d, hidden)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            device: device.clone(),
            patch,
            class_token,
            positions,
            pre_norm: Norm::identity(d, dtype, device)?,
            blocks,
            post_norm: Norm::identity(d, dtype, device)?,
        })
    }

    /// Small random-init test double; `cfg.toy` must be set.
    pub fn build_toy(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        if !cfg.toy {
            return Err(Error::Config("build_toy requires a toy configuration".into()));
        }
        Self::random_init(cfg, seed, DType::F32, &Device::Cpu)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.class_token.dtype()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub(crate) fn patch_projection_mut(&mut self) -> &mut AdaptedLinear {
        &mut self.patch
    }

    /// Every projection that can carry an adapter, keyed `{block}.{target}`
    /// or `patch_embed`.
    pub fn adapted_layers(&self) -> Vec<(String, &AdaptedLinear)> {
        let mut out = vec![("patch_embed".to_string(), &self.patch)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (_, t) in BLOCK_LINEARS {
                out.push((format!("{i}.{t}"), b.projection(t).expect("block target")));
            }
        }
        out
    }

    pub(crate) fn adapted_layers_mut(&mut self) -> Vec<(String, &mut AdaptedLinear)> {
        let mut out = vec![("patch_embed".to_string(), &mut self.patch)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let Block { q_proj, k_proj, v_proj, out_proj, fc1, fc2, .. } = b;
            for (t, l) in [
                (LoraTarget::Query, q_proj),
                (LoraTarget::Key, k_proj),
                (LoraTarget::Value, v_proj),
                (LoraTarget::Output, out_proj),
                (LoraTarget::Fc1, fc1),
                (LoraTarget::Fc2, fc2),
            ] {
                out.push((format!("{i}.{t}"), l));
            }
        }
        out
    }

    fn batch(&self, images: &Tensor) -> Result<Tensor> {
        let s = self.cfg.image_size;
        let images = match images.rank() {
            3 => images.unsqueeze(0)?,
            4 => images.clone(),
            _ => {
                return Err(Error::RejectedInput(format!(
                    "expected a 3×{s}×{s} image or a batch of them, got {:?}",
                    images.dims()
                )))
            }
        };
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != s || w != s {
            return Err(Error::RejectedInput(format!(
                "expected 3×{s}×{s} images, got {c}×{h}×{w}"
            )));
        }
        Ok(images.to_dtype(self.dtype())?)
    }

    /// Patch projection, class token and positions. Accepts `(3, S, S)` or
    /// `(B, 3, S, S)`.
    pub fn patch_embed(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<TokenSequence> {
        let images = self.batch(images)?;
        let b = images.dims()[0];
        let (g, p, d) = (self.cfg.grid(), self.cfg.patch_size, self.cfg.width);
        let patches = images
            .reshape((b, 3, g, p, g, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, g * g, 3 * p * p))?;
        let patches = self.patch.forward(&patches, mode)?;
        let cls = self.class_token.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let tokens = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.positions)?;
        Ok(TokenSequence(tokens))
    }

    /// Runs blocks `0..=last` and returns the full token sequence.
    pub fn forward_truncated(&self, images: &Tensor, last: usize, mode: &mut Mode<'_>) -> Result<Tensor> {
        validate_taps(&[last], self.cfg.depth)?;
        let mut x = self.encoder_input(images, mode)?;
        for block in &self.blocks[..=last] {
            x = block.forward(&x, &self.cfg, mode)?;
        }
        Ok(x)
    }

    fn encoder_input(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let tokens = self.patch_embed(images, mode)?;
        self.pre_norm.forward(tokens.tensor(), self.cfg.layer_norm_eps)
    }

    /// Single pass through the blocks, recording the post-block patch
    /// tokens at each tap. Blocks past the last tap are not evaluated.
    pub fn forward_with_taps(&self, images: &Tensor, taps: &[usize], mode: &mut Mode<'_>) -> Result<FeatureStack> {
        validate_taps(taps, self.cfg.depth)?;
        let n = self.cfg.num_patches();
        let last = *taps.last().expect("validated non-empty");
        let mut x = self.encoder_input(images, mode)?;
        let mut layers = Vec::with_capacity(taps.len());
        let mut next = taps.iter().peekable();
        for (i, block) in self.blocks[..=last].iter().enumerate() {
            x = block.forward(&x, &self.cfg, mode)?;
            if next.peek() == Some(&&i) {
                layers.push(x.narrow(1, 1, n)?);
                next.next();
            }
        }
        FeatureStack::new(layers, taps.to_vec())
    }

    /// Frozen arrays under their canonical keys.
    pub fn frozen_tensors(&self) -> Vec<(String, Tensor)> {
        let (d, p) = (self.cfg.width, self.cfg.patch_size);
        let mut out = vec![
            (
                "embed.patch.weight".to_string(),
                self.patch.weight.reshape((d, 3, p, p)).expect("patch weight"),
            ),
            ("embed.class".to_string(), self.class_token.clone()),
            ("embed.position".to_string(), self.positions.clone()),
            ("pre_norm.weight".to_string(), self.pre_norm.weight.clone()),
            ("pre_norm.bias".to_string(), self.pre_norm.bias.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm1.weight"), b.norm1.weight.clone()));
            out.push((format!("blocks.{i}.norm1.bias"), b.norm1.bias.clone()));
            out.push((format!("blocks.{i}.norm2.weight"), b.norm2.weight.clone()));
            out.push((format!("blocks.{i}.norm2.bias"), b.norm2.bias.clone()));
            for (name, t) in BLOCK_LINEARS {
                let l = b.projection(t).expect("block target");
                out.push((format!("blocks.{i}.{name}.weight"), l.weight.clone()));
                if let Some(bias) = &l.bias {
                    out.push((format!("blocks.{i}.{name}.bias"), bias.clone()));
                }
            }
        }
        out.push(("post_norm.weight".to_string(), self.post_norm.weight.clone()));
        out.push(("post_norm.bias".to_string(), self.post_norm.bias.clone()));
        out
    }

    pub fn frozen_numel(&self) -> usize {
        self.frozen_tensors().iter().map(|(_, t)| t.elem_count()).sum()
    }

    /// Writes the frozen weights as a canonical container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new();
        for (k, t) in self.frozen_tensors() {
            c.insert(k, t);
        }
        c.save(path)
    }

    /// Loads a canonical or CLIP-named container, inferring geometry from
    /// array shapes. Heads default to `width / 64`.
    pub fn load_pretrained(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_pretrained_with(path, None, &Device::Cpu)
    }

    pub fn load_pretrained_with(path: impl AsRef<Path>, heads: Option<usize>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut unrecognized = Vec::new();
        let raw = Container::from_bytes_filtered(&bytes, device, |key| {
            if canonical_key(key) || translate_clip_key(key).is_some() {
                true
            } else {
                if key.starts_with("vision_model.") && !key.ends_with("position_ids") {
                    unrecognized.push(key.to_string());
                }
                false
            }
        })?;
        let mut tensors = BTreeMap::new();
        for (k, t) in raw.tensors {
            let key = if canonical_key(&k) { k } else { translate_clip_key(&k).expect("filtered") };
            tensors.insert(key, t);
        }
        let cfg = infer_config(&tensors, heads).map_err(|missing| {
            Error::Checkpoint(report_keys(&missing, &[], &unrecognized))
        })?;
        Self::from_tensors(&cfg, tensors, &unrecognized, device)
    }

    /// Assembles a backbone from canonical arrays, validating full key
    /// coverage against `cfg`.
    pub fn from_tensors(
        cfg: &BackboneConfig,
        mut tensors: BTreeMap<String, Tensor>,
        unrecognized: &[String],
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let expected = expected_shapes(cfg);
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        for (k, shape) in &expected {
            match tensors.get(k) {
                None => missing.push(k.clone()),
                Some(t) if t.dims() != shape.as_slice() => {
                    bad_shape.push(format!("{k} (expected {shape:?}, got {:?})", t.dims()))
                }
                Some(_) => {}
            }
        }
        let extra: Vec<String> = tensors
            .keys()
            .filter(|k| !expected.contains_key(*k))
            .cloned()
            .chain(unrecognized.iter().cloned())
            .collect();
        if !missing.is_empty() || !bad_shape.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(report_keys(&missing, &bad_shape, &extra)));
        }
        let mut take = |k: &str| -> Result<Tensor> {
            Ok(tensors
                .remove(k)
                .expect("coverage checked")
                .to_dtype(DType::F32)?
                .to_device(device)?)
        };
        let take_norm = |take: &mut dyn FnMut(&str) -> Result<Tensor>, p: &str| -> Result<Norm> {
            Ok(Norm {
                weight: take(&format!("{p}.weight"))?,
                bias: take(&format!("{p}.bias"))?,
            })
        };
        let (d, pd) = (cfg.width, cfg.patch_dim());
        let patch = AdaptedLinear::new(take("embed.patch.weight")?.reshape((d, pd))?, None);
        let class_token = take("embed.class")?;
        let positions = take("embed.position")?;
        let pre_norm = take_norm(&mut take, "pre_norm")?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut lin = |name: &str| -> Result<AdaptedLinear> {
                Ok(AdaptedLinear::new(
                    take(&format!("blocks.{i}.{name}.weight"))?,
                    Some(take(&format!("blocks.{i}.{name}.bias"))?),
                ))
            };
            let q_proj = lin("attn.q_proj")?;
            let k_proj = lin("attn.k_proj")?;
            let v_proj = lin("attn.v_proj")?;
            let out_proj = lin("attn.out_proj")?;
            let fc1 = lin("mlp.fc1")?;
            let fc2 = lin("mlp.fc2")?;
            blocks.push(Block {
                norm1: take_norm(&mut take, &format!("blocks.{i}.norm1"))?,
                q_proj,
                k_proj,
                v_proj,
                out_proj,
                norm2: take_norm(&mut take, &format!("blocks.{i}.norm2"))?,
                fc1,
                fc2,
            });
        }
        let post_norm = take_norm(&mut take, "post_norm")?;
        Ok(Self {
            cfg: cfg.clone(),
            device: device.clone(),
            patch,
            class_token,
            positions,
            pre_norm,
            blocks,
            post_norm,
        })
    }
}

fn report_keys(missing: &[String], bad_shape: &[String], extra: &[String]) -> String {
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("missing keys: {}", missing.join(", ")));
    }
    if !bad_shape.is_empty() {
        parts.push(format!("shape mismatches: {}", bad_shape.join(", ")));
    }
    if !extra.is_empty() {
        parts.push(format!("unexpected keys: {}", extra.join(", ")));
    }
    parts.join("; ")
}

/// Every canonical key with its shape for `cfg`.
pub fn expected_shapes(cfg: &BackboneConfig) -> BTreeMap<String, Vec<usize>> {
    let (d, p, h) = (cfg.width, cfg.patch_size, cfg.mlp_ratio * cfg.width);
    let mut m = BTreeMap::new();
    m.insert("embed.patch.weight".into(), vec![d, 3, p, p]);
    m.insert("embed.class".into(), vec![d]);
    m.insert("embed.position".into(), vec![cfg.num_patches() + 1, d]);
    for n in ["pre_norm", "post_norm"] {
        m.insert(format!("{n}.weight"), vec![d]);
        m.insert(format!("{n}.bias"), vec![d]);
    }
    for i in 0..cfg.depth {
        for n in ["norm1", "norm2"] {
            m.insert(format!("blocks.{i}.{n}.weight"), vec![d]);
            m.insert(format!("blocks.{i}.{n}.bias"), vec![d]);
        }
        for (name, t) in BLOCK_LINEARS {
            let (o, inp) = match t {
                LoraTarget::Fc1 => (h, d),
                LoraTarget::Fc2 => (d, h),
                _ => (d, d),
            };
            m.insert(format!("blocks.{i}.{name}.weight"), vec![o, inp]);
            m.insert(format!("blocks.{i}.{name}.bias"), vec![o]);
        }
    }
    m
}

fn canonical_key(key: &str) -> bool {
    key.starts_with("embed.")
        || key.starts_with("blocks.")
        || key.starts_with("pre_norm.")
        || key.starts_with("post_norm.")
}

/// Public CLIP vision-tower names (Hugging Face layout) to canonical keys.
pub const CLIP_KEY_TABLE: [(&str, &str); 13] = [
    ("vision_model.embeddings.patch_embedding.weight", "embed.patch.weight"),
    ("vision_model.embeddings.class_embedding", "embed.class"),
    ("vision_model.embeddings.position_embedding.weight", "embed.position"),
    ("vision_model.pre_layrnorm.", "pre_norm."),
    ("vision_model.post_layernorm.", "post_norm."),
    ("layer_norm1.", "norm1."),
    ("layer_norm2.", "norm2."),
    ("self_attn.q_proj.", "attn.q_proj."),
    ("self_attn.k_proj.", "attn.k_proj."),
    ("self_attn.v_proj.", "attn.v_proj."),
    ("self_attn.out_proj.", "attn.out_proj."),
    ("mlp.fc1.", "mlp.fc1."),
    ("mlp.fc2.", "mlp.fc2."),
];

/// Translates one CLIP vision-tower key; `None` for anything else
/// (text tower, projection heads, index buffers, unknown names).
pub fn translate_clip_key(key: &str) -> Option<String> {
    for (from, to) in &CLIP_KEY_TABLE[..5] {
        if from.ends_with('.') {
            if let Some(rest) = key.strip_prefix(from) {
                return matches!(rest, "weight" | "bias").then(|| format!("{to}{rest}"));
            }
        } else if key == *from {
            return Some(to.to_string());
        }
    }
    let rest = key.strip_prefix("vision_model.encoder.layers.")?;
    let (idx, tail) = rest.split_once('.')?;
    let idx: usize = idx.parse().ok()?;
    for (from, to) in &CLIP_KEY_TABLE[5..] {
        if let Some(param) = tail.strip_prefix(from) {
            if matches!(param, "weight" | "bias") {
                return Some(format!("blocks.{idx}.{to}{param}"));
            }
        }
    }
    None
}

fn infer_config(
    tensors: &BTreeMap<String, Tensor>,
    heads: Option<usize>,
) -> std::result::Result<BackboneConfig, Vec<String>> {
    let required = ["embed.patch.weight", "embed.position", "blocks.0.mlp.fc1.weight"];
    let missing: Vec<String> = required
        .iter()
        .filter(|k| !tensors.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(missing);
    }
    let patch = tensors["embed.patch.weight"].dims();
    let (width, patch_size) = (patch[0], patch.get(2).copied().unwrap_or(1));
    let positions = tensors["embed.position"].dims()[0];
    let grid = ((positions.saturating_sub(1)) as f64).sqrt().round() as usize;
    let hidden = tensors["blocks.0.mlp.fc1.weight"].dims()[0];
    let blocks: BTreeSet<usize> = tensors
        .keys()
        .filter_map(|k| k.strip_prefix("blocks.")?.split_once('.')?.0.parse().ok())
        .collect();
    let depth = blocks.last().map_or(0, |m| m + 1);
    Ok(BackboneConfig {
        image_size: grid * patch_size,
        patch_size,
        depth,
        width,
        heads: heads.unwrap_or((width / 64).max(1)),
        mlp_ratio: (hidden / width.max(1)).max(1),
        toy: false,
        ..BackboneConfig::vit_l14()
    })
}
