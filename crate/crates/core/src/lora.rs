//! Low-rank adapters on frozen projection weights.
//!
//! A wrapped projection computes `W·x + b + s·B·(A·drop(x))` with
//! `s = alpha / rank`. `B` starts at zero so an injected model is exactly the
//! base model until the first optimizer step.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{self, Mode, Param, Parameterized};

/// Projection inside the backbone that may carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
    Fc1,
    Fc2,
    /// The patch-embedding projection (outside the blocks).
    PatchEmbed,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 7] = [
        LoraTarget::Query,
        LoraTarget::Key,
        LoraTarget::Value,
        LoraTarget::Output,
        LoraTarget::Fc1,
        LoraTarget::Fc2,
        LoraTarget::PatchEmbed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Query => "query",
            LoraTarget::Key => "key",
            LoraTarget::Value => "value",
            LoraTarget::Output => "output",
            LoraTarget::Fc1 => "fc1",
            LoraTarget::Fc2 => "fc2",
            LoraTarget::PatchEmbed => "patch_embed",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoraTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown LoRA target `{s}` (expected one of: {})",
                    LoraTarget::ALL.map(|t| t.as_str()).join(", ")
                ))
            })
    }
}

impl TryFrom<String> for LoraTarget {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LoraTarget> for String {
    fn from(t: LoraTarget) -> String {
        t.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Dropout probability on the adapter input path.
    pub dropout: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Parses a comma-separated target list such as `query,value`.
    pub fn parse_targets(list: &str) -> Result<Vec<LoraTarget>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }

    fn block_targets(&self) -> impl Iterator<Item = LoraTarget> + '_ {
        self.targets
            .iter()
            .copied()
            .filter(|t| *t != LoraTarget::PatchEmbed)
    }
}

/// Low-rank pair `(A, B)`: `A` is `rank × d_in`, `B` is `d_out × rank`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Param,
    pub b: Param,
    pub scaling: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        cfg: &LoraConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = nn::uniform(rng, (cfg.rank, d_in), bound, dtype, device)?;
        let b = Tensor::zeros((d_out, cfg.rank), dtype, device)?;
        Self::from_parts(a, b, cfg.scaling(), cfg.dropout)
    }

    pub fn from_parts(a: Tensor, b: Tensor, scaling: f64, dropout: f64) -> Result<Self> {
        let (r, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if r != rb {
            return Err(Error::RejectedInput(format!(
                "adapter rank mismatch: A has {r} rows, B has {rb} columns"
            )));
        }
        Ok(Self {
            a: Param::new(a, true, true)?,
            b: Param::new(b, true, true)?,
            scaling,
            dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.var().dims()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.var().dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.var().dims()[0]
    }

    /// `scaling · B·A`, shaped like the frozen weight.
    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.b.tensor().matmul(&self.a.tensor())? * self.scaling)?)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.a.set_trainable(trainable);
        self.b.set_trainable(trainable);
    }
}

/// A frozen dense projection, optionally wrapped with an adapter.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    /// Frozen base weight, `d_out × d_in`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub adapter: Option<LoraAdapter>,
}

impl AdaptedLinear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight,
            bias,
            adapter: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        adapter_forward(x, self, mode)
    }

    pub fn merge(&self) -> Result<Tensor> {
        merge(self)
    }

    fn attach(&mut self, rng: &mut ChaCha8Rng, cfg: &LoraConfig) -> Result<()> {
        let adapter = LoraAdapter::new(
            rng,
            self.d_in(),
            self.d_out(),
            cfg,
            self.weight.dtype(),
            self.weight.device(),
        )?;
        self.adapter = Some(adapter);
        Ok(())
    }
}

/// `W·x + b + scaling·B·(A·drop(x))`; dropout only when training.
pub fn adapter_forward(x: &Tensor, layer: &AdaptedLinear, mode: &mut Mode<'_>) -> Result<Tensor> {
    let base = nn::linear(x, &layer.weight, layer.bias.as_ref())?;
    let Some(adapter) = &layer.adapter else {
        return Ok(base);
    };
    let input = match mode {
        Mode::Train(rng) if adapter.dropout > 0.0 => {
            let mask = nn::dropout_mask(rng, x.dims(), adapter.dropout, x.dtype(), x.device())?;
            (x * mask)?
        }
        _ => x.clone(),
    };
    let low = nn::linear(&input, &adapter.a.tensor(), None)?;
    let up = nn::linear(&low, &adapter.b.tensor(), None)?;
    Ok((base + (up * adapter.scaling)?)?)
}

/// Dense equivalent weight `W + scaling·B·A`.
pub fn merge(layer: &AdaptedLinear) -> Result<Tensor> {
    match &layer.adapter {
        None => Ok(layer.weight.clone()),
        Some(adapter) => Ok((&layer.weight + adapter.delta()?)?),
    }
}

/// Attaches one adapter per configured target in every block (and on the
/// patch embedding if requested). Returns the number of adapters attached.
pub fn inject(backbone: &mut Backbone, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    cfg.validate()?;
    if cfg.targets.is_empty() {
        return Err(Error::Config("LoRA target list is empty".into()));
    }
    let mut count = 0;
    for block in backbone.blocks_mut() {
        for target in cfg.block_targets() {
            block.projection_mut(target)?.attach(rng, cfg)?;
            count += 1;
        }
    }
    if cfg.targets.contains(&LoraTarget::PatchEmbed) {
        backbone.patch_projection_mut().attach(rng, cfg)?;
        count += 1;
    }
    Ok(count)
}

/// Folds every adapter into its base weight and detaches it, leaving a
/// plain backbone. Returns the number of adapters merged.
pub fn merge_adapters(backbone: &mut Backbone) -> Result<usize> {
    let mut count = 0;
    for (_, layer) in backbone.adapted_layers_mut() {
        if layer.adapter.is_some() {
            layer.weight = merge(layer)?.detach();
            layer.adapter = None;
            count += 1;
        }
    }
    Ok(count)
}

/// Marks every adapter trainable or frozen.
pub fn set_adapters_trainable(backbone: &mut Backbone, trainable: bool) {
    for (_, layer) in backbone.adapted_layers_mut() {
        if let Some(a) = layer.adapter.as_mut() {
            a.set_trainable(trainable);
        }
    }
}

/// Adapter params under `lora.{block}.{target}.A|B` (patch embedding uses
/// `lora.patch_embed.A|B`).
pub fn adapter_params(backbone: &Backbone) -> Vec<(String, Param)> {
    let mut out = Vec::new();
    for (key, layer) in backbone.adapted_layers() {
        if let Some(a) = &layer.adapter {
            out.push((format!("lora.{key}.A"), a.a.clone()));
            out.push((format!("lora.{key}.B"), a.b.clone()));
        }
    }
    out
}

/// One trainable array in a parameter census.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub entries: Vec<CensusEntry>,
    pub trainable: usize,
    /// Frozen backbone weights plus everything registered as a param.
    pub total: usize,
}

impl Census {
    /// Entry count for adapter arrays (`A` and `B` count separately).
    pub fn adapter_arrays(&self) -> usize {
        self.entries.iter().filter(|e| e.name.starts_with("lora.")).count()
    }

    /// Number of adapters, i.e. `(A, B)` pairs.
    pub fn adapters(&self) -> usize {
        self.adapter_arrays() / 2
    }

    pub fn adapter_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with("lora."))
            .map(|e| e.numel)
            .sum()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    /// Fixed-width text rendering: one row per array, then totals.
    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>16}  {:>12}\n", "name", "shape", "numel");
        for e in &self.entries {
            let shape = format!("{:?}", e.shape);
            out.push_str(&format!("{:<width$}  {:>16}  {:>12}\n", e.name, shape, e.numel));
        }
        out.push_str(&format!(
            "trainable {} / total {} ({:.4}%); adapters {} ({} params)",
            self.trainable,
            self.total,
            100.0 * self.trainable_fraction(),
            self.adapters(),
            self.adapter_numel()
        ));
        out
    }
}

/// Lists every trainable array of `model`. `frozen_numel` is the number of
/// frozen elements that are not registered as params (the backbone base).
pub fn trainable_parameters(model: &impl Parameterized, frozen_numel: usize) -> Census {
    let params = model.named_params();
    let registered: usize = params.iter().map(|(_, p)| p.numel()).sum();
    let entries: Vec<CensusEntry> = params
        .into_iter()
        .filter(|(_, p)| p.trainable())
        .map(|(name, p)| CensusEntry {
            name,
            shape: p.var().dims().to_vec(),
            numel: p.numel(),
        })
        .collect();
    let trainable = entries.iter().map(|e| e.numel).sum();
    Census {
        entries,
        trainable,
        total: registered + frozen_numel,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    rank: usize,
    alpha: f64,
    dropout: f64,
    targets: Vec<LoraTarget>,
}

/// Writes only the adapters of `backbone`.
pub fn save_adapters(backbone: &Backbone, cfg: &LoraConfig, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new();
    for (key, p) in adapter_params(backbone) {
        c.insert(key, p.tensor());
    }
    let header = AdapterHeader {
        rank: cfg.rank,
        alpha: cfg.alpha,
        dropout: cfg.dropout,
        targets: cfg.targets.clone(),
    };
    c.metadata = Some(serde_json::to_string(&header)?);
    c.save(path)
}

/// Injects adapters described by an adapter-only container and loads their
/// weights. Returns the recorded configuration.
pub fn load_adapters(
    backbone: &mut Backbone,
    path: impl AsRef<Path>,
    rng: &mut ChaCha8Rng,
) -> Result<LoraConfig> {
    let c = Container::load(path, backbone.device())?;
    let header: AdapterHeader = serde_json::from_str(
        c.metadata
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("adapter container has no header".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad adapter header: {e}")))?;
    let cfg = LoraConfig {
        rank: header.rank,
        alpha: header.alpha,
        dropout: header.dropout,
        targets: header.targets,
    };
    inject(backbone, &cfg, rng)?;
    let tensors: BTreeMap<_, _> = c.tensors;
    let params = adapter_params(backbone);
    let missing: Vec<&str> = params
        .iter()
        .filter(|(k, _)| !tensors.contains_key(k))
        .map(|(k, _)| k.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing adapter keys: {}", missing.join(", "))));
    }
    for (k, p) in &params {
        p.set(&tensors[k]).map_err(|e| Error::Checkpoint(format!("{k}: {e}")))?;
    }
    Ok(cfg)
}
