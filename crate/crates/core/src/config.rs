//! Run configuration: a sectioned TOML file with flat keys, plus dotted
//! `section.key=value` overrides.
//!
//! ```toml
//! [backbone]
//! source = "toy"        # toy | random | pretrained
//! seed = 0
//!
//! [fusion]
//! taps = [0, 1]
//!
//! [train]
//! lr = 5e-5
//! batch_size = 8
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{validate_taps, Activation, BackboneConfig, DEFAULT_TAPS};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, Pooling};
use crate::losses::LossConfig;
use crate::lora::LoraConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneSource {
    /// Small random-init encoder.
    Toy,
    /// Random-init encoder at the configured geometry.
    Random,
    /// Weights read from `backbone.checkpoint`.
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub source: BackboneSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Seed for random-init sources.
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub activation: Activation,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let g = BackboneConfig::vit_l14();
        Self {
            source: BackboneSource::Pretrained,
            checkpoint: None,
            seed: 0,
            image_size: g.image_size,
            patch_size: g.patch_size,
            depth: g.depth,
            width: g.width,
            heads: g.heads,
            mlp_ratio: g.mlp_ratio,
            activation: g.activation,
        }
    }
}

impl BackboneSection {
    pub fn toy() -> Self {
        Self::from_geometry(BackboneSource::Toy, &BackboneConfig::toy())
    }

    pub fn from_geometry(source: BackboneSource, g: &BackboneConfig) -> Self {
        Self {
            source,
            checkpoint: None,
            seed: 0,
            image_size: g.image_size,
            patch_size: g.patch_size,
            depth: g.depth,
            width: g.width,
            heads: g.heads,
            mlp_ratio: g.mlp_ratio,
            activation: g.activation,
        }
    }

    /// Geometry as configured; pretrained weights may override it on load.
    pub fn geometry(&self) -> BackboneConfig {
        BackboneConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            layer_norm_eps: 1e-5,
            activation: self.activation,
            toy: self.source == BackboneSource::Toy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    /// Backbone blocks to tap (0-based); the last one is the deep feature.
    pub taps: Vec<usize>,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            taps: DEFAULT_TAPS.to_vec(),
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub proj_dim: usize,
    pub pooling: Pooling,
    pub normalize: bool,
}

impl Default for HeadSection {
    fn default() -> Self {
        let h = HeadConfig::default();
        Self {
            proj_dim: h.proj_dim,
            pooling: h.pooling,
            normalize: h.normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Run length in steps; overrides `epochs` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Fixed-backbone ablation: adapters are attached but never trained.
    pub freeze_backbone_adapters: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every N steps (0 disables periodic saves).
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// JSONL loss log; defaults to `checkpoint_dir/metrics.jsonl`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 8,
            epochs: 5,
            max_steps: None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
            seed: 0,
            freeze_backbone_adapters: false,
            checkpoint_dir: None,
            checkpoint_every: 0,
            manifest: None,
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub backbone: BackboneSection,
    pub lora: LoraConfig,
    pub fusion: FusionSection,
    pub head: HeadSection,
    pub loss: LossConfig,
    pub train: TrainSection,
}

impl TrainConfig {
    /// Desk-scale configuration on the toy backbone.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneSection::toy(),
            lora: LoraConfig { rank: 4, alpha: 8.0, ..LoraConfig::default() },
            fusion: FusionSection { taps: vec![0, 1], heads: 4, mlp_ratio: 4 },
            head: HeadSection { proj_dim: 16, ..HeadSection::default() },
            loss: LossConfig::default(),
            train: TrainSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lora.validate()?;
        self.loss.validate()?;
        if self.backbone.source == BackboneSource::Pretrained && self.backbone.checkpoint.is_none() {
            return Err(Error::Config("backbone.source = \"pretrained\" needs backbone.checkpoint".into()));
        }
        if self.backbone.source != BackboneSource::Pretrained {
            self.backbone.geometry().validate()?;
            validate_taps(&self.fusion.taps, self.backbone.depth)?;
        }
        if self.fusion.taps.len() < 2 {
            return Err(Error::Config("fusion needs at least two taps".into()));
        }
        let t = &self.train;
        if !(t.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(t.weight_decay >= 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("invalid AdamW coefficients".into()));
        }
        if self.head.proj_dim < 2 {
            return Err(Error::Config("head.proj_dim must be at least 2".into()));
        }
        Ok(())
    }

    /// Parses TOML and applies `section.key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        fix(&mut self.backbone.checkpoint);
        fix(&mut self.train.checkpoint_dir);
        fix(&mut self.train.manifest);
        fix(&mut self.train.metrics);
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn head_config(&self, width: usize) -> HeadConfig {
        HeadConfig {
            width,
            proj_dim: self.head.proj_dim,
            pooling: self.head.pooling,
            normalize: self.head.normalize,
        }
    }
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, o: &str) -> Result<()> {
    let (key, raw) = o
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override key `{key}` is not section.key")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(Error::Config(format!("`{section}` is not a section")));
    };
    sec.insert(field.to_string(), value);
    Ok(())
}
