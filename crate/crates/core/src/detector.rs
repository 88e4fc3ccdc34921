//! Full detector: backbone taps → fusion → pooled embedding → logit.

use candle::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{validate_taps, Backbone, FeatureStack};
use crate::config::{BackboneSource, TrainConfig};
use crate::deefuser::{fuse, DeeFuserConfig, DeeFuserParams, FusedFeatures};
use crate::error::{Error, Result};
use crate::head::{classify, embed, pool, HeadParams};
use crate::lora::{self, Census};
use crate::nn::{Mode, Param, Parameterized};

#[derive(Debug, Clone)]
pub struct Detector {
    pub backbone: Backbone,
    pub fuser: DeeFuserParams,
    pub head: HeadParams,
    pub taps: Vec<usize>,
    /// Number of adapters injected at build time.
    pub adapters: usize,
}

/// Everything a forward pass produces, batch-first.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub stack: FeatureStack,
    pub fused: FusedFeatures,
    pub pooled: Tensor,
    /// `(B, D_proj)` metric-space embeddings.
    pub embeddings: Tensor,
    /// `(B,)` raw logits.
    pub logits: Tensor,
}

impl Detector {
    /// Builds the backbone named by `cfg.backbone`, injects adapters and
    /// initializes fusion and head from `cfg.train.seed`.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        let device = Device::Cpu;
        let backbone = match cfg.backbone.source {
            BackboneSource::Toy => Backbone::build_toy(&cfg.backbone.geometry(), cfg.backbone.seed)?,
            BackboneSource::Random => {
                Backbone::random_init(&cfg.backbone.geometry(), cfg.backbone.seed, DType::F32, &device)?
            }
            BackboneSource::Pretrained => {
                let path = cfg
                    .backbone
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::Config("pretrained backbone needs a checkpoint path".into()))?;
                Backbone::load_pretrained_with(path, Some(cfg.backbone.heads), &device)?
            }
        };
        Self::assemble(backbone, cfg, DType::F32)
    }

    /// Wraps an existing backbone with freshly initialized trainable parts.
    pub fn assemble(mut backbone: Backbone, cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        validate_taps(&cfg.fusion.taps, backbone.config().depth)?;
        if cfg.fusion.taps.len() < 2 {
            return Err(Error::Config("fusion needs at least two taps".into()));
        }
        let device = backbone.device().clone();
        let width = backbone.config().width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let adapters = lora::inject(&mut backbone, &cfg.lora, &mut rng)?;
        if cfg.train.freeze_backbone_adapters {
            lora::set_adapters_trainable(&mut backbone, false);
        }
        let fuser_cfg = DeeFuserConfig {
            width,
            heads: cfg.fusion.heads,
            mlp_ratio: cfg.fusion.mlp_ratio,
            ..DeeFuserConfig::default()
        };
        let fuser = DeeFuserParams::init(&fuser_cfg, &mut rng, dtype, &device)?;
        let head = HeadParams::init(&cfg.head_config(width), &mut rng, dtype, &device)?;
        Ok(Self {
            backbone,
            fuser,
            head,
            taps: cfg.fusion.taps.clone(),
            adapters,
        })
    }

    pub fn forward(&self, images: &Tensor, mode: &mut Mode<'_>) -> Result<DetectorOutput> {
        let stack = self.backbone.forward_with_taps(images, &self.taps, mode)?;
        let fused = fuse(&stack, &self.fuser)?;
        let pooled = pool(&fused.visual, self.head.cfg.pooling)?;
        let embeddings = embed(&pooled, &self.head)?;
        let logits = classify(&embeddings, &self.head)?;
        Ok(DetectorOutput {
            stack,
            fused,
            pooled,
            embeddings,
            logits,
        })
    }

    /// Eval-mode fake probabilities for a batch.
    pub fn probabilities(&self, images: &Tensor) -> Result<Vec<f64>> {
        let out = self.forward(images, &mut Mode::Eval)?;
        let z: Vec<f64> = out.logits.to_dtype(DType::F64)?.to_vec1()?;
        Ok(z.into_iter().map(crate::head::sigmoid_scalar).collect())
    }

    pub fn image_size(&self) -> usize {
        self.backbone.config().image_size
    }

    pub fn census(&self) -> Census {
        lora::trainable_parameters(self, self.backbone.frozen_numel())
    }

    pub fn trainable_params(&self) -> Vec<(String, Param)> {
        self.named_params().into_iter().filter(|(_, p)| p.trainable()).collect()
    }
}

impl Parameterized for Detector {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = lora::adapter_params(&self.backbone);
        out.extend(self.fuser.named_params());
        out.extend(self.head.named_params());
        out
    }
}
